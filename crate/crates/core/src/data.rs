//! Synthetic data: machine-print rendering on a fixed-advance glyph grid
//! (which makes character boxes analytic), a seeded handwriting-style
//! distortion, preprocessing to the standardized 32x128 canvas, and dataset
//! splitting.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Characters the renderer and the recognizer agree on: lowercase, uppercase,
/// digits.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

pub fn alphabet_size() -> usize {
    ALPHABET.len()
}

pub fn char_to_class(c: char) -> Option<usize> {
    ALPHABET.chars().position(|a| a == c)
}

pub fn class_to_char(i: usize) -> Option<char> {
    ALPHABET.chars().nth(i)
}

pub fn label_to_classes(label: &str) -> Result<Vec<usize>> {
    label
        .chars()
        .map(|c| {
            char_to_class(c).ok_or_else(|| {
                CoreError::InvalidArgument(alloc::format!("character {c:?} not in alphabet"))
            })
        })
        .collect()
}

mod font {
    //! 5x7 glyphs; each arm concatenates the seven rows top to bottom
    //! ('#' = ink).

    pub const GLYPH_W: usize = 5;
    pub const GLYPH_H: usize = 7;

    pub fn glyph(c: char) -> Option<&'static str> {
        let g = match c {
            '0' => concat!(".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
            '1' => concat!("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
            '2' => concat!(".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
            '3' => concat!(".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
            '4' => concat!("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
            '5' => concat!("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
            '6' => concat!(".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."),
            '7' => concat!("#####", "....#", "...#.", "..#..", "..#..", "..#..", "..#.."),
            '8' => concat!(".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
            '9' => concat!(".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."),
            'A' => concat!(".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
            'B' => concat!("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
            'C' => concat!(".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."),
            'D' => concat!("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
            'E' => concat!("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
            'F' => concat!("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
            'G' => concat!(".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."),
            'H' => concat!("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
            'I' => concat!(".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
            'J' => concat!("..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."),
            'K' => concat!("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
            'L' => concat!("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
            'M' => concat!("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
            'N' => concat!("#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"),
            'O' => concat!(".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
            'P' => concat!("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
            'Q' => concat!(".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
            'R' => concat!("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
            'S' => concat!(".####", "#....", "#....", ".###.", "....#", "....#", "####."),
            'T' => concat!("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
            'U' => concat!("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
            'V' => concat!("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
            'W' => concat!("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"),
            'X' => concat!("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
            'Y' => concat!("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
            'Z' => concat!("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
            'a' => concat!(".....", ".....", ".###.", "....#", ".####", "#...#", ".####"),
            'b' => concat!("#....", "#....", "####.", "#...#", "#...#", "#...#", "####."),
            'c' => concat!(".....", ".....", ".###.", "#....", "#....", "#...#", ".###."),
            'd' => concat!("....#", "....#", ".####", "#...#", "#...#", "#...#", ".####"),
            'e' => concat!(".....", ".....", ".###.", "#...#", "#####", "#....", ".###."),
            'f' => concat!("..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."),
            'g' => concat!(".....", ".####", "#...#", "#...#", ".####", "....#", ".###."),
            'h' => concat!("#....", "#....", "####.", "#...#", "#...#", "#...#", "#...#"),
            'i' => concat!("..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."),
            'j' => concat!("...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."),
            'k' => concat!("#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."),
            'l' => concat!(".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
            'm' => concat!(".....", ".....", "##.#.", "#.#.#", "#.#.#", "#.#.#", "#.#.#"),
            'n' => concat!(".....", ".....", "####.", "#...#", "#...#", "#...#", "#...#"),
            'o' => concat!(".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."),
            'p' => concat!(".....", "####.", "#...#", "#...#", "####.", "#....", "#...."),
            'q' => concat!(".....", ".####", "#...#", "#...#", ".####", "....#", "....#"),
            'r' => concat!(".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."),
            's' => concat!(".....", ".....", ".####", "#....", ".###.", "....#", "####."),
            't' => concat!(".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."),
            'u' => concat!(".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"),
            'v' => concat!(".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
            'w' => concat!(".....", ".....", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."),
            'x' => concat!(".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"),
            'y' => concat!(".....", "#...#", "#...#", "#...#", ".####", "....#", ".###."),
            'z' => concat!(".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"),
            _ => return None,
        };
        Some(g)
    }
}

/// Grayscale raster, row-major, ink intensity in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn blank(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            pixels: vec![0.0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.pixels[r * self.w + c] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.h == 0 || self.w == 0
    }

    /// Bilinear resample to a new size.
    pub fn resize(&self, h: usize, w: usize) -> Image {
        assert!(!self.is_empty() && h > 0 && w > 0);
        let mut out = Image::blank(h, w);
        let sy = self.h as f64 / h as f64;
        let sx = self.w as f64 / w as f64;
        for r in 0..h {
            let cy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f64);
            let y0 = math::floor(cy) as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let fy = cy - y0 as f64;
            for c in 0..w {
                let cx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f64);
                let x0 = math::floor(cx) as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let fx = cx - x0 as f64;
                let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
                let bot = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
                out.set(r, c, top * (1.0 - fy) + bot * fy);
            }
        }
        out
    }
}

/// Fixed-advance glyph layout: every character occupies `glyph_w * scale`
/// columns starting at margin + k * advance, so bounding boxes are exact.
#[derive(Clone, Debug)]
pub struct FontSpec {
    pub scale: usize,
    /// Gap between glyph cells in pixels.
    pub gap: usize,
    pub margin_x: usize,
    /// Treat an empty label as a blank render instead of an error.
    pub allow_empty: bool,
}

impl Default for FontSpec {
    fn default() -> Self {
        FontSpec {
            scale: 2,
            gap: 2,
            margin_x: 2,
            allow_empty: false,
        }
    }
}

impl FontSpec {
    pub fn glyph_width(&self) -> usize {
        font::GLYPH_W * self.scale
    }

    pub fn glyph_height(&self) -> usize {
        font::GLYPH_H * self.scale
    }

    pub fn advance(&self) -> usize {
        self.glyph_width() + self.gap
    }

    pub fn max_chars(&self, canvas_w: usize) -> usize {
        let usable = canvas_w.saturating_sub(2 * self.margin_x) + self.gap;
        usable / self.advance()
    }
}

/// Renders a label onto a blank canvas and reports the per-character column
/// boxes. Deterministic: the same (label, spec) always produces the same
/// bytes.
pub fn render_machine_print(
    label: &str,
    spec: &FontSpec,
    canvas_h: usize,
    canvas_w: usize,
) -> Result<(Image, Vec<(usize, usize)>)> {
    let chars: Vec<char> = label.chars().collect();
    if chars.is_empty() {
        if spec.allow_empty {
            return Ok((Image::blank(canvas_h, canvas_w), Vec::new()));
        }
        return Err(CoreError::EmptyLabel);
    }
    let max_chars = spec.max_chars(canvas_w);
    if chars.len() > max_chars {
        return Err(CoreError::DoesNotFit {
            label_len: chars.len(),
            max_chars,
        });
    }
    if spec.glyph_height() > canvas_h {
        return Err(CoreError::DoesNotFit {
            label_len: chars.len(),
            max_chars: 0,
        });
    }

    let mut img = Image::blank(canvas_h, canvas_w);
    let top = (canvas_h - spec.glyph_height()) / 2;
    let mut boxes = Vec::with_capacity(chars.len());
    for (k, &ch) in chars.iter().enumerate() {
        let glyph = font::glyph(ch).ok_or_else(|| {
            CoreError::InvalidArgument(alloc::format!("character {ch:?} not in alphabet"))
        })?;
        let x0 = spec.margin_x + k * spec.advance();
        let bytes = glyph.as_bytes();
        debug_assert_eq!(bytes.len(), font::GLYPH_W * font::GLYPH_H);
        for gr in 0..font::GLYPH_H {
            for gc in 0..font::GLYPH_W {
                if bytes[gr * font::GLYPH_W + gc] == b'#' {
                    for dy in 0..spec.scale {
                        for dx in 0..spec.scale {
                            img.set(top + gr * spec.scale + dy, x0 + gc * spec.scale + dx, 1.0);
                        }
                    }
                }
            }
        }
        boxes.push((x0, x0 + spec.glyph_width()));
    }
    Ok((img, boxes))
}

/// Seeded handwriting stand-in: affine jitter, a smooth elastic warp, stroke
/// thickness variation, and pixel noise. Zero strength is the identity.
pub fn make_synthetic_handwriting(mp: &Image, seed: u64, strength: f64) -> Image {
    if strength == 0.0 {
        return mp.clone();
    }
    let mut rng = Rng::new(seed);
    let (h, w) = (mp.h, mp.w);

    // affine: rotation, shear, scale, translation around the center
    let angle = rng.uniform_in(-0.06, 0.06) * strength;
    let shear = rng.uniform_in(-0.12, 0.12) * strength;
    let scale = 1.0 + rng.uniform_in(-0.08, 0.08) * strength;
    let tx = rng.uniform_in(-2.0, 2.0) * strength;
    let ty = rng.uniform_in(-1.5, 1.5) * strength;
    let (sin, cos) = (math::sin(angle), math::cos(angle));

    // elastic: coarse displacement grid, bilinearly upsampled
    let gh = 4;
    let gw = 8;
    let amp = 1.6 * strength;
    let grid_dx: Vec<f64> = (0..gh * gw).map(|_| rng.normal() * amp).collect();
    let grid_dy: Vec<f64> = (0..gh * gw).map(|_| rng.normal() * amp).collect();
    let grid_at = |g: &[f64], r: f64, c: f64| -> f64 {
        let gr = (r * (gh - 1) as f64).clamp(0.0, (gh - 1) as f64);
        let gc = (c * (gw - 1) as f64).clamp(0.0, (gw - 1) as f64);
        let r0 = math::floor(gr) as usize;
        let c0 = math::floor(gc) as usize;
        let r1 = (r0 + 1).min(gh - 1);
        let c1 = (c0 + 1).min(gw - 1);
        let fr = gr - r0 as f64;
        let fc = gc - c0 as f64;
        let top = g[r0 * gw + c0] * (1.0 - fc) + g[r0 * gw + c1] * fc;
        let bot = g[r1 * gw + c0] * (1.0 - fc) + g[r1 * gw + c1] * fc;
        top * (1.0 - fr) + bot * fr
    };

    let sample = |img: &Image, y: f64, x: f64| -> f64 {
        if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
            return 0.0;
        }
        let y0 = math::floor(y) as usize;
        let x0 = math::floor(x) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
        let bot = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    };

    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut warped = Image::blank(h, w);
    for r in 0..h {
        for c in 0..w {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            // inverse affine map of the output pixel
            let sx = (cos * dx + sin * dy) / scale + shear * dy + cx - tx;
            let sy = (-sin * dx + cos * dy) / scale + cy - ty;
            // elastic displacement field in normalized coordinates
            let ex = grid_at(&grid_dx, r as f64 / h as f64, c as f64 / w as f64);
            let ey = grid_at(&grid_dy, r as f64 / h as f64, c as f64 / w as f64);
            warped.set(r, c, sample(mp, sy + ey, sx + ex));
        }
    }

    // stroke thickness: blend toward a 3x3 cross dilation or erosion
    let thicken = rng.uniform_in(-1.0, 1.0) * strength;
    let mut morphed = warped.clone();
    for r in 0..h {
        for c in 0..w {
            let mut m = warped.at(r, c);
            let mut lo = m;
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let rr = r as i64 + dr;
                let cc = c as i64 + dc;
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    let v = warped.at(rr as usize, cc as usize);
                    m = m.max(v);
                    lo = lo.min(v);
                }
            }
            let target = if thicken >= 0.0 { m } else { lo };
            let t = math::abs(thicken).min(1.0);
            morphed.set(r, c, warped.at(r, c) * (1.0 - t) + target * t);
        }
    }

    // pixel noise
    let sigma = 0.04 * strength;
    for v in &mut morphed.pixels {
        *v = (*v + rng.normal() * sigma).clamp(0.0, 1.0);
    }
    morphed
}

/// Global corpus statistics used for standardization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusStats {
    pub mean: f64,
    pub std: f64,
}

impl CorpusStats {
    pub fn compute<'a>(images: impl Iterator<Item = &'a Image>) -> CorpusStats {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for img in images {
            for &v in &img.pixels {
                n += 1;
                sum += v;
                sum_sq += v * v;
            }
        }
        if n == 0 {
            return CorpusStats {
                mean: 0.0,
                std: 1.0,
            };
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        CorpusStats {
            mean,
            std: math::sqrt(var),
        }
    }
}

pub const CANVAS_H: usize = 32;
pub const CANVAS_W: usize = 128;

/// Resize to the 32x128 canvas and standardize with the corpus statistics
/// (epsilon-guarded against a degenerate std).
pub fn preprocess(raw: &Image, stats: &CorpusStats) -> Result<Image> {
    if raw.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    let resized = if raw.h == CANVAS_H && raw.w == CANVAS_W {
        raw.clone()
    } else {
        raw.resize(CANVAS_H, CANVAS_W)
    };
    let denom = stats.std.max(1e-6);
    let pixels = resized
        .pixels
        .iter()
        .map(|v| (v - stats.mean) / denom)
        .collect();
    Ok(Image {
        h: CANVAS_H,
        w: CANVAS_W,
        pixels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSource {
    Synthetic,
    Manifest,
}

/// One paired training sample: handwritten-style input, machine-print
/// target, the label, and the exact character boxes of the print image.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub hw: Image,
    pub mp: Image,
    pub label: String,
    pub char_boxes: Vec<(usize, usize)>,
    pub source: SampleSource,
}

impl LabeledSample {
    pub fn validate(&self) -> Result<()> {
        if self.char_boxes.len() != self.label.chars().count() {
            return Err(CoreError::DimensionMismatch {
                expected: self.label.chars().count().to_string(),
                got: self.char_boxes.len().to_string(),
            });
        }
        let mut prev_end = 0usize;
        for &(x0, x1) in &self.char_boxes {
            if x0 >= x1 || x1 > self.mp.w || x0 < prev_end {
                return Err(CoreError::InvalidArgument(alloc::format!(
                    "boxes must be ordered, non-overlapping and in bounds: ({x0},{x1})"
                )));
            }
            prev_end = x1;
        }
        Ok(())
    }
}

/// Seeded shuffle-then-split; the two halves are disjoint and exhaustive.
pub fn split_dataset<T>(mut samples: Vec<T>, ratio: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    assert!(ratio > 0.0 && ratio < 1.0, "ratio must be in (0,1)");
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut samples);
    let n = samples.len();
    let train_n = math::round(ratio * n as f64) as usize;
    let train_n = train_n.min(n);
    let test = samples.split_off(train_n);
    (samples, test)
}

/// Renders a synthetic paired dataset over a vocabulary: machine print with
/// exact boxes plus a distorted handwriting stand-in, all raw (ink in [0,1]).
pub fn make_synthetic_dataset(
    vocab: &[String],
    n_samples: usize,
    spec: &FontSpec,
    distortion_strength: f64,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if vocab.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = &vocab[i % vocab.len()];
        let (mp, boxes) = render_machine_print(label, spec, CANVAS_H, CANVAS_W)?;
        let hw = make_synthetic_handwriting(&mp, rng.next_u64(), distortion_strength);
        let sample = LabeledSample {
            hw,
            mp,
            label: label.clone(),
            char_boxes: boxes,
            source: SampleSource::Synthetic,
        };
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

/// Ten short words for the desk-scale experiments.
pub fn toy_vocabulary() -> Vec<String> {
    [
        "and", "the", "was", "his", "her", "with", "had", "for", "not", "you",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Stacks standardized images into a [b,1,h,w] tensor batch.
pub fn image_batch(images: &[&Image]) -> Tensor {
    assert!(!images.is_empty());
    let (h, w) = (images[0].h, images[0].w);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        assert_eq!((img.h, img.w), (h, w), "batch images must share a shape");
        data.extend_from_slice(&img.pixels);
    }
    Tensor::constant(&[images.len(), 1, h, w], data)
}
