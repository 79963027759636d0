//! Differentiable networks: the skip-connection encoder-decoder generator,
//! character extraction from known boxes, the recognizer's convolutional
//! feature paths, the joint attention layer, and the BiLSTM+CTC head.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::nn::{join, BatchNorm2d, BiLstm, Conv2d, Deconv2d, Dense, ParamOwner, ParamVisitor};
use crate::rng::Rng;
use crate::tensor::{log_softmax_rows, softmax_rows, Tensor};

// ---- generator ----

#[derive(Clone, Debug)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Encoder widths per level; the level count is `channels.len()`.
    pub channels: Vec<usize>,
    /// Noise channels concatenated at the bottleneck.
    pub noise_channels: usize,
    pub leaky_slope: f64,
}

impl UNetConfig {
    /// 5 encoder/decoder levels on the 32x128 canvas.
    pub fn word_default() -> Self {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            image_h: 32,
            image_w: 128,
            channels: vec![32, 64, 128, 256, 256],
            noise_channels: 8,
            leaky_slope: 0.2,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial size of the bottleneck (and of the noise tensor).
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let f = 1 << self.levels();
        (self.image_h / f, self.image_w / f)
    }

    pub fn noise_shape(&self, batch: usize) -> Vec<usize> {
        let (h, w) = self.bottleneck_hw();
        vec![batch, self.noise_channels, h, w]
    }
}

/// U-Net: strided-conv encoder, transposed-conv decoder, skip connections at
/// every resolution, noise concatenated at the bottleneck.
pub struct UNet {
    pub downs: Vec<Conv2d>,
    pub ups: Vec<Deconv2d>,
    pub final_conv: Conv2d,
    pub config: UNetConfig,
}

impl UNet {
    pub fn new(config: UNetConfig, rng: &mut Rng) -> Self {
        let levels = config.levels();
        assert!(levels >= 2, "u-net needs at least 2 levels");
        assert!(
            config.image_h % (1 << levels) == 0 && config.image_w % (1 << levels) == 0,
            "canvas must be divisible by 2^levels"
        );
        let mut downs = Vec::with_capacity(levels);
        let mut ic = config.in_channels;
        for &oc in &config.channels {
            downs.push(Conv2d::new(ic, oc, 4, 2, 1, rng));
            ic = oc;
        }
        let mut ups = Vec::with_capacity(levels);
        for i in 0..levels {
            // ups[0] consumes bottleneck + noise; later levels consume the
            // up path concatenated with the skip of the same resolution.
            let in_ch = if i == 0 {
                config.channels[levels - 1] + config.noise_channels
            } else {
                2 * config.channels[levels - 1 - i]
            };
            let out_ch = if i + 1 < levels {
                config.channels[levels - 2 - i]
            } else {
                config.channels[0]
            };
            ups.push(Deconv2d::new(in_ch, out_ch, 4, 2, 1, rng));
        }
        let final_conv = Conv2d::new(config.channels[0], config.out_channels, 3, 1, 1, rng);
        UNet {
            downs,
            ups,
            final_conv,
            config,
        }
    }

    /// Generates a machine-print image conditioned on the handwritten input
    /// and the bottleneck noise. Shape-preserving and deterministic given
    /// (input, noise, parameters).
    pub fn generate(&self, hw: &Tensor, z: &Tensor) -> Tensor {
        let (b, _c, h, w) = hw.dims4("unet input");
        assert_eq!(
            (h, w),
            (self.config.image_h, self.config.image_w),
            "unet canvas mismatch"
        );
        assert_eq!(
            z.shape(),
            self.config.noise_shape(b).as_slice(),
            "noise shape mismatch"
        );

        let mut skips: Vec<Tensor> = Vec::with_capacity(self.downs.len());
        let mut t = hw.clone();
        for down in &self.downs {
            t = down.forward(&t).leaky_relu(self.config.leaky_slope);
            skips.push(t.clone());
        }
        let levels = self.downs.len();
        let mut d = Tensor::concat(1, &[skips[levels - 1].clone(), z.clone()]);
        for (i, up) in self.ups.iter().enumerate() {
            if i > 0 {
                d = Tensor::concat(1, &[d, skips[levels - 1 - i].clone()]);
            }
            d = up.forward(&d).relu();
        }
        self.final_conv.forward(&d)
    }

    /// Deterministic evaluation mode: zero noise.
    pub fn generate_deterministic(&self, hw: &Tensor) -> Tensor {
        let b = hw.shape()[0];
        let z = Tensor::zeros(&self.config.noise_shape(b));
        self.generate(hw, &z)
    }
}

impl ParamOwner for UNet {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_params(&join(prefix, &alloc::format!("down{i}")), v);
        }
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_params(&join(prefix, &alloc::format!("up{i}")), v);
        }
        self.final_conv.visit_params(&join(prefix, "final"), v);
    }
}

// ---- character extraction ----

/// One extracted character: a column crop of the parent image.
pub struct CharSlice {
    /// [1, 1, H, x1-x0] crop.
    pub pixels: Tensor,
    /// Character index within the word.
    pub k: usize,
    /// Column bounds (x0 inclusive, x1 exclusive).
    pub x0: usize,
    pub x1: usize,
    /// The character symbol, when the caller knows the label.
    pub label_char: Option<char>,
}

/// [`extract_characters`] with the word labels attached to each slice.
pub fn extract_characters_labeled(
    img: &Tensor,
    boxes: &[Vec<(usize, usize)>],
    labels: &[&str],
) -> Result<Vec<Vec<CharSlice>>> {
    if labels.len() != boxes.len() {
        return Err(CoreError::DimensionMismatch {
            expected: boxes.len().to_string(),
            got: labels.len().to_string(),
        });
    }
    let mut out = extract_characters(img, boxes)?;
    for (word, label) in out.iter_mut().zip(labels) {
        let chars: Vec<char> = label.chars().collect();
        if chars.len() != word.len() {
            return Err(CoreError::DimensionMismatch {
                expected: word.len().to_string(),
                got: chars.len().to_string(),
            });
        }
        for (slice, c) in word.iter_mut().zip(chars) {
            slice.label_char = Some(c);
        }
    }
    Ok(out)
}

/// Slices every labeled character out of a batch of word images. Returns
/// exactly `boxes[i].len()` slices per word; pixels outside every box never
/// enter any downstream character computation.
pub fn extract_characters(
    img: &Tensor,
    boxes: &[Vec<(usize, usize)>],
) -> Result<Vec<Vec<CharSlice>>> {
    let (b, c, _h, w) = img.dims4("extract_characters");
    if c != 1 {
        return Err(CoreError::DimensionMismatch {
            expected: "1 channel".to_string(),
            got: c.to_string(),
        });
    }
    if boxes.len() != b {
        return Err(CoreError::DimensionMismatch {
            expected: b.to_string(),
            got: boxes.len().to_string(),
        });
    }
    let mut out = Vec::with_capacity(b);
    for (bi, word_boxes) in boxes.iter().enumerate() {
        let sample = img.slice_axis(0, bi, 1);
        let mut slices = Vec::with_capacity(word_boxes.len());
        for (k, &(x0, x1)) in word_boxes.iter().enumerate() {
            if x0 >= x1 || x1 > w {
                return Err(CoreError::InvalidArgument(alloc::format!(
                    "box ({x0},{x1}) out of bounds for width {w}"
                )));
            }
            let pixels = sample.slice_axis(3, x0, x1 - x0);
            slices.push(CharSlice {
                pixels,
                k,
                x0,
                x1,
                label_char: None,
            });
        }
        out.push(slices);
    }
    Ok(out)
}

/// Resizes extracted slices to fixed square cells and stacks them into one
/// [n_chars, 1, cell, cell] batch for the character discriminator.
pub fn char_cell_batch(slices: &[Vec<CharSlice>], cell: usize) -> Tensor {
    let mut cells: Vec<Tensor> = Vec::new();
    for word in slices {
        for s in word {
            cells.push(s.pixels.resize_bilinear(cell, cell));
        }
    }
    assert!(!cells.is_empty(), "no characters to batch");
    Tensor::concat(0, &cells)
}

// ---- recognizer feature paths ----

#[derive(Clone, Debug)]
pub struct CnnPathConfig {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Five conv->BN->ReLU->maxpool blocks by default.
    pub channels: Vec<usize>,
    pub pools: Vec<(usize, usize)>,
}

impl CnnPathConfig {
    /// 32x128 input, five blocks; widths halve four times (T = 128/16 = 8)
    /// and the height collapses to 1.
    pub fn word_default(feature_dim: usize) -> Self {
        CnnPathConfig {
            in_channels: 1,
            image_h: 32,
            image_w: 128,
            channels: vec![16, 32, 48, 64, feature_dim],
            pools: vec![(2, 2), (2, 2), (2, 2), (2, 2), (2, 1)],
        }
    }

    /// Sequence length produced by the pooling chain.
    pub fn time_steps(&self) -> usize {
        let wdiv: usize = self.pools.iter().map(|&(_, pw)| pw).product();
        self.image_w / wdiv
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("at least one block")
    }
}

/// Conv -> batch norm -> ReLU -> max pool, repeated; the height collapses to
/// one and the remaining columns become the feature sequence.
pub struct CnnPath {
    pub convs: Vec<Conv2d>,
    pub norms: Vec<BatchNorm2d>,
    pub config: CnnPathConfig,
}

impl CnnPath {
    pub fn new(config: CnnPathConfig, rng: &mut Rng) -> Self {
        assert_eq!(
            config.channels.len(),
            config.pools.len(),
            "one pool per block"
        );
        let mut h = config.image_h;
        let mut w = config.image_w;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut ic = config.in_channels;
        for (&oc, &(ph, pw)) in config.channels.iter().zip(&config.pools) {
            assert!(h % ph == 0 && w % pw == 0, "pooling must divide the size");
            convs.push(Conv2d::new(ic, oc, 3, 1, 1, rng));
            norms.push(BatchNorm2d::new(oc));
            ic = oc;
            h /= ph;
            w /= pw;
        }
        assert_eq!(h, 1, "feature height must collapse to 1");
        CnnPath {
            convs,
            norms,
            config,
        }
    }

    fn trunk(&mut self, x: &Tensor, training: bool) -> Tensor {
        let mut t = x.clone();
        for i in 0..self.convs.len() {
            t = self.convs[i].forward(&t);
            t = if training {
                self.norms[i].forward_train(&t)
            } else {
                self.norms[i].forward_eval(&t)
            };
            let (ph, pw) = self.config.pools[i];
            t = t.relu().max_pool2d(ph, pw);
        }
        t
    }

    /// Feature sequence of T tensors [b, d].
    pub fn forward(&mut self, x: &Tensor, training: bool) -> Vec<Tensor> {
        let t = self.trunk(x, training);
        let (b, d, h, steps) = t.dims4("cnn path output");
        debug_assert_eq!(h, 1);
        (0..steps)
            .map(|i| t.slice_axis(3, i, 1).reshape(&[b, d]))
            .collect()
    }
}

impl ParamOwner for CnnPath {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for i in 0..self.convs.len() {
            self.convs[i].visit_params(&join(prefix, &alloc::format!("conv{i}")), v);
            self.norms[i].visit_params(&join(prefix, &alloc::format!("bn{i}")), v);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, v: &mut dyn crate::nn::BufferVisitor) {
        for i in 0..self.norms.len() {
            self.norms[i].visit_buffers(&join(prefix, &alloc::format!("bn{i}")), v);
        }
    }
}

// ---- joint attention ----

/// Joint attention between a handwritten feature sequence H [T,d1] and a
/// machine-print sequence P [T,d2]:
/// N_ij = tanh(H_i W P_j), alpha = row-softmax(N), Hhat = alpha P,
/// A = [H | Hhat]. Rows of alpha sum to one.
pub fn joint_attention(h_mat: &Tensor, p_mat: &Tensor, w_attn: &Tensor) -> Tensor {
    let (t1, d1) = h_mat.dims2("joint_attention H");
    let (t2, d2) = p_mat.dims2("joint_attention P");
    assert_eq!(t1, t2, "sequence lengths must agree");
    assert_eq!(w_attn.shape(), &[d1, d2], "W shape must be [d1,d2]");
    let n = h_mat.matmul(w_attn).matmul(&p_mat.transpose2d()).tanh();
    let alpha = softmax_rows(&n);
    let hhat = alpha.matmul(p_mat);
    Tensor::concat(1, &[h_mat.clone(), hhat])
}

/// Batched joint attention over per-step [b,d] sequences; attention is
/// per-sample, so each sample's [T,d] matrices are processed independently.
/// Returns a sequence of [b, d1+d2] steps.
pub fn joint_attention_batch(h_seq: &[Tensor], p_seq: &[Tensor], w_attn: &Tensor) -> Vec<Tensor> {
    assert_eq!(h_seq.len(), p_seq.len(), "sequence lengths must agree");
    let steps = h_seq.len();
    let (b, d1) = h_seq[0].dims2("joint_attention_batch H");
    let (_b, d2) = p_seq[0].dims2("joint_attention_batch P");

    let mut per_sample: Vec<Vec<Tensor>> = Vec::with_capacity(b);
    for bi in 0..b {
        let h_rows: Vec<Tensor> = h_seq.iter().map(|s| s.slice_axis(0, bi, 1)).collect();
        let p_rows: Vec<Tensor> = p_seq.iter().map(|s| s.slice_axis(0, bi, 1)).collect();
        let h_mat = Tensor::concat(0, &h_rows);
        let p_mat = Tensor::concat(0, &p_rows);
        let a = joint_attention(&h_mat, &p_mat, w_attn);
        per_sample.push((0..steps).map(|t| a.slice_axis(0, t, 1)).collect());
    }
    (0..steps)
        .map(|t| {
            let rows: Vec<Tensor> = (0..b).map(|bi| per_sample[bi][t].clone()).collect();
            Tensor::concat(0, &rows).reshape(&[b, d1 + d2])
        })
        .collect()
}

// ---- BiLSTM + CTC head ----

pub struct HeadOutput {
    /// Per-step [b, alphabet+1] log-probabilities (log-softmax normalized).
    pub log_probs: Vec<Tensor>,
    /// Mean-pooled second-layer BiLSTM output, [b, 2*hidden] (the embedding
    /// the Frechet metric uses).
    pub embedding: Tensor,
}

/// Two bidirectional LSTM layers and a per-step projection to
/// alphabet size + 1 (the CTC blank occupies the last slot).
pub struct RecognizerHead {
    pub l1: BiLstm,
    pub l2: BiLstm,
    pub proj: Dense,
    pub hidden: usize,
    pub classes: usize,
}

impl RecognizerHead {
    pub fn new(input: usize, hidden: usize, alphabet: usize, rng: &mut Rng) -> Self {
        RecognizerHead {
            l1: BiLstm::new(input, hidden, rng),
            l2: BiLstm::new(2 * hidden, hidden, rng),
            proj: Dense::new(2 * hidden, alphabet + 1, rng),
            hidden,
            classes: alphabet + 1,
        }
    }

    pub fn forward(&self, seq: &[Tensor]) -> HeadOutput {
        let h1 = self.l1.forward(seq);
        let h2 = self.l2.forward(&h1);
        let log_probs = h2
            .iter()
            .map(|h| log_softmax_rows(&self.proj.forward(h)))
            .collect();
        let mut sum = h2[0].clone();
        for h in &h2[1..] {
            sum = sum.add(h);
        }
        let embedding = sum.mul_scalar(1.0 / h2.len() as f64);
        HeadOutput {
            log_probs,
            embedding,
        }
    }

    /// Unbatched convenience: feature matrix [T, input] in, log-probability
    /// matrix [T, classes] out.
    pub fn forward_matrix(&self, features: &Tensor) -> Tensor {
        let (t_steps, _) = features.dims2("head input");
        let seq: Vec<Tensor> = (0..t_steps).map(|t| features.slice_axis(0, t, 1)).collect();
        let out = self.forward(&seq);
        Tensor::concat(0, &out.log_probs)
    }
}

impl ParamOwner for RecognizerHead {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.l1.visit_params(&join(prefix, "l1"), v);
        self.l2.visit_params(&join(prefix, "l2"), v);
        self.proj.visit_params(&join(prefix, "proj"), v);
    }
}

// ---- full recognizer ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecognizerMode {
    /// CNN path over handwritten images only.
    HandwrittenOnly,
    /// CNN path over generated machine print only.
    GeneratedOnly,
    /// Both paths merged by the joint attention layer.
    Joint,
}

pub struct Recognizer {
    pub mode: RecognizerMode,
    pub hw_path: Option<CnnPath>,
    pub mp_path: Option<CnnPath>,
    pub w_attn: Option<Tensor>,
    pub head: RecognizerHead,
    pub alphabet: usize,
}

impl Recognizer {
    pub fn new(
        mode: RecognizerMode,
        path_config: CnnPathConfig,
        hidden: usize,
        alphabet: usize,
        rng: &mut Rng,
    ) -> Self {
        let d = path_config.feature_dim();
        let (hw_path, mp_path, w_attn, head_in) = match mode {
            RecognizerMode::HandwrittenOnly => {
                (Some(CnnPath::new(path_config, rng)), None, None, d)
            }
            RecognizerMode::GeneratedOnly => (None, Some(CnnPath::new(path_config, rng)), None, d),
            RecognizerMode::Joint => {
                let hw = CnnPath::new(path_config.clone(), rng);
                let mp = CnnPath::new(path_config, rng);
                let std = 1.0 / d as f64;
                let w = Tensor::param(
                    &[d, d],
                    rng.normal_vec(d * d).iter().map(|v| v * std).collect(),
                );
                (Some(hw), Some(mp), Some(w), 2 * d)
            }
        };
        Recognizer {
            mode,
            hw_path,
            mp_path,
            w_attn,
            head: RecognizerHead::new(head_in, hidden, alphabet, rng),
            alphabet,
        }
    }

    /// `hw` and `mp` are [b,1,H,W] batches; which one is required depends on
    /// the mode (joint needs both).
    pub fn forward(
        &mut self,
        hw: Option<&Tensor>,
        mp: Option<&Tensor>,
        training: bool,
    ) -> Result<HeadOutput> {
        let seq = match self.mode {
            RecognizerMode::HandwrittenOnly => {
                let x = hw.ok_or_else(|| {
                    CoreError::InvalidArgument("handwritten batch required".into())
                })?;
                self.hw_path.as_mut().unwrap().forward(x, training)
            }
            RecognizerMode::GeneratedOnly => {
                let x = mp.ok_or_else(|| {
                    CoreError::InvalidArgument("machine-print batch required".into())
                })?;
                self.mp_path.as_mut().unwrap().forward(x, training)
            }
            RecognizerMode::Joint => {
                let xh = hw.ok_or_else(|| {
                    CoreError::InvalidArgument("handwritten batch required".into())
                })?;
                let xm = mp.ok_or_else(|| {
                    CoreError::InvalidArgument("machine-print batch required".into())
                })?;
                let h_seq = self.hw_path.as_mut().unwrap().forward(xh, training);
                let p_seq = self.mp_path.as_mut().unwrap().forward(xm, training);
                joint_attention_batch(&h_seq, &p_seq, self.w_attn.as_ref().unwrap())
            }
        };
        Ok(self.head.forward(&seq))
    }
}

impl ParamOwner for Recognizer {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        if let Some(p) = self.hw_path.as_mut() {
            p.visit_params(&join(prefix, "hw_path"), v);
        }
        if let Some(p) = self.mp_path.as_mut() {
            p.visit_params(&join(prefix, "mp_path"), v);
        }
        if let Some(w) = self.w_attn.as_mut() {
            v.visit(&join(prefix, "w_attn"), w);
        }
        self.head.visit_params(&join(prefix, "head"), v);
    }

    fn visit_buffers(&mut self, prefix: &str, v: &mut dyn crate::nn::BufferVisitor) {
        if let Some(p) = self.hw_path.as_mut() {
            p.visit_buffers(&join(prefix, "hw_path"), v);
        }
        if let Some(p) = self.mp_path.as_mut() {
            p.visit_buffers(&join(prefix, "mp_path"), v);
        }
    }
}
