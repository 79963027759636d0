//! 8-bit grayscale PNG round trip for raw (unstandardized) images.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use handprint_core::data::Image;

use crate::error::{CliError, Result};

/// Writes ink intensities in [0,1] as an 8-bit grayscale PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.w as u32, img.h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| CliError::Data(format!("png encode {}: {e}", path.display())))?;
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| CliError::Data(format!("png write {}: {e}", path.display())))?;
    Ok(())
}

/// Reads an 8-bit grayscale PNG back into ink intensities in [0,1].
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| CliError::Data(format!("png decode {}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| CliError::Data(format!("png read {}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(CliError::Data(format!(
            "{}: expected 8-bit grayscale, got {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = buf[..w * h].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image { h, w, pixels })
}
