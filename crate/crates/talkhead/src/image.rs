//! PNG previews of rendered and observed frames.

use std::path::Path;

use crate::fsio::{self, IoError};

/// Quantise `[0, 1]` floats to bytes, clamping out-of-range values.
pub fn quantise(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode an 8-bit PNG. `channels` is 1 (grey) or 3 (RGB); `data` is
/// row-major.
pub fn encode_png(width: usize, height: usize, channels: usize, data: &[f64]) -> Result<Vec<u8>, String> {
    if data.len() != width * height * channels {
        return Err(format!("{} values for a {width}x{height}x{channels} image", data.len()));
    }
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(format!("unsupported channel count {channels}")),
    };
    let w = u32::try_from(width).map_err(|_| "image too wide")?;
    let h = u32::try_from(height).map_err(|_| "image too tall")?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        let bytes: Vec<u8> = data.iter().map(|&v| quantise(v)).collect();
        writer.write_image_data(&bytes).map_err(|e| e.to_string())?;
    }
    Ok(out)
}

pub fn save_png(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<(), IoError> {
    let bytes = encode_png(width, height, channels, data).map_err(|r| IoError::invalid(path, r))?;
    fsio::write_atomic(path, &bytes)
}

/// Map depth to grey levels, near bright, background black.
pub fn depth_preview(depth: &[f64], background: f64) -> Vec<f64> {
    let fg = depth.iter().copied().filter(|&d| d < 0.5 * background);
    let (lo, hi) = fg.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    let span = (hi - lo).max(1e-9);
    depth
        .iter()
        .map(|&d| {
            if d < 0.5 * background {
                1.0 - 0.8 * (d - lo) / span
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_decodes_to_the_quantised_pixels() {
        let data = [0.0, 0.5, 1.0, 2.0, -1.0, 0.25];
        let bytes = encode_png(2, 1, 3, &data).unwrap();
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (2, 1));
        assert_eq!(&buf[..6], &[0, 128, 255, 255, 0, 64]);
        assert!(encode_png(2, 2, 3, &data).is_err());
    }
}
