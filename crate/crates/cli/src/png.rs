//! PNG emission for `[1, C, H, W]` tensors in `[-1, 1]`.
//!
//! The value mapping is fixed so golden images are stable: `[-1, 1]` maps
//! affinely onto `[0, 255]` with rounding half-up after clamping.

use std::path::Path;

use decloud_core::error::{Error, Result};
use decloud_core::numerics::Tensor;

/// Quantizes one value from `[-1, 1]` to a byte, rounding half up.
pub fn quantize(v: f32) -> u8 {
    let clamped = v.clamp(-1.0, 1.0);
    let scaled = (clamped + 1.0) / 2.0 * 255.0 + 0.5;
    (scaled.floor() as i32).clamp(0, 255) as u8
}

/// Writes a grayscale (C=1) or RGB (C=3) PNG.
pub fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    if img.rank() != 4 || img.shape()[0] != 1 {
        return Err(Error::Format(format!(
            "png expects [1, C, H, W], got {:?}",
            img.shape()
        )));
    }
    let (c, h, w) = (img.shape()[1], img.shape()[2], img.shape()[3]);
    let hw = h * w;
    let data = img.data();
    match c {
        1 => {
            let buf: Vec<u8> = data.iter().map(|&v| quantize(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, buf)
                .ok_or_else(|| Error::Format("png buffer size mismatch".into()))?
                .save(path)
                .map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
        }
        3 => {
            let mut buf = Vec::with_capacity(3 * hw);
            for p in 0..hw {
                buf.push(quantize(data[p]));
                buf.push(quantize(data[hw + p]));
                buf.push(quantize(data[2 * hw + p]));
            }
            image::RgbImage::from_raw(w as u32, h as u32, buf)
                .ok_or_else(|| Error::Format("png buffer size mismatch".into()))?
                .save(path)
                .map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
        }
        other => Err(Error::InvalidConfig(format!(
            "png emission supports 1 or 3 channels, got {other}; use the tensor container output"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_endpoints_and_rounding() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 128); // 127.5 + 0.5 rounds up
        assert_eq!(quantize(-2.0), 0); // clamped
        assert_eq!(quantize(2.0), 255);
    }
}
