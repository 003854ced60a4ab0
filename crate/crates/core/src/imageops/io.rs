//! PNG/JPEG decode and PNG encode. 8-bit channels map to `[0, 1]` by `/255`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imageops::ImageTensor;

/// Decodes a raster file into a 3-channel tensor.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| f32::from(b) / 255.0)
        .collect();
    ImageTensor::new(h, w, 3, data)
}

/// Encodes a tensor as an 8-bit PNG. Values are clamped to `[0, 1]` and
/// scaled by 255 with rounding; single-channel tensors become grayscale PNGs.
pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let to_byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes: Vec<u8> = img.data().iter().copied().map(to_byte).collect();
    let result = match img.channels() {
        3 => image::RgbImage::from_raw(w, h, bytes)
            .expect("raster buffer size")
            .save(path),
        1 => image::GrayImage::from_raw(w, h, bytes)
            .expect("raster buffer size")
            .save(path),
        _ => unreachable!("ImageTensor enforces 1 or 3 channels"),
    };
    result.map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = ImageTensor::zeros(5, 4, 3);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        save_png(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.height(), 5);
        assert_eq!(back.width(), 4);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn missing_file_is_an_image_error() {
        let err = load_image(Path::new("/nonexistent/zzz.png")).unwrap_err();
        assert!(matches!(err, Error::Image(_)));
    }
}
