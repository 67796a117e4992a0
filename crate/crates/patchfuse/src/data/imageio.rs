//! Image file reading and writing: 8-bit PNG, binary PPM/PGM, and JPEG
//! (read-only) behind one float-tensor interface.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Load an image as `[H, W, 3]` with values in `[0, 1]`. Grayscale inputs
/// are replicated across channels.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f64> = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(Tensor::new(values, &[h, w, 3])?)
}

/// Save an `[H, W, 3]` tensor with values in `[0, 1]` as an 8-bit image;
/// the format follows the file extension (`.png`, `.ppm`, ...).
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Data(format!(
            "save_image expects [H, W, 3], got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let bytes: Vec<u8> = image
        .values()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buffer = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer matches dimensions");
    buffer.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn quantized_random_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = Rng::seeded(seed);
        let values: Vec<f64> = (0..h * w * 3)
            .map(|_| f64::from((rng.uniform() * 255.0).round() as u8) / 255.0)
            .collect();
        Tensor::new(values, &[h, w, 3]).unwrap()
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let image = quantized_random_image(1, 8, 6);
        save_image(&path, &image).unwrap();
        let loaded = load_image(&path).unwrap();
        assert_eq!(loaded.shape(), image.shape());
        for (a, b) in loaded.values().iter().zip(image.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let image = quantized_random_image(2, 5, 7);
        save_image(&path, &image).unwrap();
        let loaded = load_image(&path).unwrap();
        for (a, b) in loaded.values().iter().zip(image.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let bad = Tensor::zeros(&[4, 4]);
        assert!(save_image(&path, &bad).is_err());
    }
}
