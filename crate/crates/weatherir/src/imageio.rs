//! 8-bit RGB PNG reading and writing.

use std::path::Path;

use image::{ImageReader, RgbImage};
use weatherir_core::Image;

use crate::error::{CliError, Result};

pub fn load_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    let decoded = ImageReader::open(path)
        .map_err(|e| CliError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CliError::io(path, e))?
        .decode()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    Ok(Image::new(h as usize, w as usize, data))
}

/// Quantizes to 8 bits (round to nearest) and writes a PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let bytes = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| CliError::Data("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize(img: &Image) -> Image {
    let data = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Image::new(img.height(), img.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(5, 7, |y, x, c| ((y * 7 + x) * 3 + c) as f32 / 105.0);
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        assert_eq!(back, quantize(&img));
        assert_eq!((back.height(), back.width()), (5, 7));
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none.png");
        assert!(matches!(load_png(&p), Err(CliError::Missing(_))));
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_png(&p), Err(CliError::Data(_))));
    }
}
