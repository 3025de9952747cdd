//! PNG (and any other format the `image` crate decodes) to and from
//! `[0, 1]` RGB tensors.

use std::path::Path;

use image::{ImageReader, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;
use crate::transforms::resize_bicubic;

/// Decodes an image file to RGB without resizing.
pub fn load_rgb<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .to_rgb8();
    from_rgb8(&img)
}

/// Decodes and bicubic-resizes to `size x size`, clamping to `[0, 1]`.
pub fn load_square<T: Scalar>(path: &Path, size: usize) -> Result<ImageTensor<T>> {
    let img = load_rgb(path)?;
    if img.height() == size && img.width() == size {
        return Ok(img);
    }
    Ok(resize_bicubic(&img, size, size).clamp01())
}

pub fn from_rgb8<T: Scalar>(img: &RgbImage) -> Result<ImageTensor<T>> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
    ImageTensor::from_vec(h as usize, w as usize, 3, data)
}

/// Rounds to 8 bits per channel.
pub fn to_rgb8<T: Scalar>(img: &ImageTensor<T>) -> Result<RgbImage> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {}", img.channels())));
    }
    let (h, w, _) = img.dims();
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (img.get(y, x, c).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8);
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(out)
}

pub fn save_png<T: Scalar>(img: &ImageTensor<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_rgb8(img)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
