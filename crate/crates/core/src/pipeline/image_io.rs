use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, Luma};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Luminance of an 8-bit RGB pixel, in [0, 1].
pub fn luminance(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

/// Converts a decoded image to a `1x1xHxW` tensor in [0, 1].
pub fn to_gray_tensor(img: &DynamicImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
            g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
        }),
        other => {
            let rgb = other.to_rgb8();
            Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
                let p = rgb.get_pixel(x as u32, y as u32);
                luminance(p[0], p[1], p[2])
            })
        }
    }
}

/// Reads a PNG or PGM image as grayscale in [0, 1].
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| image_err(path, e))?;
    Ok(to_gray_tensor(&img))
}

/// Quantizes [0, 1] to 8 bits, rounding halves up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn to_gray8(t: &Tensor) -> Result<GrayImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape("to_gray8", "1x1xHxW image", s));
    }
    Ok(GrayImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        Luma([quantize(t.at(0, 0, y as usize, x as usize))])
    }))
}

/// Writes an 8-bit grayscale image; the format follows the extension (PNG or PGM).
pub fn save_gray(t: &Tensor, path: &Path) -> Result<()> {
    let img = to_gray8(t)?;
    let fmt = image::ImageFormat::from_path(path).map_err(|e| image_err(path, e))?;
    if !matches!(fmt, image::ImageFormat::Png | image::ImageFormat::Pnm) {
        return Err(image_err(path, "only .png and .pgm outputs are supported"));
    }
    img.save_with_format(path, fmt)
        .map_err(|e| image_err(path, e))
}
