//! 8-bit PNG/PGM images as `[1, C, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::imgproc::luma;
use crate::tensor::Tensor;

/// Load an image. Grayscale files give one channel, everything else three
/// (alpha is dropped).
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLuma16(_) => {
            let g = img.into_luma8();
            let (w, h) = g.dimensions();
            let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Tensor::new([1, 1, h as usize, w as usize], data)?
        }
        _ => {
            let rgb = img.into_rgb8();
            let (w, h) = rgb.dimensions();
            let plane = (w * h) as usize;
            let mut data = vec![0.0; 3 * plane];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = px[c] as f64 / 255.0;
                }
            }
            Tensor::new([1, 3, h as usize, w as usize], data)?
        }
    })
}

/// Load an image and convert it to a single luma channel.
pub fn read_gray(path: &Path) -> Result<Tensor> {
    to_gray(&read_image(path)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a 1- or 3-channel tensor; the format follows the file extension.
pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || (c != 1 && c != 3) {
        return Err(Error::shape(
            "write_image",
            format!("cannot save tensor {:?}", t.shape()),
        ));
    }
    let (wu, hu) = (w as u32, h as u32);
    let plane = h * w;
    let d = t.data();
    let result = if c == 1 {
        let buf: GrayImage = ImageBuffer::from_fn(wu, hu, |x, y| {
            Luma([quantize(d[y as usize * w + x as usize])])
        });
        buf.save(path)
    } else {
        let buf: RgbImage = ImageBuffer::from_fn(wu, hu, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([
                quantize(d[i]),
                quantize(d[plane + i]),
                quantize(d[2 * plane + i]),
            ])
        });
        buf.save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Luma of a 3-channel tensor; 1-channel tensors are returned unchanged.
pub fn to_gray(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    match c {
        1 => Ok(t.clone()),
        3 => {
            let plane = h * w;
            let mut out = Vec::with_capacity(n * plane);
            for b in 0..n {
                let base = b * 3 * plane;
                let d = &t.data()[base..base + 3 * plane];
                out.extend((0..plane).map(|i| luma(d[i], d[plane + i], d[2 * plane + i])));
            }
            Tensor::new([n, 1, h, w], out)
        }
        _ => Err(Error::shape(
            "to_gray",
            format!("expected 1 or 3 channels, got {c}"),
        )),
    }
}

/// Replicate a 1-channel tensor into 3 identical channels.
pub fn gray_to_rgb(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::shape(
            "gray_to_rgb",
            format!("expected [1,1,H,W], got {:?}", t.shape()),
        ));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(t.data());
    }
    Tensor::new([1, 3, h, w], data)
}

/// Round-trip a `[0, 1]` tensor through 8-bit quantization.
pub fn quantize_8bit(t: &Tensor) -> Tensor {
    t.map(|v| quantize(v) as f64 / 255.0)
}
