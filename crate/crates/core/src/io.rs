//! PNG import/export. Images are 8-bit RGB scaled to `[0, 1]`; masks are
//! 8-bit grayscale where values `>= 128` read as 1.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for k in 0..3 {
            data[k * h * w + y as usize * w + x as usize] = px.0[k] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_mask_png(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![h, w], data)
}

pub fn encode_rgb_png(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match img.dims() {
        [3, h, w] => (*h, *w),
        d => return Err(Error::Shape(format!("RGB image must be 3×H×W, got {d:?}"))),
    };
    let d = img.data();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
    });
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).map_err(|source| Error::Image {
        path: "<memory>".into(),
        source,
    })?;
    Ok(out.into_inner())
}

/// Grayscale PNG of a rank-2 field already in `[0, 1]`.
pub fn encode_gray_png(field: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = field.shape2()?;
    let d = field.data();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([quantize(d[y as usize * w + x as usize])]));
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).map_err(|source| Error::Image {
        path: "<memory>".into(),
        source,
    })?;
    Ok(out.into_inner())
}

/// Linear min-max normalization to `[0, 1]`; a constant field maps to zeros.
pub fn min_max_normalize(field: &Tensor) -> Tensor {
    let lo = field.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = field.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        field.map(|v| (v - lo) / (hi - lo))
    } else {
        field.map(|_| 0.0)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_rgb_png(path: &Path, img: &Tensor) -> Result<()> {
    write(path, &encode_rgb_png(img)?)
}

/// Binary mask as 0/255 grayscale.
pub fn write_mask_png(path: &Path, mask: &Tensor) -> Result<()> {
    write(path, &encode_gray_png(mask)?)
}

pub fn write_heatmap_png(path: &Path, field: &Tensor) -> Result<()> {
    write(path, &encode_gray_png(&min_max_normalize(field))?)
}
