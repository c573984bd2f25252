//! PNG adapters: sparse disparity as 16-bit grayscale (value/256 px, stored
//! 0 marks an invalid pixel) and 8-bit RGB for images and visualizations.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::data(format!("{}: {}", path.display(), e)))
}

/// Read a sparse disparity map. Returns `([H, W]` disparity in pixels,
/// `[H, W]` 0/1 validity). Only 16-bit grayscale input is accepted.
pub fn read_disp_png16<T: Scalar>(path: &Path) -> Result<(Tensor<T>, Tensor<T>)> {
    let img = match open(path)? {
        DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(Error::data(format!(
                "{}: disparity PNG must be 16-bit grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut d = vec![T::zero(); h * w];
    let mut valid = vec![T::zero(); h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let raw = px.0[0];
        if raw != 0 {
            d[y as usize * w + x as usize] = cast::<T>(raw as f64 / 256.0);
            valid[y as usize * w + x as usize] = T::one();
        }
    }
    Ok((
        Tensor::from_vec(&[h, w], d)?,
        Tensor::from_vec(&[h, w], valid)?,
    ))
}

/// Write a sparse disparity map as 16-bit grayscale, quantized to 1/256 px.
/// Invalid pixels store 0; a valid pixel never stores 0 (it is floored to
/// the smallest representable disparity instead).
pub fn write_disp_png16<T: Scalar>(path: &Path, d: &Tensor<T>, valid: &Tensor<T>) -> Result<()> {
    let [h, w] = d.dims::<2>()?;
    if valid.shape() != d.shape() {
        return Err(Error::shape(format!(
            "disparity {:?} and mask {:?} disagree",
            d.shape(),
            valid.shape()
        )));
    }
    let mut img = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let i = y as usize * w + x as usize;
        *px = if valid.data()[i] == T::zero() {
            Luma([0])
        } else {
            let q = (d.data()[i].to_f64() * 256.0).round().clamp(1.0, 65535.0);
            Luma([q as u16])
        };
    }
    img.save(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))
}

/// Read any PNG/JPEG as `[3, H, W]` RGB scaled to [0, 1].
pub fn read_image_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = cast::<T>(px.0[c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Write a `[3, H, W]` tensor in [0, 1] as 8-bit RGB.
pub fn write_rgb_png8<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let [c, h, w] = t.dims::<3>()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {}", c)));
    }
    let mut img = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = t.data()[(ch * h + y as usize) * w + x as usize].to_f64();
            px.0[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))
}

/// Write a 0/1 mask as 8-bit grayscale (255 = valid).
pub fn write_mask_png8<T: Scalar>(path: &Path, mask: &Tensor<T>) -> Result<()> {
    let [h, w] = mask.dims::<2>()?;
    let mut img = GrayImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = mask.data()[y as usize * w + x as usize];
        px.0[0] = if v == T::zero() { 0 } else { 255 };
    }
    img.save(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))
}

/// Read a mask written by [`write_mask_png8`]; any nonzero pixel is valid.
pub fn read_mask_png8<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); h * w];
    for (x, y, px) in img.enumerate_pixels() {
        if px.0[0] != 0 {
            data[y as usize * w + x as usize] = T::one();
        }
    }
    Tensor::from_vec(&[h, w], data)
}

/// Write a disparity map as an 8-bit grayscale visualization, white at
/// `dmax` and black at zero.
pub fn write_viz_png8<T: Scalar>(path: &Path, d: &Tensor<T>, dmax: usize) -> Result<()> {
    let [h, w] = d.dims::<2>()?;
    let mut img = GrayImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = d.data()[y as usize * w + x as usize].to_f64() / dmax as f64;
        px.0[0] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    img.save(path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))
}
