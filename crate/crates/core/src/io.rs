//! PNG and JSON persistence helpers plus ndarray/tensor conversions.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::{Array2, ArrayView2};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::{Error, Mask, Result};

/// Reads an 8- or 16-bit grayscale PNG (colour images are converted to luma)
/// into an H×W grid scaled to [0,1].
pub fn read_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f64> = match img {
        image::DynamicImage::ImageLuma16(buf) => {
            buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        image::DynamicImage::ImageLuma8(buf) => {
            buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
        }
        other => other
            .into_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
    };
    Ok(Array2::from_shape_vec((h, w), pixels).expect("decoded buffer matches dimensions"))
}

/// Writes a [0,1] grid as a 16-bit grayscale PNG.
pub fn write_gray16(path: &Path, grid: ArrayView2<'_, f64>) -> Result<()> {
    let (h, w) = grid.dim();
    let raw: Vec<u16> = grid
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer length");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Writes a [0,1] grid as an 8-bit grayscale PNG.
pub fn write_gray8(path: &Path, grid: ArrayView2<'_, f64>) -> Result<()> {
    let (h, w) = grid.dim();
    let raw: Vec<u8> = grid
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer length");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Writes a binary mask as an 8-bit PNG with values 0 and 255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer length");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Reads a mask PNG; any pixel at or above half scale is foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(read_gray(path)?.mapv(|v| u8::from(v >= 0.5)))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Serialises `value` to pretty JSON and moves it into place with a rename so
/// readers never observe a partial file.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the concatenated contents of `files`, in order.
pub fn hash_files<P: AsRef<Path>>(files: &[P]) -> Result<String> {
    let mut hasher = Sha256::new();
    for f in files {
        let path = f.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Copies a grid into a float tensor of shape `[H, W]`.
pub fn grid_to_tensor(grid: ArrayView2<'_, f64>, kind: Kind) -> Tensor {
    let (h, w) = grid.dim();
    let data: Vec<f64> = grid.iter().copied().collect();
    Tensor::from_slice(&data)
        .view([h as i64, w as i64])
        .to_kind(kind)
}

pub fn mask_to_tensor(mask: &Mask, kind: Kind) -> Tensor {
    let (h, w) = mask.dim();
    let data: Vec<f32> = mask.iter().map(|&v| v as f32).collect();
    Tensor::from_slice(&data)
        .view([h as i64, w as i64])
        .to_kind(kind)
}

/// Copies a 2-D tensor (any float kind) back into an `f64` grid.
pub fn tensor_to_grid(t: &Tensor) -> Array2<f64> {
    let size = t.size();
    assert_eq!(size.len(), 2, "expected a 2-D tensor, got {size:?}");
    let t = t.to_kind(Kind::Double).contiguous();
    let data: Vec<f64> = Vec::<f64>::try_from(t.view([-1])).expect("double tensor");
    Array2::from_shape_vec((size[0] as usize, size[1] as usize), data).expect("shape")
}

/// Thresholds a 2-D probability tensor at 0.5 (inclusive) into a mask.
pub fn tensor_to_mask(t: &Tensor) -> Mask {
    tensor_to_grid(t).mapv(|v| u8::from(v >= 0.5))
}
