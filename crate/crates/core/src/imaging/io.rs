//! PNG / PGM / PPM for 2-D images, raw little-endian `f32` plus a JSON
//! sidecar for volumes.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Sidecar describing a `.raw` file: `{"dims":[x,y,z],"channels":1,"dtype":"f32le"}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub dims: Vec<usize>,
    pub channels: usize,
    pub dtype: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn is_raw(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("raw"))
}

pub fn load_image(path: &Path) -> Result<Image> {
    if is_raw(path) {
        return load_raw(path);
    }
    let dynamic = image::open(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match dynamic {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => {
            (1, b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        DynamicImage::ImageLumaA8(_) => {
            let b = dynamic.to_luma8();
            (1, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
        }
        DynamicImage::ImageLumaA16(_) => {
            let b = dynamic.to_luma16();
            (1, b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        DynamicImage::ImageRgba8(_) => {
            let b = dynamic.to_rgb8();
            (3, b.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
        }
        DynamicImage::ImageRgb16(b) => {
            (3, b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        other => {
            let b = other.to_rgb16();
            (3, b.into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
    };
    Image::new(vec![w, h], channels, data)
}

/// Writes 16-bit PNG/PGM/PPM (values clamped to `[0, 1]`) or raw `f32` with
/// its sidecar, chosen by extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    if is_raw(path) {
        return save_raw(img, path);
    }
    if img.ndim() != 2 {
        return Err(Error::format(path, "volumes can only be written as .raw"));
    }
    let (w, h) = (img.width() as u32, img.height() as u32);
    let q: Vec<u16> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let dynamic = match img.channels() {
        1 => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, q).expect("buffer size"),
        ),
        3 => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, q).expect("buffer size"),
        ),
        c => {
            return Err(Error::format(
                path,
                format!("{c}-channel images can only be written as .raw"),
            ))
        }
    };
    dynamic.save(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })
}

fn load_raw(path: &Path) -> Result<Image> {
    let side_path = sidecar_path(path);
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: RawSidecar = serde_json::from_str(&text)?;
    if side.dtype != "f32le" {
        return Err(Error::format(&side_path, format!("unsupported dtype {}", side.dtype)));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = side.dims.iter().product::<usize>() * side.channels;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::format(
            path,
            format!(
                "sidecar describes {expected} samples, file holds {} bytes",
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Image::new(side.dims, side.channels, data)
}

fn save_raw(img: &Image, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.data().len() * 4);
    for &v in img.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = RawSidecar {
        dims: img.dims().to_vec(),
        channels: img.channels(),
        dtype: "f32le".into(),
    };
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, serde_json::to_string(&side)?).map_err(|e| Error::io(&side_path, e))
}
