use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use image::{GrayImage, RgbImage};
use panomesh::formats::{DepthMap, MeshFeatureFile};
use panomesh::tensor::Tensor;
use panomesh::Error;

const PNG_MAGIC: &[u8; 4] = b"\x89PNG";

/// What a file on disk holds, judged by its magic bytes.
pub enum Loaded {
    /// `[H, W, C]` image; PNG channels are scaled to `[0, 1]`.
    Image(Tensor),
    /// Per-face values of one mesh level.
    Faces(MeshFeatureFile),
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match bytes.get(..4) {
        Some(b"SFDM") => {
            let map = DepthMap::from_bytes(&bytes)?;
            Ok(Loaded::Image(map.to_tensor().reshape([map.height, map.width, 1])?))
        }
        Some(b"SFMF") => Ok(Loaded::Faces(MeshFeatureFile::from_bytes(&bytes)?)),
        Some(m) if m == PNG_MAGIC => {
            let (w, h, px) = decode_png(&bytes, path)?;
            let data = px.iter().flat_map(|p| p.map(|c| f64::from(c) / 255.0)).collect();
            Ok(Loaded::Image(Tensor::new([h, w, 3], data)?))
        }
        _ => Err(Error::Format(format!("{}: unrecognised file type", path.display())).into()),
    }
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.pixels().map(|p| p.0).collect()))
}

pub fn load_png_rgb(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_png(&bytes, path)
}

pub fn load_depth(path: &Path) -> Result<DepthMap> {
    DepthMap::read(path).with_context(|| format!("loading {}", path.display()))
}

fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png_rgb(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    let raw = rgb.iter().flatten().copied().collect();
    let img = RgbImage::from_raw(width as u32, height as u32, raw).expect("buffer size");
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
}

/// Writes `[H, W, C]` as PNG (C = 1 or 3, values in `[0, 1]`) or, for any
/// other extension, as SFDM (C = 1).
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let &[h, w, c] = t.shape() else {
        return Err(Error::Shape(format!("expected [H, W, C], got {:?}", t.shape())).into());
    };
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        if c != 1 {
            return Err(Error::Shape(format!("SFDM holds one channel, got {c}")).into());
        }
        return DepthMap::from_tensor(t)?
            .write(path)
            .with_context(|| format!("writing {}", path.display()));
    }
    let bytes: Vec<u8> = t.data().iter().map(|&x| to_byte(x)).collect();
    let result = match c {
        1 => GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer size")
            .save_with_format(path, image::ImageFormat::Png),
        3 => RgbImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer size")
            .save_with_format(path, image::ImageFormat::Png),
        _ => return Err(Error::Shape(format!("PNG needs 1 or 3 channels, got {c}")).into()),
    };
    result.with_context(|| format!("writing {}", path.display()))
}
