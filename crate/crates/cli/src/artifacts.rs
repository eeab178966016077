//! Image loading and artifact encoding.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use ndarray::Array2;
use openlens_core::{Image, Mask};

use crate::error::{CliError, Result};

/// Magic prefix of the raw heatmap format.
pub const HEATMAP_MAGIC: &[u8; 4] = b"OLHM";

/// Reads a PNG (or any format the `image` crate decodes) as `channels`-channel floats.
pub fn load_image(path: &Path, channels: usize) -> Result<Image> {
    let decoded = image::open(path).map_err(|source| CliError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let bytes = match channels {
        1 => decoded.to_luma8().into_raw(),
        3 => decoded.to_rgb8().into_raw(),
        c => {
            return Err(CliError::Config(format!(
                "adapters expecting {c} channels cannot read image files"
            )))
        }
    };
    Ok(Image::from_u8(h, w, channels, &bytes)?)
}

/// `OLHM`, u32 LE height, u32 LE width, then row-major f64 LE values.
pub fn encode_heatmap(heatmap: &Mask) -> Vec<u8> {
    let (h, w) = heatmap.shape();
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(HEATMAP_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in heatmap.values().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_heatmap(bytes: &[u8]) -> Result<Mask> {
    let bad = |msg: &str| CliError::Config(format!("malformed heatmap: {msg}"));
    if bytes.len() < 12 || &bytes[..4] != HEATMAP_MAGIC {
        return Err(bad("missing OLHM header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 8 * h * w {
        return Err(bad("payload length does not match header"));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let array = Array2::from_shape_vec((h, w), values).map_err(|e| bad(&e.to_string()))?;
    Mask::new(array).map_err(|e| bad(&e.to_string()))
}

pub fn read_heatmap(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_heatmap(&bytes)
}

/// Piecewise-linear blue → cyan → yellow → red map on `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let channel = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [channel(3.0), channel(2.0), channel(1.0)]
}

/// Min-max normalizes `heatmap`, colors it and alpha-blends it at 0.5 over
/// `image`; returns PNG bytes.
pub fn render_overlay(image: &Image, heatmap: &Mask) -> Result<Vec<u8>> {
    let (h, w, c) = image.shape();
    if heatmap.shape() != (h, w) {
        return Err(openlens_core::Error::ShapeMismatch {
            expected: format!("{:?}", (h, w)),
            actual: format!("{:?}", heatmap.shape()),
        }
        .into());
    }
    let values = heatmap.values();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels = image.pixels();
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (y, x) = (y as usize, x as usize);
        let v = if span > 0.0 { (values[[y, x]] - lo) / span } else { 0.0 };
        let color = colormap(v);
        for (k, slot) in px.0.iter_mut().enumerate() {
            let base = pixels[[y, x, if c == 1 { 0 } else { k.min(c - 1) }]];
            *slot = ((0.5 * base + 0.5 * color[k]) * 255.0).round() as u8;
        }
    }
    let mut buf = Cursor::new(Vec::new());
    out.write_to(&mut buf, ImageFormat::Png)
        .map_err(|source| CliError::Image {
            path: PathBuf::from("heatmap.png"),
            source,
        })?;
    Ok(buf.into_inner())
}

/// Writes `files` into `dir` via a `.partial` sibling and a final rename, so a
/// crash never leaves a half-written sample directory behind.
pub fn write_sample_dir(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    let mut partial = dir.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(|e| CliError::io(&partial, e))?;
    }
    fs::create_dir_all(&partial).map_err(|e| CliError::io(&partial, e))?;
    for (name, bytes) in files {
        let path = partial.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::rename(&partial, dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
