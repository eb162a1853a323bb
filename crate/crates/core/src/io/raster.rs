//! Binary inverse-depth raster files.
//!
//! Layout (little endian):
//!
//! ```text
//! 0   magic  "IDR1"
//! 4   width  u32
//! 8   height u32
//! 12  frame  u64
//! 20  units  [u8; 8]  "inv_m", NUL padded
//! 28  payload width·height f32, row-major, NaN = invalid
//! ```
//!
//! An optional text sidecar `<file>.meta` holds `key=value` lines with the
//! intrinsics the raster was predicted for and the producing network.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::image::Image;

pub const MAGIC: &[u8; 4] = b"IDR1";
pub const UNITS: &str = "inv_m";
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("bad magic, not an inverse-depth raster")]
    BadMagic,
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("non-positive or infinite inverse depth {value} at index {index}")]
    NonPositiveValue { index: usize, value: f32 },
    #[error("unsupported units tag `{0}`")]
    BadUnits(String),
    #[error("malformed sidecar line `{0}`")]
    BadSidecar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RasterMeta {
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub source: Option<String>,
    /// Keys not understood by this reader, kept verbatim.
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthRaster {
    pub frame_id: u64,
    /// Inverse depth in m⁻¹; NaN marks invalid pixels.
    pub data: Image,
    pub meta: Option<RasterMeta>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn validate(data: &[f32]) -> Result<(), RasterError> {
    for (index, &value) in data.iter().enumerate() {
        if !value.is_nan() && !(value > 0.0 && value.is_finite()) {
            return Err(RasterError::NonPositiveValue { index, value });
        }
    }
    Ok(())
}

pub fn encode(raster: &DepthRaster) -> Result<Vec<u8>, RasterError> {
    validate(raster.data.data())?;
    let (w, h) = (raster.data.width(), raster.data.height());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * w * h);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&raster.frame_id.to_le_bytes());
    let mut units = [0u8; 8];
    units[..UNITS.len()].copy_from_slice(UNITS.as_bytes());
    out.extend_from_slice(&units);
    for v in raster.data.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<DepthRaster, RasterError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(RasterError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(RasterError::SizeMismatch {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let w = u32_at(4) as usize;
    let h = u32_at(8) as usize;
    let frame_id = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let units: Vec<u8> = bytes[20..28].iter().copied().take_while(|&b| b != 0).collect();
    let units = String::from_utf8_lossy(&units).into_owned();
    if units != UNITS {
        return Err(RasterError::BadUnits(units));
    }
    let expected = HEADER_LEN + 4 * w * h;
    if bytes.len() != expected {
        return Err(RasterError::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    validate(&data)?;
    Ok(DepthRaster {
        frame_id,
        data: Image::new(w, h, data),
        meta: None,
    })
}

fn format_meta(meta: &RasterMeta) -> String {
    let mut out = String::new();
    for (k, v) in [("fx", meta.fx), ("fy", meta.fy), ("cx", meta.cx), ("cy", meta.cy)] {
        if let Some(v) = v {
            out.push_str(&format!("{k}={v}\n"));
        }
    }
    if let Some(s) = &meta.source {
        out.push_str(&format!("source={s}\n"));
    }
    for (k, v) in &meta.extra {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}

fn parse_meta(text: &str) -> Result<RasterMeta, RasterError> {
    let mut meta = RasterMeta::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| RasterError::BadSidecar(line.to_string()))?;
        let (k, v) = (k.trim(), v.trim());
        let num = || v.parse::<f64>().map_err(|_| RasterError::BadSidecar(line.to_string()));
        match k {
            "fx" => meta.fx = Some(num()?),
            "fy" => meta.fy = Some(num()?),
            "cx" => meta.cx = Some(num()?),
            "cy" => meta.cy = Some(num()?),
            "source" => meta.source = Some(v.to_string()),
            _ => {
                meta.extra.insert(k.to_string(), v.to_string());
            }
        }
    }
    Ok(meta)
}

/// Writes the raster and, when present, its sidecar.
pub fn write_depth_raster(path: &Path, raster: &DepthRaster) -> Result<(), RasterError> {
    let bytes = encode(raster)?;
    fs::write(path, bytes)?;
    if let Some(meta) = &raster.meta {
        fs::write(sidecar_path(path), format_meta(meta))?;
    }
    Ok(())
}

/// Reads a raster, picking up its sidecar if one exists.
pub fn read_depth_raster(path: &Path) -> Result<DepthRaster, RasterError> {
    let mut raster = decode(&fs::read(path)?)?;
    let side = sidecar_path(path);
    if side.exists() {
        raster.meta = Some(parse_meta(&fs::read_to_string(side)?)?);
    }
    Ok(raster)
}

/// Raster files (`.idr`) of a directory keyed by their integer stem.
pub fn numbered_rasters(dir: &Path) -> Result<BTreeMap<u64, PathBuf>, RasterError> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("idr") {
            continue;
        }
        if let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            out.insert(id, path);
        }
    }
    Ok(out)
}
