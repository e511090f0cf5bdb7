//! Binary container for externally computed feature maps, plus a reader
//! that assembles per-sample pyramids from a directory of such files.
//! Layout: 4-byte magic, width/height/channels as little-endian i32, then
//! f32 values channel-major (all of channel 0 row by row, then channel 1).

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};

use super::FeaturePyramid;

const MAGIC: &[u8; 4] = b"PIEC";
const MAX_SIDE: i32 = 1 << 20;

pub fn write_feature(path: &Path, feature: &Array3<f64>) -> Result<()> {
    let (c, h, w) = feature.dim();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(16 + c * h * w * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    buf.extend_from_slice(&(c as i32).to_le_bytes());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                buf.extend_from_slice(&(feature[[ch, y, x]] as f32).to_le_bytes());
            }
        }
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature(path: &Path) -> Result<Array3<f64>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("header needs 16 bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(
            path,
            0,
            format!("bad magic {:?}, expected {MAGIC:?}", &bytes[0..4]),
        ));
    }
    let read_i32 = |off: usize| i32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let (w, h, c) = (read_i32(4), read_i32(8), read_i32(12));
    for (off, dim, label) in [(4u64, w, "width"), (8, h, "height"), (12, c, "channels")] {
        if dim <= 0 || dim > MAX_SIDE {
            return Err(Error::format(path, off, format!("implausible {label} {dim}")));
        }
    }
    let (w, h, c) = (w as usize, h as usize, c as usize);
    let expected = 16 + c * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!(
                "expected {expected} bytes for {c}x{h}x{w} values, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut out = Array3::zeros((c, h, w));
    let mut off = 16;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                out[[ch, y, x]] = v as f64;
                off += 4;
            }
        }
    }
    Ok(out)
}

/// Relative location of one feature file within an import tree.
pub fn feature_file_name(index: usize, t: usize, scale: usize) -> PathBuf {
    PathBuf::from(format!("{index:06}")).join(format!("t{t:04}_s{scale}.feat"))
}

/// Pyramid source backed by files on disk instead of a network. Sample
/// `index` expects one file per (timestep, scale) pair under
/// `root/{index:06}/t{t:04}_s{scale}.feat`.
pub struct FeatureImportDir {
    root: PathBuf,
    num_scales: usize,
}

impl FeatureImportDir {
    pub fn new(root: impl Into<PathBuf>, num_scales: usize) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::validation(format!(
                "feature import root {} is not a directory",
                root.display()
            )));
        }
        if num_scales == 0 {
            return Err(Error::validation("need at least one scale"));
        }
        Ok(FeatureImportDir { root, num_scales })
    }

    pub fn write(&self, index: usize, t: usize, scale: usize, f: &Array3<f64>) -> Result<()> {
        let path = self.root.join(feature_file_name(index, t, scale));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_feature(&path, f)
    }

    pub fn pyramid(&self, index: usize, timesteps: &[usize]) -> Result<FeaturePyramid> {
        let mut maps = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            let mut scales = Vec::with_capacity(self.num_scales);
            for s in 0..self.num_scales {
                let path = self.root.join(feature_file_name(index, t, s));
                scales.push(read_feature(&path)?);
            }
            maps.push(scales);
        }
        FeaturePyramid::new(timesteps.to_vec(), maps)
    }
}
