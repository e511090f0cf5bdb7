//! Middlebury-layout binary flow files: the four ASCII bytes "PIEH", then
//! width and height as little-endian i32, then row-major interleaved (u, v)
//! pairs as little-endian f32.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PIEH";
const MAX_SIDE: i32 = 1 << 20;

/// Writes `(u, v)` planes to `path`, casting to f32.
pub fn write_flo(path: &Path, u: &Array2<f64>, v: &Array2<f64>) -> Result<()> {
    assert_eq!(u.dim(), v.dim(), "flow planes must share a shape");
    let (h, w) = u.dim();
    let mut buf = Vec::with_capacity(12 + 8 * h * w);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(w as i32).to_le_bytes());
    buf.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            buf.extend_from_slice(&(u[(y, x)] as f32).to_le_bytes());
            buf.extend_from_slice(&(v[(y, x)] as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads `(u, v)` planes from `path`. Values come back as the stored f32s
/// widened to f64.
pub fn read_flo(path: &Path) -> Result<(Array2<f64>, Array2<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(
            path,
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                &bytes.get(..4).unwrap_or(&bytes[..]),
                MAGIC
            ),
        ));
    }
    if bytes.len() < 12 {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("header truncated: expected 12 bytes, found {}", bytes.len()),
        ));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || w > MAX_SIDE {
        return Err(Error::format(path, 4, format!("bad width {w}")));
    }
    if h <= 0 || h > MAX_SIDE {
        return Err(Error::format(path, 8, format!("bad height {h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * h * w;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes for {w}x{h}, found {}", bytes.len()),
        ));
    }
    let mut u = Array2::zeros((h, w));
    let mut v = Array2::zeros((h, w));
    let mut off = 12;
    for y in 0..h {
        for x in 0..w {
            u[(y, x)] = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            v[(y, x)] = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as f64;
            off += 8;
        }
    }
    Ok((u, v))
}
