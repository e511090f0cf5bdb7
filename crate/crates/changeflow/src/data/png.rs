//! PNG readers and writers for the crate's on-disk image conventions:
//! RGB images as 8-bit three-channel files, binary masks as 8-bit grayscale
//! with {0, 255} values. In memory images are channel-first [3, H, W] f64
//! arrays in [0, 1] and masks are boolean [H, W] arrays.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a [3, H, W] image in [0, 1] as an 8-bit RGB PNG.
pub fn write_rgb(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::validation(format!(
            "rgb png needs 3 channels, got {c}"
        )));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_byte(img[[0, y, x]]),
                    to_byte(img[[1, y, x]]),
                    to_byte(img[[2, y, x]]),
                ]),
            );
        }
    }
    out.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Reads an RGB PNG to a [3, H, W] array in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, 0, format!("png decode failed: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Writes a boolean mask as an 8-bit grayscale PNG with values {0, 255}.
pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(
                x as u32,
                y as u32,
                image::Luma([if mask[(y, x)] { 255 } else { 0 }]),
            );
        }
    }
    out.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Reads a grayscale PNG as a boolean mask; any value above 127 is true.
pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, 0, format!("png decode failed: {e}")))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] > 127
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("changeflow-png-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn rgb_round_trip_is_exact_on_byte_grid() {
        let img = Array3::from_shape_fn((3, 4, 6), |(c, y, x)| {
            ((c * 83 + y * 17 + x * 29) % 256) as f64 / 255.0
        });
        let path = tmp("rgb.png");
        write_rgb(&path, &img).unwrap();
        let back = read_rgb(&path).unwrap();
        assert_eq!(back.dim(), (3, 4, 6));
        for (a, b) in back.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rgb_quantizes_to_nearest_byte() {
        let img = Array3::from_elem((3, 2, 2), 0.5);
        let path = tmp("gray.png");
        write_rgb(&path, &img).unwrap();
        let back = read_rgb(&path).unwrap();
        assert!((back[[0, 0, 0]] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn mask_round_trip_is_identical() {
        let mask = Array2::from_shape_fn((5, 3), |(y, x)| (y + x) % 2 == 0);
        let path = tmp("mask.png");
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let img = Array3::zeros((2, 4, 4));
        assert!(write_rgb(&tmp("bad.png"), &img).is_err());
    }
}
