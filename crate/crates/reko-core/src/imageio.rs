//! Minimal binary PGM/PPM writers for visual diagnostics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

fn quantize(v: f64, lo: f64, hi: f64) -> u8 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Maps each value through the affine range `[lo, hi] -> [0, 255]`, clamping
/// outliers.
pub fn to_u8_affine(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    values.iter().map(|&v| quantize(v, lo, hi)).collect()
}

/// Maps values to `[0, 255]` by their own min/max; a constant image maps to
/// mid-gray.
pub fn to_u8_minmax(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    to_u8_affine(values, lo, hi)
}

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "{magic}\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a grayscale P5 PGM from row-major bytes.
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::Shape {
            op: "write_pgm",
            detail: format!("{} bytes for {width}x{height}", gray.len()),
        });
    }
    write_pnm(path, "P5", width, height, gray)
}

/// Writes a color P6 PPM from planar CHW data in `[-1, 1]`.
pub fn write_ppm_chw(path: &Path, width: usize, height: usize, chw: &[f64]) -> Result<()> {
    if chw.len() != 3 * width * height {
        return Err(Error::Shape {
            op: "write_ppm",
            detail: format!("{} values for 3x{height}x{width}", chw.len()),
        });
    }
    let plane = width * height;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(chw[c * plane + p], -1.0, 1.0));
        }
    }
    write_pnm(path, "P6", width, height, &bytes)
}

/// Lays several equally sized CHW images in `[-1, 1]` side by side and
/// writes one PPM panel.
pub fn write_ppm_row(path: &Path, width: usize, height: usize, images: &[&[f64]]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArg("panel needs at least one image".into()));
    }
    let plane = width * height;
    for img in images {
        if img.len() != 3 * plane {
            return Err(Error::Shape {
                op: "write_ppm_row",
                detail: format!("{} values for 3x{height}x{width}", img.len()),
            });
        }
    }
    let total_w = width * images.len();
    let mut bytes = vec![0u8; 3 * total_w * height];
    for (slot, img) in images.iter().enumerate() {
        for y in 0..height {
            for x in 0..width {
                let dst = 3 * (y * total_w + slot * width + x);
                for c in 0..3 {
                    bytes[dst + c] = quantize(img[c * plane + y * width + x], -1.0, 1.0);
                }
            }
        }
    }
    write_pnm(path, "P6", total_w, height, &bytes)
}
