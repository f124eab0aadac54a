//! Grid exports: CSV (one row per frame) and binary 8-bit PGM heatmaps
//! with linear min-max scaling. Both use '.' decimals and LF endings.

use std::path::Path;

use crate::dsp::grid_to_csv;
use crate::error::{Error, Result};

/// P5 (binary) PGM, width = cols, height = rows, linearly min-max scaled
/// to 0..=255. A constant grid maps to all zeros.
pub fn pgm_bytes(values: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    debug_assert_eq!(values.len(), rows * cols);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let header = format!("P5\n{cols} {rows}\n255\n");
    let mut bytes = Vec::with_capacity(header.len() + values.len());
    bytes.extend_from_slice(header.as_bytes());
    for v in values {
        let px = if span > 0.0 {
            ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        bytes.push(px);
    }
    bytes
}

pub fn write_pgm(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    std::fs::write(path, pgm_bytes(values, rows, cols)).map_err(|e| Error::io(path, e))
}

pub fn write_csv_grid(path: &Path, values: &[f64], rows: usize, cols: usize) -> Result<()> {
    std::fs::write(path, grid_to_csv(values, rows, cols)).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses the dimensions out of a P5 header; test support.
pub fn pgm_dims(bytes: &[u8]) -> Option<(usize, usize)> {
    // header = three '\n'-terminated ASCII lines before the binary pixels
    let mut parts = bytes.splitn(4, |&b| b == b'\n');
    if parts.next()? != b"P5" {
        return None;
    }
    let dims = std::str::from_utf8(parts.next()?).ok()?;
    let mut dims = dims.split_whitespace();
    let cols = dims.next()?.parse().ok()?;
    let rows = dims.next()?.parse().ok()?;
    Some((rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_scales_to_full_range() {
        let bytes = pgm_bytes(&[0.0, 0.5, 1.0, 0.25], 2, 2);
        assert_eq!(pgm_dims(&bytes), Some((2, 2)));
        let px = &bytes[bytes.len() - 4..];
        assert_eq!(px[0], 0);
        assert_eq!(px[2], 255);
        assert_eq!(px[1], 128);
    }

    #[test]
    fn constant_grid_is_all_zero() {
        let bytes = pgm_bytes(&[3.0; 6], 2, 3);
        assert!(bytes[bytes.len() - 6..].iter().all(|&b| b == 0));
    }
}
