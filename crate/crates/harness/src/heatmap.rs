//! 8-bit grayscale PGM (P5) rendering.

use std::fs;
use std::path::Path;

use seer_core::{Matrix, Real};

/// `round(255·(x − min)/(max − min))` per entry; a constant matrix is all 0.
pub fn heatmap_pixels<T: Real>(m: &Matrix<T>) -> Vec<u8> {
    let xs: Vec<f64> = m.as_slice().iter().map(|x| x.as_f64()).collect();
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    xs.iter()
        .map(|&x| {
            if span > 0.0 {
                (255.0 * (x - lo) / span).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn heatmap_bytes<T: Real>(m: &Matrix<T>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(heatmap_pixels(m));
    out
}

pub fn emit_heatmap<T: Real>(m: &Matrix<T>, path: &Path) -> std::io::Result<()> {
    fs::write(path, heatmap_bytes(m))
}
