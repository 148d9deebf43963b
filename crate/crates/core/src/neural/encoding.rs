//! Annealed Fourier-feature encoding of normalized pixel coordinates.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub octaves: usize,
    pub base: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { octaves: 12, base: 2.0 }
    }
}

impl EncoderConfig {
    /// Two raw coordinates plus sin/cos of x and y per octave.
    pub fn dim(&self) -> usize {
        2 + 4 * self.octaves
    }

    pub fn max_beta(&self) -> f64 {
        self.octaves as f64
    }

    /// Encodes one coordinate pair into `out` (length [`dim`](Self::dim)).
    pub fn encode_into(&self, x: f64, y: f64, beta: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        out[0] = x;
        out[1] = y;
        for k in 0..self.octaves {
            let w = anneal_weight(beta, k);
            let f = self.base.powi(k as i32) * PI;
            let o = 2 + 4 * k;
            out[o] = w * (f * x).sin();
            out[o + 1] = w * (f * x).cos();
            out[o + 2] = w * (f * y).sin();
            out[o + 3] = w * (f * y).cos();
        }
    }

    pub fn encode(&self, x: f64, y: f64, beta: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.encode_into(x, y, beta, &mut v);
        v
    }

    /// Row-major `(H*W) x dim` feature matrix for an `h x w` grid.
    pub fn encode_grid(&self, h: usize, w: usize, beta: f64) -> Array2<f64> {
        let mut out = Array2::zeros((h * w, self.dim()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (x, y) = pixel_coords(i / w, i % w, h, w);
            self.encode_into(x, y, beta, row.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// Band weight `(1 - cos(pi * clip(beta - k, 0, 1))) / 2`.
pub fn anneal_weight(beta: f64, k: usize) -> f64 {
    let t = (beta - k as f64).clamp(0.0, 1.0);
    0.5 * (1.0 - (PI * t).cos())
}

/// Pixel-center coordinates in `(-1, 1)`: x follows columns, y follows rows.
/// Centers of a 2x-coarser grid land on the midpoints of the fine 2x2 blocks.
pub fn pixel_coords(row: usize, col: usize, h: usize, w: usize) -> (f64, f64) {
    let x = -1.0 + (2 * col + 1) as f64 / w as f64;
    let y = -1.0 + (2 * row + 1) as f64 / h as f64;
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dimension_is_fifty() {
        assert_eq!(EncoderConfig::default().dim(), 50);
    }

    #[test]
    fn beta_zero_keeps_only_raw_coordinates() {
        let e = EncoderConfig::default();
        let v = e.encode(0.3, -0.7, 0.0);
        assert_eq!(&v[..2], &[0.3, -0.7]);
        assert!(v[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn full_beta_is_plain_fourier_features() {
        let e = EncoderConfig::default();
        let (x, y) = (0.21, -0.43);
        let v = e.encode(x, y, 12.0);
        for k in 0..12 {
            let f = 2f64.powi(k as i32) * PI;
            assert!((v[2 + 4 * k] - (f * x).sin()).abs() < 1e-15);
            assert!((v[5 + 4 * k] - (f * y).cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn anneal_weight_half_and_monotone() {
        assert!((anneal_weight(3.5, 3) - 0.5).abs() < 1e-15);
        for k in 0..12 {
            let mut prev = 0.0;
            for i in 0..=240 {
                let w = anneal_weight(i as f64 * 0.05, k);
                assert!(w >= prev);
                prev = w;
            }
        }
    }

    #[test]
    fn annealing_only_touches_bands_in_between() {
        let e = EncoderConfig::default();
        let (a, b) = (e.encode(0.4, 0.1, 2.3), e.encode(0.4, 0.1, 4.6));
        for k in 0..12 {
            let changed = (0..4).any(|j| a[2 + 4 * k + j] != b[2 + 4 * k + j]);
            let in_window = (k as f64) > 2.3 - 1.0 && (k as f64) <= 4.6;
            if changed {
                assert!(in_window, "band {k}");
            }
        }
    }

    #[test]
    fn coarse_centers_align_with_fine_blocks() {
        let (xc, yc) = pixel_coords(3, 5, 32, 32);
        let (x0, y0) = pixel_coords(6, 10, 64, 64);
        let (x1, y1) = pixel_coords(7, 11, 64, 64);
        assert!((xc - 0.5 * (x0 + x1)).abs() < 1e-15);
        assert!((yc - 0.5 * (y0 + y1)).abs() < 1e-15);
    }
}
