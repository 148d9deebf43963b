//! Planned 2D FFTs and the zero-padded linear convolution used by the forward operators.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// A pair of planned row/column transforms for a fixed `rows x cols` buffer.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.row_fwd, &self.col_fwd);
    }

    /// Inverse transform including the `1/(rows*cols)` normalization.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.row_inv, &self.col_inv);
        let scale = 1.0 / self.len() as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }

    fn transform(&self, buf: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        debug_assert_eq!(buf.len(), self.len());
        // rustfft processes every contiguous chunk of the fft length.
        row.process(buf);
        let mut t = vec![Complex64::default(); buf.len()];
        transpose(buf, &mut t, self.rows, self.cols);
        col.process(&mut t);
        transpose(&t, buf, self.cols, self.rows);
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Frequency-domain transform of a centered kernel, ready for repeated convolution.
#[derive(Debug, Clone)]
pub struct KernelSpectrum {
    pub(crate) spectrum: Vec<Complex64>,
    /// Field shape this spectrum convolves against.
    pub(crate) field_shape: (usize, usize),
    pub(crate) periodic: bool,
}

impl KernelSpectrum {
    /// Linear (windowed) convolution spectrum. `kernel` must be `(2H-1) x (2W-1)`
    /// with zero displacement at index `(H-1, W-1)`.
    pub fn windowed(kernel: &Array2<f64>, field_shape: (usize, usize), fft: &Fft2) -> Result<Self> {
        let (h, w) = field_shape;
        check_kernel_shape(kernel, h, w)?;
        let (ph, pw) = fft.shape();
        if ph < 2 * h - 1 || pw < 2 * w - 1 {
            return Err(Error::Config(format!(
                "fft size {ph}x{pw} too small for {h}x{w} linear convolution"
            )));
        }
        let mut buf = vec![Complex64::default(); ph * pw];
        for ((i, j), &v) in kernel.indexed_iter() {
            let dr = i as isize - (h as isize - 1);
            let dc = j as isize - (w as isize - 1);
            let r = dr.rem_euclid(ph as isize) as usize;
            let c = dc.rem_euclid(pw as isize) as usize;
            buf[r * pw + c] += Complex64::new(v, 0.0);
        }
        fft.forward(&mut buf);
        Ok(Self {
            spectrum: buf,
            field_shape,
            periodic: false,
        })
    }

    /// Circular convolution on the field's own torus; every displacement of the
    /// full kernel is folded modulo the grid size.
    pub fn periodic(kernel: &Array2<f64>, field_shape: (usize, usize), fft: &Fft2) -> Result<Self> {
        let (h, w) = field_shape;
        check_kernel_shape(kernel, h, w)?;
        if fft.shape() != (h, w) {
            return Err(Error::Config("periodic spectrum needs an fft of the field size".into()));
        }
        let mut buf = vec![Complex64::default(); h * w];
        for ((i, j), &v) in kernel.indexed_iter() {
            let dr = i as isize - (h as isize - 1);
            let dc = j as isize - (w as isize - 1);
            let r = dr.rem_euclid(h as isize) as usize;
            let c = dc.rem_euclid(w as isize) as usize;
            buf[r * w + c] += Complex64::new(v, 0.0);
        }
        fft.forward(&mut buf);
        Ok(Self {
            spectrum: buf,
            field_shape,
            periodic: true,
        })
    }

    /// `out(r) = sum_s k(r - s) field(s)`.
    pub fn convolve(&self, field: &Array2<f64>, fft: &Fft2) -> Result<Array2<f64>> {
        self.apply(field, fft, false)
    }

    /// Adjoint of [`convolve`](Self::convolve): `out(s) = sum_r k(r - s) field(r)`.
    pub fn correlate(&self, field: &Array2<f64>, fft: &Fft2) -> Result<Array2<f64>> {
        self.apply(field, fft, true)
    }

    fn apply(&self, field: &Array2<f64>, fft: &Fft2, adjoint: bool) -> Result<Array2<f64>> {
        let (h, w) = self.field_shape;
        if field.dim() != (h, w) {
            return Err(Error::Shape {
                expected: vec![h, w],
                got: field.shape().to_vec(),
            });
        }
        let (ph, pw) = fft.shape();
        debug_assert_eq!(ph * pw, self.spectrum.len());
        let mut buf = vec![Complex64::default(); ph * pw];
        for ((r, c), &v) in field.indexed_iter() {
            buf[r * pw + c] = Complex64::new(v, 0.0);
        }
        fft.forward(&mut buf);
        if adjoint {
            for (b, k) in buf.iter_mut().zip(&self.spectrum) {
                *b *= k.conj();
            }
        } else {
            for (b, k) in buf.iter_mut().zip(&self.spectrum) {
                *b *= k;
            }
        }
        fft.inverse(&mut buf);
        Ok(Array2::from_shape_fn((h, w), |(r, c)| buf[r * pw + c].re))
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }
}

fn check_kernel_shape(kernel: &Array2<f64>, h: usize, w: usize) -> Result<()> {
    if kernel.dim() != (2 * h - 1, 2 * w - 1) {
        return Err(Error::Shape {
            expected: vec![2 * h - 1, 2 * w - 1],
            got: kernel.shape().to_vec(),
        });
    }
    Ok(())
}

/// Padded FFT size used for a `h x w` linear convolution.
pub fn padded_size(h: usize, w: usize) -> (usize, usize) {
    (2 * h, 2 * w)
}

/// One-off linear convolution of `field` with a centered `(2H-1) x (2W-1)` kernel.
pub fn convolve2d(kernel: &Array2<f64>, field: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = field.dim();
    let (ph, pw) = padded_size(h, w);
    let fft = Fft2::new(ph, pw);
    KernelSpectrum::windowed(kernel, (h, w), &fft)?.convolve(field, &fft)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct(kernel: &Array2<f64>, field: &Array2<f64>) -> Array2<f64> {
        let (h, w) = field.dim();
        let mut out = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for sr in 0..h {
                    for sc in 0..w {
                        let ki = (r as isize - sr as isize + h as isize - 1) as usize;
                        let kj = (c as isize - sc as isize + w as isize - 1) as usize;
                        acc += kernel[[ki, kj]] * field[[sr, sc]];
                    }
                }
                out[[r, c]] = acc;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn impulse_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = random(&mut rng, (7, 5));
        let mut k = Array2::zeros((13, 9));
        k[[6, 4]] = 1.0;
        let out = convolve2d(&k, &field).unwrap();
        for (a, b) in out.iter().zip(field.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn fft_matches_direct_loop_16x16() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let field = random(&mut rng, (16, 16));
        let kernel = random(&mut rng, (31, 31));
        let fast = convolve2d(&kernel, &field).unwrap();
        let slow = direct(&kernel, &field);
        let num: f64 = fast.iter().zip(slow.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = slow.iter().map(|b| b * b).sum();
        assert!((num / den).sqrt() < 1e-10);
    }

    #[test]
    fn correlate_is_adjoint_of_convolve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (9, 6);
        let kernel = random(&mut rng, (2 * h - 1, 2 * w - 1));
        let fft = Fft2::new(2 * h, 2 * w);
        let spec = KernelSpectrum::windowed(&kernel, (h, w), &fft).unwrap();
        let x = random(&mut rng, (h, w));
        let y = random(&mut rng, (h, w));
        let ax = spec.convolve(&x, &fft).unwrap();
        let aty = spec.correlate(&y, &fft).unwrap();
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(aty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let k = Array2::zeros((5, 5));
        let field = Array2::zeros((4, 3));
        assert!(matches!(convolve2d(&k, &field), Err(Error::Shape { .. })));
    }

    #[test]
    fn periodic_uniform_field_gives_kernel_sum() {
        let (h, w) = (6, 6);
        let kernel = Array2::from_shape_fn((11, 11), |(i, j)| 1.0 / (1.0 + (i + j) as f64));
        let fft = Fft2::new(h, w);
        let spec = KernelSpectrum::periodic(&kernel, (h, w), &fft).unwrap();
        let out = spec.convolve(&Array2::ones((h, w)), &fft).unwrap();
        let total: f64 = kernel.sum();
        for v in out.iter() {
            assert!((v - total).abs() < 1e-12 * total);
        }
    }
}
