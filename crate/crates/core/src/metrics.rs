//! Reconstruction scores: GMSD, peak matching F1, sliced Wasserstein, density
//! MSE, masked SSIM and noise-map MSE.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::mean_normalize;
use crate::ScalarField;

pub const GMSD_C: f64 = 0.0026;
pub const PEAK_THRESHOLD: f64 = 0.05;
pub const MATCH_RADIUS: f64 = 2.0;
pub const SWD_PROJECTIONS: usize = 128;
pub const SWD_SEED: u64 = 0;
pub const SSIM_WINDOW: usize = 7;

fn same_shape(a: &ScalarField, b: &ScalarField) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            expected: b.shape().to_vec(),
            got: a.shape().to_vec(),
        });
    }
    Ok(())
}

fn at_clamped(f: &ScalarField, i: isize, j: isize) -> f64 {
    let (h, w) = f.dim();
    f[(i.clamp(0, h as isize - 1) as usize, j.clamp(0, w as isize - 1) as usize)]
}

/// Prewitt gradient magnitude with replicate padding.
pub fn prewitt_magnitude(f: &ScalarField) -> ScalarField {
    Array2::from_shape_fn(f.dim(), |(i, j)| {
        let (i, j) = (i as isize, j as isize);
        let mut gx = 0.0;
        let mut gy = 0.0;
        for d in -1..=1 {
            gx += at_clamped(f, i + d, j + 1) - at_clamped(f, i + d, j - 1);
            gy += at_clamped(f, i + 1, j + d) - at_clamped(f, i - 1, j + d);
        }
        ((gx / 3.0).powi(2) + (gy / 3.0).powi(2)).sqrt()
    })
}

/// Population standard deviation of the gradient-magnitude similarity map,
/// after rescaling both inputs by their shared maximum.
pub fn gmsd(pred: &ScalarField, truth: &ScalarField) -> Result<f64> {
    same_shape(pred, truth)?;
    let m = pred.iter().chain(truth.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
    let (p, t) = if m > 0.0 { (pred / m, truth / m) } else { (pred.clone(), truth.clone()) };
    let (gp, gt) = (prewitt_magnitude(&p), prewitt_magnitude(&t));
    let gms: Vec<f64> = gp
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (2.0 * a * b + GMSD_C) / (a * a + b * b + GMSD_C))
        .collect();
    let n = gms.len() as f64;
    let mean = gms.iter().sum::<f64>() / n;
    Ok((gms.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Local maxima over 8-neighbourhoods at or above `rel_threshold * max`.
/// A connected plateau of equal values counts once, at its rounded centroid.
pub fn extract_peaks(field: &ScalarField, rel_threshold: f64) -> Vec<(usize, usize)> {
    let (h, w) = field.dim();
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Vec::new();
    }
    let thresh = rel_threshold * max;
    let mut seen = Array2::from_elem((h, w), false);
    let mut peaks = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let v = field[(i, j)];
            if seen[(i, j)] || v < thresh || v <= 0.0 {
                continue;
            }
            let mut stack = vec![(i, j)];
            let mut comp = Vec::new();
            let mut is_max = true;
            seen[(i, j)] = true;
            while let Some((a, b)) = stack.pop() {
                comp.push((a, b));
                for da in -1isize..=1 {
                    for db in -1isize..=1 {
                        let (na, nb) = (a as isize + da, b as isize + db);
                        if (da == 0 && db == 0) || na < 0 || nb < 0 || na >= h as isize || nb >= w as isize {
                            continue;
                        }
                        let (na, nb) = (na as usize, nb as usize);
                        let u = field[(na, nb)];
                        if u > v {
                            is_max = false;
                        } else if u == v && !seen[(na, nb)] {
                            seen[(na, nb)] = true;
                            stack.push((na, nb));
                        }
                    }
                }
            }
            if is_max {
                let n = comp.len() as f64;
                let ci = comp.iter().map(|p| p.0 as f64).sum::<f64>() / n;
                let cj = comp.iter().map(|p| p.1 as f64).sum::<f64>() / n;
                peaks.push((ci.round() as usize, cj.round() as usize));
            }
        }
    }
    peaks
}

/// Minimum-cost assignment for a square cost matrix; returns the column of each row.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "square cost matrix");
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakMatch {
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// `(pred index, truth index)` pairs.
    pub pairs: Vec<(usize, usize)>,
}

/// One-to-one matching within `radius` pixels that maximizes the number of
/// matches, then minimizes total distance.
pub fn hungarian_f1(pred: &[(usize, usize)], truth: &[(usize, usize)], radius: f64) -> PeakMatch {
    let (np, nt) = (pred.len(), truth.len());
    let n = np.max(nt);
    let dist = |a: (usize, usize), b: (usize, usize)| {
        ((a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)).sqrt()
    };
    let big = 1.0 + 2.0 * radius * (n as f64 + 1.0);
    let cost = Array2::from_shape_fn((n, n), |(i, j)| {
        if i < np && j < nt {
            let d = dist(pred[i], truth[j]);
            if d <= radius {
                return d;
            }
        }
        big
    });
    let pairs: Vec<(usize, usize)> = if n == 0 {
        Vec::new()
    } else {
        hungarian(&cost)
            .into_iter()
            .enumerate()
            .filter(|&(i, j)| i < np && j < nt && dist(pred[i], truth[j]) <= radius)
            .collect()
    };
    let tp = pairs.len();
    let (fp, fn_) = (np - tp, nt - tp);
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    PeakMatch {
        f1,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        pairs,
    }
}

fn mass_points(f: &ScalarField) -> Result<Vec<(f64, f64, f64)>> {
    let (h, w) = f.dim();
    if f.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain("mass distributions must be finite and nonnegative".into()));
    }
    let total: f64 = f.sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("field has zero mass".into()));
    }
    Ok(f.indexed_iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|((i, j), v)| ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64, v / total))
        .collect())
}

/// Wasserstein-2 distance between two weighted point sets on a line.
pub fn wasserstein_1d(a: &mut [(f64, f64)], b: &mut [(f64, f64)]) -> f64 {
    a.sort_by(|x, y| x.0.total_cmp(&y.0));
    b.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut i, mut k) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut acc = 0.0;
    while i < a.len() && k < b.len() {
        let m = ra.min(rb);
        acc += m * (a[i].0 - b[k].0).powi(2);
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= 1e-15 {
            k += 1;
            if k < b.len() {
                rb = b[k].1;
            }
        }
    }
    acc.sqrt()
}

/// Mean over random directions of the 1-D Wasserstein-2 distance between the
/// projected mass distributions. Coordinates are pixel centers divided by the grid size.
pub fn sliced_wasserstein(pred: &ScalarField, truth: &ScalarField, n_projections: usize, seed: u64) -> Result<f64> {
    same_shape(pred, truth)?;
    let (pa, pb) = (mass_points(pred)?, mass_points(truth)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_projections {
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let (c, s) = (phi.cos(), phi.sin());
        let mut a: Vec<(f64, f64)> = pa.iter().map(|(x, y, m)| (x * c + y * s, *m)).collect();
        let mut b: Vec<(f64, f64)> = pb.iter().map(|(x, y, m)| (x * c + y * s, *m)).collect();
        total += wasserstein_1d(&mut a, &mut b);
    }
    Ok(total / n_projections.max(1) as f64)
}

pub fn density_mse(pred: &ScalarField, truth: &ScalarField) -> Result<f64> {
    same_shape(pred, truth)?;
    Ok(pred.iter().zip(truth.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64)
}

fn box_mean(f: &ScalarField, win: usize) -> ScalarField {
    let r = (win / 2) as isize;
    let (h, w) = f.dim();
    let reflect = |k: isize, n: usize| -> usize {
        let n = n as isize;
        let mut k = k;
        while k < 0 || k >= n {
            k = if k < 0 { -k - 1 } else { 2 * n - k - 1 };
        }
        k as usize
    };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut s = 0.0;
        for di in -r..=r {
            for dj in -r..=r {
                s += f[(reflect(i as isize + di, h), reflect(j as isize + dj, w))];
            }
        }
        s / (win * win) as f64
    })
}

/// SSIM with a uniform 7x7 window and sample covariances, computed on both
/// inputs restricted to the truth support and averaged over that support.
pub fn masked_ssim(pred: &ScalarField, truth: &ScalarField) -> Result<f64> {
    same_shape(pred, truth)?;
    let mask = truth.mapv(|v| v > 0.0);
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::Degenerate("truth has no support".into()));
    }
    let l = truth.iter().cloned().fold(0.0, f64::max);
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let x = Array2::from_shape_fn(pred.dim(), |k| if mask[k] { pred[k] } else { 0.0 });
    let y = truth.clone();
    let np = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let cov = np / (np - 1.0);
    let (mx, my) = (box_mean(&x, SSIM_WINDOW), box_mean(&y, SSIM_WINDOW));
    let (mxx, myy, mxy) = (box_mean(&(&x * &x), SSIM_WINDOW), box_mean(&(&y * &y), SSIM_WINDOW), box_mean(&(&x * &y), SSIM_WINDOW));
    let mut total = 0.0;
    for (k, &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let vx = cov * (mxx[k] - mx[k] * mx[k]);
        let vy = cov * (myy[k] - my[k] * my[k]);
        let vxy = cov * (mxy[k] - mx[k] * my[k]);
        let s = ((2.0 * mx[k] * my[k] + c1) * (2.0 * vxy + c2)) / ((mx[k].powi(2) + my[k].powi(2) + c1) * (vx + vy + c2));
        total += s;
    }
    Ok(total / count as f64)
}

/// MSE between mean-normalized frequency-summed noise maps.
pub fn noise_mse(pred_map: &ScalarField, obs_map: &ScalarField) -> Result<f64> {
    same_shape(pred_map, obs_map)?;
    let (p, o) = (mean_normalize(pred_map)?.values, mean_normalize(obs_map)?.values);
    density_mse(&p, &o)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gmsd: f64,
    pub hungarian_f1: f64,
    pub swd: f64,
    pub density_mse: f64,
    pub masked_ssim: f64,
    pub noise_mse: f64,
    pub pred_peaks: Vec<(usize, usize)>,
    pub true_peaks: Vec<(usize, usize)>,
    pub matching: PeakMatch,
}

impl MetricsReport {
    pub const NAMES: [&'static str; 6] = ["gmsd", "hungarian_f1", "swd", "density_mse", "masked_ssim", "noise_mse"];

    pub fn values(&self) -> [f64; 6] {
        [self.gmsd, self.hungarian_f1, self.swd, self.density_mse, self.masked_ssim, self.noise_mse]
    }
}

/// Full metric suite for one reconstruction. An all-zero prediction scores
/// SWD as NaN since it carries no mass.
pub fn evaluate(pred: &ScalarField, truth: &ScalarField, pred_map: &ScalarField, obs_map: &ScalarField) -> Result<MetricsReport> {
    let pred_peaks = extract_peaks(pred, PEAK_THRESHOLD);
    let true_peaks = extract_peaks(truth, PEAK_THRESHOLD);
    let matching = hungarian_f1(&pred_peaks, &true_peaks, MATCH_RADIUS);
    let swd = match sliced_wasserstein(pred, truth, SWD_PROJECTIONS, SWD_SEED) {
        Ok(v) => v,
        Err(Error::Degenerate(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        gmsd: gmsd(pred, truth)?,
        hungarian_f1: matching.f1,
        swd,
        density_mse: density_mse(pred, truth)?,
        masked_ssim: masked_ssim(pred, truth)?,
        noise_mse: noise_mse(pred_map, obs_map)?,
        pred_peaks,
        true_peaks,
        matching,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fixture(seed: u64, n: usize) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn gmsd_identity_and_structure() {
        let t = fixture(1, 8);
        assert_eq!(gmsd(&t, &t).unwrap(), 0.0);
        assert!(gmsd(&Array2::from_elem((8, 8), 0.5), &t).unwrap() > 0.0);
        let p = fixture(2, 8);
        let a = gmsd(&p, &t).unwrap();
        let b = gmsd(&(&p * 7.0), &(&t * 7.0)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gmsd_matches_scalar_loop() {
        let (p, t) = (fixture(3, 8), fixture(4, 8));
        let m = p.iter().chain(t.iter()).fold(0.0f64, |a, v| a.max(*v));
        let get = |f: &ScalarField, i: i32, j: i32| f[(i.clamp(0, 7) as usize, j.clamp(0, 7) as usize)] / m;
        let mut vals = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                let mag = |f: &ScalarField| {
                    let gx = (get(f, i - 1, j + 1) + get(f, i, j + 1) + get(f, i + 1, j + 1)
                        - get(f, i - 1, j - 1)
                        - get(f, i, j - 1)
                        - get(f, i + 1, j - 1))
                        / 3.0;
                    let gy = (get(f, i + 1, j - 1) + get(f, i + 1, j) + get(f, i + 1, j + 1)
                        - get(f, i - 1, j - 1)
                        - get(f, i - 1, j)
                        - get(f, i - 1, j + 1))
                        / 3.0;
                    (gx * gx + gy * gy).sqrt()
                };
                let (a, b) = (mag(&p), mag(&t));
                vals.push((2.0 * a * b + 0.0026) / (a * a + b * b + 0.0026));
            }
        }
        let mean: f64 = vals.iter().sum::<f64>() / 64.0;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert!((gmsd(&p, &t).unwrap() - sd).abs() < 1e-12);
    }

    #[test]
    fn peak_examples() {
        let mut f = Array2::zeros((16, 16));
        f[(4, 4)] = 1.0;
        assert_eq!(extract_peaks(&f, 0.05), vec![(4, 4)]);
        assert!(extract_peaks(&Array2::zeros((5, 5)), 0.05).is_empty());
        f[(4, 9)] = 0.8;
        assert_eq!(extract_peaks(&f, 0.05), vec![(4, 4), (4, 9)]);
        f[(10, 10)] = 0.01;
        assert_eq!(extract_peaks(&f, 0.05).len(), 2);
        let mut plateau = Array2::zeros((7, 7));
        for j in 2..5 {
            plateau[(3, j)] = 1.0;
        }
        assert_eq!(extract_peaks(&plateau, 0.05), vec![(3, 3)]);
    }

    #[test]
    fn f1_examples() {
        let t = [(3, 3), (10, 10)];
        assert_eq!(hungarian_f1(&t, &t, 2.0).f1, 1.0);
        assert_eq!(hungarian_f1(&[], &t, 2.0).f1, 0.0);
        assert_eq!(hungarian_f1(&[], &[], 2.0).f1, 0.0);
        let m = hungarian_f1(&[(4, 4)], &t, 2.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 0, 1));
    }

    #[test]
    fn matching_prefers_more_matches() {
        let pred = [(0, 1), (0, 3)];
        let truth = [(0, 2), (0, 0)];
        let m = hungarian_f1(&pred, &truth, 1.5);
        assert_eq!(m.true_positives, 2);
        let a = hungarian_f1(&pred, &truth, 1.5);
        let b = hungarian_f1(&truth, &pred, 1.5);
        assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn hungarian_is_optimal_on_small_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in 1..6 {
            let c = Array2::from_shape_fn((n, n), |_| rng.random_range(0.0..10.0));
            let a = hungarian(&c);
            let got: f64 = a.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| best = best.min(p.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum()));
            assert!((got - best).abs() < 1e-12);
        }
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn swd_properties() {
        let t = fixture(5, 12);
        assert_eq!(sliced_wasserstein(&t, &t, 64, 0).unwrap(), 0.0);
        let p = fixture(6, 12);
        assert_eq!(sliced_wasserstein(&p, &t, 64, 9).unwrap(), sliced_wasserstein(&p, &t, 64, 9).unwrap());
        assert!(sliced_wasserstein(&Array2::zeros((12, 12)), &t, 8, 0).is_err());
    }

    #[test]
    fn swd_dirac_pair() {
        let mut a = Array2::zeros((32, 32));
        let mut b = Array2::zeros((32, 32));
        a[(10, 10)] = 1.0;
        b[(13, 14)] = 1.0;
        let delta = (3.0f64.powi(2) + 4.0f64.powi(2)).sqrt() / 32.0;
        let v = sliced_wasserstein(&a, &b, 10_000, 1).unwrap();
        assert!((v / (2.0 / PI * delta) - 1.0).abs() < 0.02);
    }

    #[test]
    fn mse_and_ssim_examples() {
        let mut t = Array2::zeros((12, 12));
        t[(3, 3)] = 1.0;
        t[(8, 7)] = 0.6;
        assert_eq!(density_mse(&t, &t).unwrap(), 0.0);
        assert!((density_mse(&(&t + 0.1), &t).unwrap() - 0.01).abs() < 1e-15);
        assert!((masked_ssim(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        let mut p = t.clone();
        p[(0, 0)] = 5.0;
        p[(5, 5)] = 2.0;
        assert_eq!(masked_ssim(&p, &t).unwrap(), masked_ssim(&t, &t).unwrap());
        let q = array![[1.0, 3.0]];
        assert!((noise_mse(&q, &(&q * 4.0)).unwrap()).abs() < 1e-15);
    }
}
