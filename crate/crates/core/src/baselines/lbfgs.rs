//! Box-projected L-BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{canonical_weights, initial_larmor, objective, pack_grad, unpack, Finish};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, OperatorKind, Spectrum};
use crate::objective::{LossBreakdown, LossWeights};
use crate::result::{Method, SolverResult, TraceEntry};
use crate::scene::LARMOR_BAND;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_iter: usize,
    pub max_line_search: usize,
    /// Largest coordinate change of a step taken without curvature history.
    pub initial_step: f64,
    /// Largest coordinate change of the fallback step after a failed search.
    pub fallback_step: f64,
    /// Projected-gradient infinity norm below which iteration stops.
    pub gtol: f64,
    pub weights: LossWeights,
    pub init: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 20,
            c1: 1e-4,
            c2: 0.9,
            max_iter: 100,
            max_line_search: 25,
            initial_step: 1e-2,
            fallback_step: 1e-3,
            gtol: 1e-12,
            weights: canonical_weights(),
            init: 0.1,
        }
    }
}

impl LbfgsConfig {
    pub fn with_epochs_scale(mut self, factor: f64) -> Self {
        self.max_iter = ((self.max_iter as f64 * factor).round() as usize).max(1);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failures: usize,
    pub restarts: usize,
    pub max_history: usize,
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Coordinates pinned at a bound with the gradient pushing outward.
fn active_set(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<bool> {
    (0..x.len()).map(|i| (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)).collect()
}

fn two_loop(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, active: &[bool]) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().zip(active).map(|(v, a)| if *a { 0.0 } else { *v }).collect();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        for i in 0..q.len() {
            q[i] -= a * y[i];
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for i in 0..q.len() {
            q[i] += s[i] * (a - b);
        }
    }
    q.iter().zip(active).map(|(v, a)| if *a { 0.0 } else { -v }).collect()
}

struct Point {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

/// Minimizer of a cubic through two points with known slopes, or `None`.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}

/// Minimizes `f` over the box `[lo, hi]` starting from `x0`.
pub fn lbfgs_minimize<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if cfg.history == 0 || !(0.0 < cfg.c1 && cfg.c1 < cfg.c2 && cfg.c2 < 1.0) {
        return Err(Error::Config(format!("invalid L-BFGS configuration {cfg:?}")));
    }
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x)?;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut prev_active: Option<Vec<bool>> = None;
    let mut out = LbfgsOutcome {
        x: Vec::new(),
        f: fx,
        iterations: 0,
        converged: false,
        line_search_failures: 0,
        restarts: 0,
        max_history: 0,
        trace: vec![fx],
    };
    for _ in 0..cfg.max_iter {
        let pg = (0..x.len()).map(|i| (x[i] - (x[i] - g[i]).clamp(lo[i], hi[i])).abs()).fold(0.0, f64::max);
        if pg < cfg.gtol {
            out.converged = true;
            break;
        }
        let active = active_set(&x, &g, lo, hi);
        if prev_active.as_ref().is_some_and(|p| *p != active) && !hist.is_empty() {
            hist.clear();
            out.restarts += 1;
        }
        prev_active = Some(active.clone());
        let mut d = two_loop(&g, &hist, &active);
        if dot(&g, &d) >= 0.0 {
            hist.clear();
            out.restarts += 1;
            d = g.iter().zip(&active).map(|(v, a)| if *a { 0.0 } else { -v }).collect();
        }
        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if dmax == 0.0 {
            out.converged = true;
            break;
        }
        let a0 = if hist.is_empty() { (cfg.initial_step / dmax).min(1.0) } else { 1.0 };
        let mut eval = |alpha: f64| -> Result<Point> {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            // Clamped coordinates do not move along the projected path.
            let moving: Vec<bool> = (0..xn.len()).map(|i| xn[i] > lo[i] && xn[i] < hi[i]).collect();
            project(&mut xn, lo, hi);
            let (fv, gv) = f(&xn)?;
            let dphi = (0..xn.len()).filter(|&i| moving[i]).map(|i| gv[i] * d[i]).sum();
            Ok(Point { alpha, x: xn, f: fv, g: gv, dphi })
        };
        let next = strong_wolfe(&mut eval, fx, dot(&g, &d), a0, cfg)?;
        let p = match next {
            Some(p) => p,
            None => {
                out.line_search_failures += 1;
                hist.clear();
                eval(cfg.fallback_step / dmax)?
            }
        };
        if !p.f.is_finite() {
            return Err(Error::NonFinite("L-BFGS objective".into()));
        }
        let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if hist.len() == cfg.history {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        out.max_history = out.max_history.max(hist.len());
        x = p.x;
        fx = p.f;
        g = p.g;
        out.iterations += 1;
        out.trace.push(fx);
    }
    out.x = x;
    out.f = fx;
    Ok(out)
}

fn strong_wolfe<E>(eval: &mut E, f0: f64, d0: f64, a1: f64, cfg: &LbfgsConfig) -> Result<Option<Point>>
where
    E: FnMut(f64) -> Result<Point>,
{
    let (mut lo_a, mut lo_f, mut lo_d) = (0.0, f0, d0);
    let mut alpha = a1;
    let mut evals = 0;
    let mut prev_f = f0;
    let mut first = true;
    let bracket = loop {
        if evals >= cfg.max_line_search {
            return Ok(None);
        }
        let p = eval(alpha)?;
        evals += 1;
        if !p.f.is_finite() || p.f > f0 + cfg.c1 * alpha * d0 || (!first && p.f >= prev_f) {
            break (p.alpha, p.f, p.dphi);
        }
        if p.dphi.abs() <= -cfg.c2 * d0 {
            return Ok(Some(p));
        }
        if p.dphi >= 0.0 {
            let hi = (lo_a, lo_f, lo_d);
            lo_a = p.alpha;
            lo_f = p.f;
            lo_d = p.dphi;
            break hi;
        }
        lo_a = p.alpha;
        lo_f = p.f;
        lo_d = p.dphi;
        prev_f = p.f;
        first = false;
        alpha *= 2.0;
    };
    let (mut hi_a, mut hi_f, mut hi_d) = bracket;
    while evals < cfg.max_line_search {
        let (a, b) = (lo_a.min(hi_a), lo_a.max(hi_a));
        let width = b - a;
        let mut t = if hi_f.is_finite() {
            cubic_min(lo_a, lo_f, lo_d, hi_a, hi_f, hi_d).unwrap_or(0.5 * (a + b))
        } else {
            0.5 * (a + b)
        };
        if !(t > a + 0.1 * width && t < b - 0.1 * width) {
            t = 0.5 * (a + b);
        }
        let p = eval(t)?;
        evals += 1;
        if !p.f.is_finite() || p.f > f0 + cfg.c1 * t * d0 || p.f >= lo_f {
            hi_a = t;
            hi_f = p.f;
            hi_d = p.dphi;
        } else {
            if p.dphi.abs() <= -cfg.c2 * d0 {
                return Ok(Some(p));
            }
            if p.dphi * (hi_a - lo_a) >= 0.0 {
                hi_a = lo_a;
                hi_f = lo_f;
                hi_d = lo_d;
            }
            lo_a = t;
            lo_f = p.f;
            lo_d = p.dphi;
        }
        if width < 1e-16 * b.max(1e-300) {
            break;
        }
    }
    Ok(None)
}

pub fn run_lbfgs(obs: &Spectrum, model: &ForwardModel, op: OperatorKind, config: &LbfgsConfig, seed: u64) -> Result<SolverResult> {
    let start = Instant::now();
    if !(config.init > 0.0) {
        return Err(Error::Config(format!("invalid L-BFGS configuration {config:?}")));
    }
    let obj = objective(model, op, obs, &config.weights)?;
    let shape = model.geometry().shape();
    let n = shape.0 * shape.1;
    let x0: Vec<f64> = std::iter::repeat_n(config.init, n).chain(std::iter::repeat_n(initial_larmor(), n)).collect();
    let lo: Vec<f64> = std::iter::repeat_n(0.0, n).chain(std::iter::repeat_n(LARMOR_BAND.0, n)).collect();
    let hi: Vec<f64> = std::iter::repeat_n(f64::INFINITY, n).chain(std::iter::repeat_n(LARMOR_BAND.1, n)).collect();
    let mut breakdowns: Vec<LossBreakdown> = Vec::new();
    let outcome = lbfgs_minimize(
        |x| {
            let (rho, omega) = unpack(x, shape);
            let (loss, g) = obj.value_and_grad(&rho, &omega)?;
            breakdowns.push(loss);
            Ok((loss.total, pack_grad(&g.rho, &g.omega)))
        },
        &x0,
        &lo,
        &hi,
        config,
    )?;
    let trace = outcome
        .trace
        .iter()
        .enumerate()
        .map(|(i, &f)| TraceEntry {
            iteration: i,
            stage: None,
            lr: 0.0,
            loss: breakdowns.iter().rev().find(|b| b.total == f).copied().unwrap_or(LossBreakdown {
                total: f,
                ..LossBreakdown::default()
            }),
        })
        .collect();
    let (rho, omega) = unpack(&outcome.x, shape);
    if rho.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("density collapsed to zero".into()));
    }
    let mut info = serde_json::Map::new();
    info.insert("converged".into(), outcome.converged.into());
    info.insert("line_search_failures".into(), outcome.line_search_failures.into());
    info.insert("restarts".into(), outcome.restarts.into());
    info.insert("max_history".into(), outcome.max_history.into());
    info.insert("evaluations".into(), breakdowns.len().into());
    Finish {
        method: Method::Lbfgs,
        operator: op,
        obs,
        model,
        trace,
        iterations: outcome.iterations,
        start,
        seed,
        config: serde_json::to_value(config)?,
        info,
    }
    .build(rho, omega)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn converges_on_least_squares() {
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((n, n), |(i, j)| {
            (if i == j { 1.0 } else { 0.0 }) + 0.3 * rng.random_range(-1.0..1.0) / (n as f64).sqrt()
        });
        let xstar = Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
        let b = a.dot(&xstar);
        let cfg = LbfgsConfig {
            max_iter: 50,
            initial_step: 1.0,
            gtol: 1e-14,
            ..LbfgsConfig::default()
        };
        let lo = vec![f64::NEG_INFINITY; n];
        let hi = vec![f64::INFINITY; n];
        let out = lbfgs_minimize(
            |x| {
                let r = a.dot(&Array1::from(x.to_vec())) - &b;
                Ok((0.5 * r.dot(&r), a.t().dot(&r).to_vec()))
            },
            &vec![0.0; n],
            &lo,
            &hi,
            &cfg,
        )
        .unwrap();
        assert!(out.iterations <= 50);
        let err = out.x.iter().zip(xstar.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "error {err} after {} iterations", out.iterations);
        assert!(out.max_history <= 20);
    }

    #[test]
    fn respects_box_on_bounded_quadratic() {
        let target = [-1.0, 0.5, 3.0];
        let lo = [0.0, 0.0, 0.0];
        let hi = [2.0, 2.0, 2.0];
        let out = lbfgs_minimize(
            |x| {
                let f = x.iter().zip(target).map(|(a, t)| 0.5 * (a - t) * (a - t)).sum();
                Ok((f, x.iter().zip(target).map(|(a, t)| a - t).collect()))
            },
            &[1.0, 1.0, 1.0],
            &lo,
            &hi,
            &LbfgsConfig {
                initial_step: 1.0,
                ..LbfgsConfig::default()
            },
        )
        .unwrap();
        assert!((out.x[0]).abs() < 1e-12 && (out.x[1] - 0.5).abs() < 1e-8 && (out.x[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn history_is_bounded_on_a_scene() {
        let (obs, m, _) = single_source(10, OperatorKind::F2, (3, 6));
        let cfg = LbfgsConfig {
            max_iter: 30,
            history: 5,
            ..LbfgsConfig::default()
        };
        let a = run_lbfgs(&obs, &m, OperatorKind::F2, &cfg, 0).unwrap();
        assert!(a.info["max_history"].as_u64().unwrap() <= 5);
        let b = run_lbfgs(&obs, &m, OperatorKind::F2, &cfg, 0).unwrap();
        assert_eq!(a.rho_hat, b.rho_hat);
        assert!(a.rho_hat.iter().all(|v| *v >= 0.0));
    }
}
