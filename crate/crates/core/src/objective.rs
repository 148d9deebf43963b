//! Noise-map normalizations, the log-MSE fidelity and regularizers, their exact
//! gradients with respect to `(rho, omega_L)`, and the energy-ratio scale correction.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{check_density, check_field, ForwardModel, OperatorKind, Spectrum};
use crate::physics::KernelId;
use crate::ScalarField;

pub const LOG_EPS: f64 = 1e-10;
/// Pixels within this relative distance of the maximum share the max subgradient.
pub const MAX_TIE_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub fidelity: f64,
    pub nm: f64,
    pub ds: f64,
    pub l1_sparsity: f64,
    pub l1_extra: f64,
    pub tv: f64,
    /// Quadratic penalty `sum rho^2`; only the Tikhonov baseline enables it.
    pub l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fidelity: 2.0,
            nm: 0.5,
            ds: 0.1,
            l1_sparsity: 1e-2,
            l1_extra: 1e-3,
            tv: 1e-3,
            l2: 0.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            fidelity: 0.0,
            nm: 0.0,
            ds: 0.0,
            l1_sparsity: 0.0,
            l1_extra: 0.0,
            tv: 0.0,
            l2: 0.0,
        }
    }

    pub fn l1(&self) -> f64 {
        self.l1_sparsity + self.l1_extra
    }

    /// Weights in effect for a stage: the fine stage swaps the fidelity and
    /// noise-map weights so the mean-normalized loss becomes the primary term.
    pub fn staged(&self, stage: Stage) -> Self {
        match stage {
            Stage::Coarse => *self,
            Stage::Fine => Self {
                fidelity: self.nm,
                nm: self.fidelity,
                ..*self
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.fidelity, self.nm, self.ds, self.l1_sparsity, self.l1_extra, self.tv, self.l2];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedNoiseMap {
    pub values: ScalarField,
    pub mode: NormMode,
}

/// Frequency-summed noise map of a spectrum.
pub fn noise_map(spectrum: &Spectrum) -> ScalarField {
    spectrum.noise_map()
}

pub fn max_normalize(field: &ScalarField) -> Result<NormalizedNoiseMap> {
    let (_, m) = argmax(field);
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::Degenerate(format!("cannot max-normalize a field with maximum {m}")));
    }
    Ok(NormalizedNoiseMap {
        values: field / m,
        mode: NormMode::Max,
    })
}

pub fn mean_normalize(field: &ScalarField) -> Result<NormalizedNoiseMap> {
    let m = field.mean().unwrap_or(0.0);
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::Degenerate(format!("cannot mean-normalize a field with mean {m}")));
    }
    Ok(NormalizedNoiseMap {
        values: field / m,
        mode: NormMode::Mean,
    })
}

/// First row-major index of the maximum and the maximum itself.
pub(crate) fn argmax(field: &ScalarField) -> ((usize, usize), f64) {
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for (idx, &v) in field.indexed_iter() {
        if v > best.1 {
            best = (idx, v);
        }
    }
    best
}

/// `log10(max(n, 0) + eps)` of the max-normalized observed map.
pub fn observed_log_map(obs_map: &ScalarField) -> Result<ScalarField> {
    let n = max_normalize(obs_map)?;
    Ok(n.values.mapv(|v| (v.max(0.0) + LOG_EPS).log10()))
}

pub fn fidelity_from_maps(pred_map: &ScalarField, obs_map: &ScalarField) -> Result<f64> {
    same_shape(pred_map, obs_map)?;
    let lo = observed_log_map(obs_map)?;
    let lp = observed_log_map(pred_map)?;
    Ok(mse(&lp, &lo))
}

pub fn fidelity_logmse(pred: &Spectrum, obs: &Spectrum) -> Result<f64> {
    if pred.data.shape() != obs.data.shape() {
        return Err(Error::Shape {
            expected: obs.data.shape().to_vec(),
            got: pred.data.shape().to_vec(),
        });
    }
    fidelity_from_maps(&pred.noise_map(), &obs.noise_map())
}

pub fn loss_l1(rho: &ScalarField) -> f64 {
    rho.iter().map(|v| v.abs()).sum()
}

/// Anisotropic TV with forward differences; the last row and column add nothing.
pub fn loss_tv(rho: &ScalarField) -> f64 {
    let (h, w) = rho.dim();
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            if r + 1 < h {
                acc += (rho[[r + 1, c]] - rho[[r, c]]).abs();
            }
            if c + 1 < w {
                acc += (rho[[r, c + 1]] - rho[[r, c]]).abs();
            }
        }
    }
    acc
}

pub fn loss_nm(pred_map: &ScalarField, obs_map: &ScalarField) -> Result<f64> {
    same_shape(pred_map, obs_map)?;
    let p = mean_normalize(pred_map)?;
    let o = mean_normalize(obs_map)?;
    Ok(mse(&p.values, &o.values))
}

pub fn loss_ds(rho: &ScalarField, obs_map: &ScalarField) -> Result<f64> {
    same_shape(rho, obs_map)?;
    let q = mean_normalize(&rho.mapv(|v| v * v))?;
    let o = mean_normalize(obs_map)?;
    Ok(mse(&q.values, &o.values))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn grad_tv(rho: &ScalarField) -> ScalarField {
    let (h, w) = rho.dim();
    let mut g = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if r + 1 < h {
                let s = sign(rho[[r + 1, c]] - rho[[r, c]]);
                g[[r + 1, c]] += s;
                g[[r, c]] -= s;
            }
            if c + 1 < w {
                let s = sign(rho[[r, c + 1]] - rho[[r, c]]);
                g[[r, c + 1]] += s;
                g[[r, c]] -= s;
            }
        }
    }
    g
}

fn mse(a: &ScalarField, b: &ScalarField) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
}

fn same_shape(a: &ScalarField, b: &ScalarField) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            expected: b.shape().to_vec(),
            got: a.shape().to_vec(),
        });
    }
    Ok(())
}

/// Weighted loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fidelity: f64,
    pub nm: f64,
    pub ds: f64,
    pub l1: f64,
    pub tv: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.fidelity + self.nm + self.ds + self.l1 + self.tv + self.l2;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Gradient {
    pub rho: ScalarField,
    pub omega: ScalarField,
}

/// Derivative of the log-MSE fidelity with respect to the raw predicted map,
/// including the coupling through the max pixel unless `detach_max` is set.
pub fn fidelity_map_gradient(pred_map: &ScalarField, obs_log: &ScalarField, detach_max: bool) -> Result<(f64, ScalarField)> {
    same_shape(pred_map, obs_log)?;
    let (k, m) = argmax(pred_map);
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::Degenerate(format!("predicted noise map has maximum {m}")));
    }
    let n = pred_map.len() as f64;
    let ln10 = std::f64::consts::LN_10;
    let mut value = 0.0;
    let mut g = Array2::zeros(pred_map.dim());
    let mut coupling = 0.0;
    Zip::from(&mut g).and(pred_map).and(obs_log).for_each(|gi, &p, &lo| {
        let u = (p / m).max(0.0);
        let e = (u + LOG_EPS).log10() - lo;
        value += e * e;
        let du = 2.0 / n * e / ((u + LOG_EPS) * ln10);
        coupling += du * p;
        *gi = du / m;
    });
    if !detach_max {
        let ties: Vec<_> = pred_map
            .indexed_iter()
            .filter(|(_, p)| **p >= m * (1.0 - MAX_TIE_REL))
            .map(|(i, _)| i)
            .collect();
        if ties.len() <= 1 {
            g[k] -= coupling / (m * m);
        } else {
            let share = coupling / (m * m * ties.len() as f64);
            for i in ties {
                g[i] -= share;
            }
        }
    }
    Ok((value / n, g))
}

/// Derivative of the mean-normalized MSE with respect to the raw predicted map.
pub fn nm_map_gradient(pred_map: &ScalarField, obs_mean: &ScalarField) -> Result<(f64, ScalarField)> {
    same_shape(pred_map, obs_mean)?;
    let m = pred_map.mean().unwrap_or(0.0);
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::Degenerate(format!("predicted noise map has mean {m}")));
    }
    let n = pred_map.len() as f64;
    let mut value = 0.0;
    let mut coupling = 0.0;
    let mut g = Array2::zeros(pred_map.dim());
    Zip::from(&mut g).and(pred_map).and(obs_mean).for_each(|gi, &p, &o| {
        let e = p / m - o;
        value += e * e;
        let dv = 2.0 / n * e;
        coupling += dv * p;
        *gi = dv / m;
    });
    g.mapv_inplace(|v| v - coupling / (n * m * m));
    Ok((value / n, g))
}

/// The stage objective for one observation, with the observation-side
/// normalizations cached.
#[derive(Debug, Clone)]
pub struct Objective {
    pub model: ForwardModel,
    pub operator: OperatorKind,
    /// Effective (already staged) weights.
    pub weights: LossWeights,
    pub detach_max: bool,
    obs_log: ScalarField,
    obs_mean: ScalarField,
}

impl Objective {
    pub fn new(
        model: ForwardModel,
        operator: OperatorKind,
        obs_map: &ScalarField,
        weights: &LossWeights,
        stage: Stage,
    ) -> Result<Self> {
        if operator == OperatorKind::F3 {
            return Err(Error::Config("inversion is restricted to F1 and F2".into()));
        }
        weights.validate()?;
        check_field("observed noise map", obs_map, model.geometry())?;
        let obs_log = observed_log_map(obs_map)?;
        let obs_mean = mean_normalize(obs_map)?.values;
        Ok(Self {
            model,
            operator,
            weights: weights.staged(stage),
            detach_max: false,
            obs_log,
            obs_mean,
        })
    }

    pub fn from_spectrum(
        model: ForwardModel,
        operator: OperatorKind,
        obs: &Spectrum,
        weights: &LossWeights,
        stage: Stage,
    ) -> Result<Self> {
        Self::new(model, operator, &obs.noise_map(), weights, stage)
    }

    pub fn with_detached_max(mut self, detach: bool) -> Self {
        self.detach_max = detach;
        self
    }

    pub fn observed_mean_map(&self) -> &ScalarField {
        &self.obs_mean
    }

    pub fn evaluate(&self, rho: &ScalarField, omega: &ScalarField) -> Result<LossBreakdown> {
        Ok(self.run(rho, omega, false)?.0)
    }

    pub fn value_and_grad(&self, rho: &ScalarField, omega: &ScalarField) -> Result<(LossBreakdown, Gradient)> {
        let (b, g) = self.run(rho, omega, true)?;
        Ok((b, g.expect("gradient requested")))
    }

    fn run(&self, rho: &ScalarField, omega: &ScalarField, want_grad: bool) -> Result<(LossBreakdown, Option<Gradient>)> {
        let geom = self.model.geometry();
        check_density(rho, geom)?;
        check_field("larmor field", omega, geom)?;
        let w = &self.weights;
        let mut out = LossBreakdown::default();
        let shape = rho.dim();
        let mut g_rho = Array2::<f64>::zeros(shape);
        let mut g_omega = Array2::<f64>::zeros(shape);

        if w.fidelity > 0.0 || w.nm > 0.0 {
            let kernels = &self.model.kernels;
            let bd = self.model.boundary;
            let (b_nv, amp) = match self.operator {
                OperatorKind::F1 => {
                    let b = kernels.convolve(KernelId::NvProjected, rho, bd)?;
                    let a = b.mapv(|v| v * v);
                    (Some(b), a)
                }
                _ => (None, kernels.convolve(KernelId::Summed, rho, bd)?),
            };
            let (lam, dlam) = self.model.spectral_weight(omega);
            let n_map = &amp * &lam;
            let mut g_n = Array2::<f64>::zeros(shape);
            if w.fidelity > 0.0 {
                let (d, gd) = fidelity_map_gradient(&n_map, &self.obs_log, self.detach_max)?;
                out.fidelity = w.fidelity * d;
                g_n.scaled_add(w.fidelity, &gd);
            }
            if w.nm > 0.0 {
                let (r, gr) = nm_map_gradient(&n_map, &self.obs_mean)?;
                out.nm = w.nm * r;
                g_n.scaled_add(w.nm, &gr);
            }
            if want_grad {
                g_omega = &g_n * &amp * &dlam;
                let g_amp = &g_n * &lam;
                let back = match &b_nv {
                    Some(b) => kernels.correlate(KernelId::NvProjected, &(g_amp * b * 2.0), bd)?,
                    None => kernels.correlate(KernelId::Summed, &g_amp, bd)?,
                };
                g_rho += &back;
            }
        }

        if w.ds > 0.0 {
            let q = rho.mapv(|v| v * v);
            let (r, gq) = nm_map_gradient(&q, &self.obs_mean)?;
            out.ds = w.ds * r;
            if want_grad {
                Zip::from(&mut g_rho).and(&gq).and(rho).for_each(|g, &dq, &p| *g += w.ds * dq * 2.0 * p);
            }
        }
        let l1w = w.l1();
        if l1w > 0.0 {
            out.l1 = l1w * loss_l1(rho);
            if want_grad {
                Zip::from(&mut g_rho).and(rho).for_each(|g, &p| *g += l1w * sign(p));
            }
        }
        if w.tv > 0.0 {
            out.tv = w.tv * loss_tv(rho);
            if want_grad {
                g_rho.scaled_add(w.tv, &grad_tv(rho));
            }
        }
        if w.l2 > 0.0 {
            out.l2 = w.l2 * rho.iter().map(|v| v * v).sum::<f64>();
            if want_grad {
                g_rho.scaled_add(2.0 * w.l2, rho);
            }
        }
        let out = out.finish();
        if !out.total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok((out, want_grad.then_some(Gradient { rho: g_rho, omega: g_omega })))
    }
}

pub fn total_loss(
    rho: &ScalarField,
    omega: &ScalarField,
    obs: &Spectrum,
    model: &ForwardModel,
    operator: OperatorKind,
    weights: &LossWeights,
    stage: Stage,
) -> Result<LossBreakdown> {
    Objective::from_spectrum(model.clone(), operator, obs, weights, stage)?.evaluate(rho, omega)
}

pub fn grad_total_loss(
    rho: &ScalarField,
    omega: &ScalarField,
    obs: &Spectrum,
    model: &ForwardModel,
    operator: OperatorKind,
    weights: &LossWeights,
    stage: Stage,
) -> Result<Gradient> {
    let obj = Objective::from_spectrum(model.clone(), operator, obs, weights, stage)?;
    Ok(obj.value_and_grad(rho, omega)?.1)
}

/// `alpha = E_obs / E_pred` for linear operators, its square root for F1.
pub fn scale_factor(e_obs: f64, e_pred: f64, operator: OperatorKind) -> Result<f64> {
    if !(e_pred > 0.0) || !e_pred.is_finite() {
        return Err(Error::Degenerate(format!("predicted energy must be > 0, got {e_pred}")));
    }
    let ratio = e_obs / e_pred;
    if !(ratio >= 0.0) {
        return Err(Error::Degenerate(format!("energy ratio {ratio} is negative")));
    }
    Ok(match operator {
        OperatorKind::F1 => ratio.sqrt(),
        _ => ratio,
    })
}

pub fn scale_correction(
    rho_hat: &ScalarField,
    omega_hat: &ScalarField,
    obs: &Spectrum,
    model: &ForwardModel,
    operator: OperatorKind,
) -> Result<(ScalarField, f64)> {
    let e_pred = model.noise_map(operator, rho_hat, omega_hat)?.sum();
    let alpha = scale_factor(obs.energy(), e_pred, operator)?;
    Ok((rho_hat * alpha, alpha))
}
