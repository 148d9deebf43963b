//! Density and Larmor heads on top of the coordinate MLP, and the exact
//! parameter gradient of a stage objective.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::encoding::EncoderConfig;
use super::mlp::{Mlp, MlpArch, Tape};
use crate::error::{Error, Result};
use crate::objective::{LossBreakdown, Objective};
use crate::ScalarField;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Support threshold relative to the live density maximum.
    pub tau: f64,
    pub band: (f64, f64),
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { tau: 0.3, band: (1.5, 2.5) }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("support threshold must be in (0, 1), got {}", self.tau)));
        }
        if !(self.band.0 < self.band.1) || !self.band.0.is_finite() || !self.band.1.is_finite() {
            return Err(Error::Config(format!("invalid Larmor band {:?}", self.band)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub rho: ScalarField,
    /// Larmor field, zero off the support mask.
    pub omega: ScalarField,
    pub mask: Array2<bool>,
    /// Raw network outputs `(h_rho, g, h_omega)` per pixel, row-major.
    pub raw: Array2<f64>,
}

/// Encoder, MLP and heads as one differentiable map from parameters to fields.
#[derive(Debug, Clone)]
pub struct NeuralField {
    pub mlp: Mlp,
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
}

impl NeuralField {
    pub fn new(arch: MlpArch, encoder: EncoderConfig, heads: HeadConfig) -> Result<Self> {
        if arch.input != encoder.dim() || arch.output != 3 {
            return Err(Error::Config(format!(
                "network expects {} inputs and 3 outputs; encoder provides {}",
                arch.input,
                encoder.dim()
            )));
        }
        heads.validate()?;
        Ok(Self {
            mlp: Mlp::new(arch)?,
            encoder,
            heads,
        })
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    pub fn init(&self, seed: u64) -> Vec<f64> {
        self.mlp.init(seed)
    }

    pub fn features(&self, h: usize, w: usize, beta: f64) -> Array2<f64> {
        self.encoder.encode_grid(h, w, beta)
    }

    /// Applies the heads to raw network outputs on an `h x w` grid.
    pub fn heads(&self, raw: Array2<f64>, h: usize, w: usize) -> FieldOutput {
        let (lo, hi) = self.heads.band;
        let rho = Array2::from_shape_fn((h, w), |(i, j)| {
            let r = raw.row(i * w + j);
            softplus(r[0]) * sigmoid(r[1])
        });
        let max = rho.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let thresh = self.heads.tau * max;
        let mask = rho.mapv(|v| v > thresh);
        let omega = Array2::from_shape_fn((h, w), |(i, j)| {
            if mask[(i, j)] {
                lo + (hi - lo) * sigmoid(raw[(i * w + j, 2)])
            } else {
                0.0
            }
        });
        FieldOutput { rho, omega, mask, raw }
    }

    /// Evaluates the field on the grid encoded by `x` (row-major `h x w`).
    pub fn forward(&self, params: &[f64], x: &Array2<f64>, h: usize, w: usize) -> Result<(FieldOutput, Tape)> {
        check_rows(x, h, w)?;
        let tape = self.mlp.forward(params, x)?;
        let out = self.heads(tape.output.clone(), h, w);
        Ok((out, tape))
    }

    pub fn field_forward(&self, params: &[f64], h: usize, w: usize, beta: f64) -> Result<FieldOutput> {
        let x = self.features(h, w, beta);
        Ok(self.forward(params, &x, h, w)?.0)
    }

    /// Maps image-space gradients to raw-output gradients; the mask is a constant.
    pub fn head_backward(&self, out: &FieldOutput, g_rho: &ScalarField, g_omega: &ScalarField) -> Array2<f64> {
        let (lo, hi) = self.heads.band;
        let w = out.rho.ncols();
        let mut d = Array2::zeros(out.raw.dim());
        for (k, mut row) in d.rows_mut().into_iter().enumerate() {
            let (i, j) = (k / w, k % w);
            let r = out.raw.row(k);
            let (sh, sg) = (sigmoid(r[0]), sigmoid(r[1]));
            let gr = g_rho[(i, j)];
            row[0] = gr * sh * sg;
            row[1] = gr * softplus(r[0]) * sg * (1.0 - sg);
            if out.mask[(i, j)] {
                let so = sigmoid(r[2]);
                row[2] = g_omega[(i, j)] * (hi - lo) * so * (1.0 - so);
            }
        }
        d
    }

    /// Stage loss and its exact gradient with respect to every parameter.
    /// The objective's geometry fixes the grid size.
    pub fn param_gradient(
        &self,
        params: &[f64],
        x: &Array2<f64>,
        objective: &Objective,
    ) -> Result<(LossBreakdown, Vec<f64>, FieldOutput)> {
        let (h, w) = objective.model.geometry().shape();
        let (out, tape) = self.forward(params, x, h, w)?;
        let (loss, g) = objective.value_and_grad(&out.rho, &out.omega)?;
        let d = self.head_backward(&out, &g.rho, &g.omega);
        Ok((loss, self.mlp.backward(params, &tape, &d), out))
    }

    /// `J^T v` for the density Jacobian `J = d rho / d theta`.
    pub fn density_vjp(&self, params: &[f64], x: &Array2<f64>, h: usize, w: usize, v: &ScalarField) -> Result<Vec<f64>> {
        let (out, tape) = self.forward(params, x, h, w)?;
        if v.dim() != (h, w) {
            return Err(Error::Shape {
                expected: vec![h, w],
                got: v.shape().to_vec(),
            });
        }
        let d = self.head_backward(&out, v, &Array2::zeros((h, w)));
        Ok(self.mlp.backward(params, &tape, &d))
    }

    /// `J u` for a parameter-space direction `u`.
    pub fn density_jvp(&self, params: &[f64], x: &Array2<f64>, h: usize, w: usize, u: &[f64]) -> Result<ScalarField> {
        check_rows(x, h, w)?;
        let (raw, draw) = self.mlp.jvp(params, x, u)?;
        Ok(Array2::from_shape_fn((h, w), |(i, j)| {
            let k = i * w + j;
            let (a, b) = (raw[(k, 0)], raw[(k, 1)]);
            let (sa, sb) = (sigmoid(a), sigmoid(b));
            sa * sb * draw[(k, 0)] + softplus(a) * sb * (1.0 - sb) * draw[(k, 1)]
        }))
    }

    /// Full density Jacobian, one row per pixel, from per-pixel reverse passes.
    pub fn density_jacobian(&self, params: &[f64], x: &Array2<f64>, h: usize, w: usize) -> Result<Array2<f64>> {
        let (out, tape) = self.forward(params, x, h, w)?;
        let zero = Array2::zeros((h, w));
        let mut jac = Array2::zeros((h * w, params.len()));
        for k in 0..h * w {
            let mut e = Array2::zeros((h, w));
            e[(k / w, k % w)] = 1.0;
            let d = self.head_backward(&out, &e, &zero);
            let row = self.mlp.backward(params, &tape, &d);
            jac.row_mut(k).assign(&ndarray::ArrayView1::from(&row));
        }
        Ok(jac)
    }

    /// `J J^T probe`, the image-space kernel induced by the parametrization.
    pub fn filter_apply(&self, params: &[f64], x: &Array2<f64>, h: usize, w: usize, probe: &ScalarField) -> Result<ScalarField> {
        let jt = self.density_vjp(params, x, h, w, probe)?;
        self.density_jvp(params, x, h, w, &jt)
    }
}

fn check_rows(x: &Array2<f64>, h: usize, w: usize) -> Result<()> {
    if x.nrows() != h * w {
        return Err(Error::Shape {
            expected: vec![h * w, x.ncols()],
            got: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// Nonnegativity and band checks on a field output.
pub fn check_output(out: &FieldOutput, heads: &HeadConfig) -> bool {
    let (lo, hi) = heads.band;
    let mut ok = out.rho.iter().all(|v| *v >= 0.0);
    Zip::from(&out.omega).and(&out.mask).for_each(|&o, &m| {
        ok &= if m { (lo..=hi).contains(&o) } else { o == 0.0 };
    });
    ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{ForwardModel, OperatorKind};
    use crate::objective::{LossWeights, Stage};
    use crate::physics::{FrequencyGrid, GridGeometry, LorentzianParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_field() -> NeuralField {
        let enc = EncoderConfig::default();
        NeuralField::new(MlpArch::small(enc.dim(), 16), enc, HeadConfig::default()).unwrap()
    }

    fn objective(op: OperatorKind, weights: &LossWeights, stage: Stage) -> Objective {
        let g = GridGeometry::new(8, 8, 20.0, 20.0).unwrap();
        let model = ForwardModel::build(&g, FrequencyGrid::default(), LorentzianParams::default()).unwrap();
        let mut rho = Array2::zeros((8, 8));
        rho[(2, 3)] = 1.0;
        rho[(5, 5)] = 0.7;
        let omega = Array2::from_elem((8, 8), 2.1);
        let obs = model.spectrum(op, &rho, &omega).unwrap();
        Objective::from_spectrum(model, op, &obs, weights, stage).unwrap()
    }

    #[test]
    fn stable_activations() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
        assert!(sigmoid(-20.0) < 3e-9);
    }

    #[test]
    fn outputs_are_nonnegative_and_in_band() {
        let f = small_field();
        for seed in 0..5 {
            let p: Vec<f64> = f.init(seed).iter().map(|v| v * 8.0).collect();
            let out = f.field_forward(&p, 8, 8, 6.0).unwrap();
            assert!(check_output(&out, &f.heads));
            let (k, _) = crate::objective::argmax(&out.rho);
            assert!(out.mask[k]);
        }
    }

    #[test]
    fn closed_gate_switches_density_off() {
        let f = small_field();
        let raw = ndarray::array![[2.0, -20.0, 0.0], [2.0, 0.0, 0.0]];
        let out = f.heads(raw, 1, 2);
        assert!(out.rho[(0, 0)] < softplus(2.0) * 3e-9);
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let f = small_field();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = f.features(8, 8, 7.5);
        for op in [OperatorKind::F1, OperatorKind::F2] {
            for stage in [Stage::Coarse, Stage::Fine] {
                let obj = objective(op, &LossWeights::default(), stage);
                let p = f.init(3);
                let (_, g, _) = f.param_gradient(&p, &x, &obj).unwrap();
                let loss = |q: &[f64]| {
                    let (out, _) = f.forward(q, &x, 8, 8).unwrap();
                    obj.evaluate(&out.rho, &out.omega).unwrap().total
                };
                let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                for _ in 0..30 {
                    let i = rng.random_range(0..p.len());
                    let h = 1e-6;
                    let (mut a, mut b) = (p.clone(), p.clone());
                    a[i] += h;
                    b[i] -= h;
                    let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                    let rel = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-2 * gmax);
                    assert!(rel < 1e-4, "{op} {stage:?} param {i}: fd {fd} analytic {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let f = small_field();
        let obj = objective(OperatorKind::F2, &LossWeights::zero(), Stage::Coarse);
        let x = f.features(8, 8, 3.0);
        let (loss, g, _) = f.param_gradient(&f.init(1), &x, &obj).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn off_support_larmor_logit_has_zero_gradient() {
        let f = small_field();
        let obj = objective(OperatorKind::F2, &LossWeights::default(), Stage::Coarse);
        let x = f.features(8, 8, 5.0);
        let p: Vec<f64> = f.init(2).iter().map(|v| v * 8.0).collect();
        let (_, tape) = f.forward(&p, &x, 8, 8).unwrap();
        let out = f.heads(tape.output.clone(), 8, 8);
        let (_, g) = obj.value_and_grad(&out.rho, &out.omega).unwrap();
        let d = f.head_backward(&out, &g.rho, &g.omega);
        let off: Vec<usize> = (0..64).filter(|k| !out.mask[(k / 8, k % 8)]).collect();
        assert!(!off.is_empty());
        for k in off {
            assert_eq!(d[(k, 2)], 0.0);
            let mut raw = out.raw.clone();
            raw[(k, 2)] += 3.0;
            let moved = f.heads(raw, 8, 8);
            assert_eq!(obj.evaluate(&moved.rho, &moved.omega).unwrap().total, obj.evaluate(&out.rho, &out.omega).unwrap().total);
        }
    }

    #[test]
    fn density_jvp_and_vjp_agree_with_jacobian() {
        let f = small_field();
        let x = f.features(8, 8, 4.0);
        let p = f.init(9);
        let jac = f.density_jacobian(&p, &x, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
        let u: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let jtv = f.density_vjp(&p, &x, 8, 8, &v).unwrap();
        let vflat = ndarray::Array1::from_iter(v.iter().copied());
        let want = jac.t().dot(&vflat);
        for (a, b) in jtv.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
        let ju = f.density_jvp(&p, &x, 8, 8, &u).unwrap();
        let want = jac.dot(&ndarray::Array1::from(u));
        for (a, b) in ju.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }
}
