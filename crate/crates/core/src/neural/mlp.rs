//! Coordinate MLP on a flat parameter vector, with a hand-written reverse pass
//! and a forward-mode tangent pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected tanh network. Layer `skip_layer` (0-based) receives the
/// previous activation concatenated with the encoded input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
    pub skip_layer: Option<usize>,
    pub output: usize,
}

impl Default for MlpArch {
    fn default() -> Self {
        Self {
            input: 50,
            hidden: 320,
            layers: 6,
            skip_layer: Some(2),
            output: 3,
        }
    }
}

impl MlpArch {
    /// A three-layer network of the given width for gradient and Jacobian probes.
    pub fn small(input: usize, width: usize) -> Self {
        Self {
            input,
            hidden: width,
            layers: 3,
            skip_layer: Some(1),
            output: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.hidden == 0 || self.input == 0 || self.output == 0 {
            return Err(Error::Config(format!("invalid network shape {self:?}")));
        }
        if let Some(k) = self.skip_layer {
            if k == 0 || k >= self.layers {
                return Err(Error::Config(format!("skip layer {k} must be in 1..{}", self.layers)));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let fan_in = if l == 0 {
                    self.input
                } else if Some(l) == self.skip_layer {
                    self.hidden + self.input
                } else {
                    self.hidden
                };
                let fan_out = if l + 1 == self.layers { self.output } else { self.hidden };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub arch: MlpArch,
    slots: Vec<Slot>,
}

/// Layer inputs and tanh activations retained for the reverse pass.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn new(arch: MlpArch) -> Result<Self> {
        arch.validate()?;
        let mut off = 0;
        let slots = arch
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let s = Slot {
                    w: off,
                    b: off + fan_in * fan_out,
                    fan_in,
                    fan_out,
                };
                off += fan_in * fan_out + fan_out;
                s
            })
            .collect();
        Ok(Self { arch, slots })
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    /// Uniform `+-1/sqrt(fan_in)` initialization of weights and biases.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0.0; self.param_count()];
        for s in &self.slots {
            let bound = 1.0 / (s.fan_in as f64).sqrt();
            for v in &mut p[s.w..s.b + s.fan_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    fn weight<'a>(&self, params: &'a [f64], l: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let s = self.slots[l];
        let w = ArrayView2::from_shape((s.fan_out, s.fan_in), &params[s.w..s.b]).expect("layout");
        let b = ArrayView1::from(&params[s.b..s.b + s.fan_out]);
        (w, b)
    }

    fn weight_mut<'a>(&self, params: &'a mut [f64], l: usize) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
        let s = self.slots[l];
        let (wpart, rest) = params[s.w..s.b + s.fan_out].split_at_mut(s.fan_in * s.fan_out);
        let w = ArrayViewMut2::from_shape((s.fan_out, s.fan_in), wpart).expect("layout");
        (w, ArrayViewMut1::from(rest))
    }

    fn check(&self, params: &[f64], x: &Array2<f64>) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape {
                expected: vec![self.param_count()],
                got: vec![params.len()],
            });
        }
        if x.ncols() != self.arch.input {
            return Err(Error::Shape {
                expected: vec![x.nrows(), self.arch.input],
                got: x.shape().to_vec(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(())
    }

    fn layer_input(&self, l: usize, prev: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
        if Some(l) == self.arch.skip_layer {
            concatenate(Axis(1), &[prev.view(), x.view()]).expect("row counts match")
        } else {
            prev.clone()
        }
    }

    /// Batched forward pass; rows of `x` are encoded coordinates.
    pub fn forward(&self, params: &[f64], x: &Array2<f64>) -> Result<Tape> {
        self.check(params, x)?;
        let n = x.nrows();
        let mut inputs = Vec::with_capacity(self.arch.layers);
        let mut cur = x.clone();
        for l in 0..self.arch.layers {
            let input = if l == 0 { x.clone() } else { self.layer_input(l, &cur, x) };
            let (w, b) = self.weight(params, l);
            let mut z = Array2::zeros((n, w.nrows()));
            general_mat_mul(1.0, &input, &w.t(), 0.0, &mut z);
            z += &b;
            if l + 1 < self.arch.layers {
                z.mapv_inplace(f64::tanh);
            }
            inputs.push(input);
            cur = z;
        }
        Ok(Tape { inputs, output: cur })
    }

    /// Reverse pass: accumulates `dL/dparams` for an upstream `d_out`.
    pub fn backward(&self, params: &[f64], tape: &Tape, d_out: &Array2<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.param_count()];
        let mut delta = d_out.clone();
        for l in (0..self.arch.layers).rev() {
            let input = &tape.inputs[l];
            {
                let (mut gw, mut gb) = self.weight_mut(&mut grad, l);
                general_mat_mul(1.0, &delta.t(), input, 0.0, &mut gw);
                gb.assign(&delta.sum_axis(Axis(0)));
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.weight(params, l);
            let mut d_in = Array2::zeros((delta.nrows(), w.ncols()));
            general_mat_mul(1.0, &delta, &w, 0.0, &mut d_in);
            // The previous activation occupies the leading columns of a skip input.
            let hidden = self.arch.hidden;
            let act = tape.inputs[l].slice(s![.., ..hidden]);
            let mut d_act = d_in.slice(s![.., ..hidden]).to_owned();
            ndarray::Zip::from(&mut d_act).and(&act).for_each(|d, &a| *d *= 1.0 - a * a);
            delta = d_act;
        }
        grad
    }

    /// Forward-mode pass: output and its directional derivative along `tangent`.
    pub fn jvp(&self, params: &[f64], x: &Array2<f64>, tangent: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check(params, x)?;
        if tangent.len() != params.len() {
            return Err(Error::Shape {
                expected: vec![params.len()],
                got: vec![tangent.len()],
            });
        }
        let n = x.nrows();
        let mut cur = x.clone();
        let mut dcur = Array2::<f64>::zeros(x.dim());
        for l in 0..self.arch.layers {
            let (input, dinput) = if l == 0 {
                (x.clone(), Array2::zeros(x.dim()))
            } else if Some(l) == self.arch.skip_layer {
                let zero = Array2::<f64>::zeros(x.dim());
                (
                    concatenate(Axis(1), &[cur.view(), x.view()]).expect("rows"),
                    concatenate(Axis(1), &[dcur.view(), zero.view()]).expect("rows"),
                )
            } else {
                (cur.clone(), dcur.clone())
            };
            let (w, b) = self.weight(params, l);
            let (dw, db) = self.weight(tangent, l);
            let mut z = Array2::zeros((n, w.nrows()));
            general_mat_mul(1.0, &input, &w.t(), 0.0, &mut z);
            z += &b;
            let mut dz = Array2::zeros((n, w.nrows()));
            general_mat_mul(1.0, &dinput, &w.t(), 0.0, &mut dz);
            general_mat_mul(1.0, &input, &dw.t(), 1.0, &mut dz);
            dz += &db;
            if l + 1 < self.arch.layers {
                z.mapv_inplace(f64::tanh);
                ndarray::Zip::from(&mut dz).and(&z).for_each(|d, &a| *d *= 1.0 - a * a);
            }
            cur = z;
            dcur = dz;
        }
        Ok((cur, dcur))
    }
}

pub fn global_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count() {
        let a = MlpArch::default();
        assert_eq!(a.param_count(), 444_163);
        assert_eq!(
            a.layer_dims(),
            vec![(50, 320), (320, 320), (370, 320), (320, 320), (320, 320), (320, 3)]
        );
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let m = Mlp::new(MlpArch::small(6, 8)).unwrap();
        let a = m.init(3);
        assert_eq!(a, m.init(3));
        assert_ne!(a, m.init(4));
        let bound = 1.0 / 6f64.sqrt();
        assert!(a[..48].iter().all(|v| v.abs() <= bound));
    }

    fn loss(m: &Mlp, p: &[f64], x: &Array2<f64>, probe: &Array2<f64>) -> f64 {
        let t = m.forward(p, x).unwrap();
        (&t.output * probe).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = Mlp::new(MlpArch::small(5, 7)).unwrap();
        let p = m.init(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((9, 5), |_| rng.random_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((9, 3), |_| rng.random_range(-1.0..1.0));
        let t = m.forward(&p, &x).unwrap();
        let g = m.backward(&p, &t, &probe);
        for i in (0..p.len()).step_by(7) {
            let h = 1e-6;
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let fd = (loss(&m, &a, &x, &probe) - loss(&m, &b, &x, &probe)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7 * (1.0 + g[i].abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn jvp_is_dual_to_backward() {
        let m = Mlp::new(MlpArch::small(5, 6)).unwrap();
        let p = m.init(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_fn((11, 5), |_| rng.random_range(-1.0..1.0));
        let u: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = Array2::from_shape_fn((11, 3), |_| rng.random_range(-1.0..1.0));
        let (_, ju) = m.jvp(&p, &x, &u).unwrap();
        let t = m.forward(&p, &x).unwrap();
        let jtv = m.backward(&p, &t, &v);
        let lhs = (&ju * &v).sum();
        let rhs: f64 = jtv.iter().zip(&u).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let m = Mlp::new(MlpArch::small(2, 3)).unwrap();
        let mut p = m.init(0);
        p[4] = f64::NAN;
        assert!(matches!(m.forward(&p, &Array2::zeros((1, 2))), Err(Error::NonFinite(_))));
    }
}
