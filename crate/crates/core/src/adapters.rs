//! Residual bottleneck adapters: gated (SwiGLU), linear, and logit-space.
//!
//! Every adapter is applied as `out = x + adapter(x)`. The output-side
//! matrix starts at zero, so a fresh adapter is an exact identity.
//! Forward and backward run in `f64` on top of `f32` storage.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, silu, silu_grad, Mat};

const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Swiglu,
    Linear,
    Logit,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [AdapterKind::Swiglu, AdapterKind::Linear, AdapterKind::Logit];

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Swiglu => "swiglu",
            AdapterKind::Linear => "linear",
            AdapterKind::Logit => "logit",
        }
    }

    /// Matrices per bottleneck unit: `param_count = factor · d_inner · dim`.
    pub fn matrix_count(self) -> usize {
        match self {
            AdapterKind::Swiglu => 3,
            AdapterKind::Linear | AdapterKind::Logit => 2,
        }
    }

    /// 64 / 96 mirror the parameter-matched pair at d_model 4096; the logit
    /// bottleneck is narrow because its input is the whole vocabulary.
    pub fn default_d_inner(self) -> usize {
        match self {
            AdapterKind::Swiglu => 64,
            AdapterKind::Linear => 96,
            AdapterKind::Logit => 8,
        }
    }

    /// Whether the adapter reads hidden states (as opposed to logits).
    pub fn is_hidden_state(self) -> bool {
        !matches!(self, AdapterKind::Logit)
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swiglu" => Ok(AdapterKind::Swiglu),
            "linear" => Ok(AdapterKind::Linear),
            "logit" => Ok(AdapterKind::Logit),
            other => Err(Error::Config(format!("unknown adapter kind `{other}`"))),
        }
    }
}

/// Gate nonlinearity for the SwiGLU adapter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    #[default]
    Silu,
    Sigmoid,
}

impl GateActivation {
    fn eval(self, x: f64) -> f64 {
        match self {
            GateActivation::Silu => silu(x),
            GateActivation::Sigmoid => sigmoid(x),
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            GateActivation::Silu => silu_grad(x),
            GateActivation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

impl fmt::Display for GateActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateActivation::Silu => "silu",
            GateActivation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for GateActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(GateActivation::Silu),
            "sigmoid" => Ok(GateActivation::Sigmoid),
            other => Err(Error::Config(format!("unknown gate activation `{other}`"))),
        }
    }
}

/// `param_count(swiglu) = 3·d_inner·d_model`, `param_count(linear) = 2·d_inner·d_model`.
pub fn param_count(kind: AdapterKind, dim: usize, d_inner: usize) -> usize {
    kind.matrix_count() * d_inner * dim
}

/// Inner width whose parameter count is closest to `budget` at this `dim`.
pub fn d_inner_for_budget(kind: AdapterKind, dim: usize, budget: usize) -> usize {
    let per_unit = kind.matrix_count() * dim;
    ((budget as f64 / per_unit as f64).round() as usize).max(1)
}

/// `(act(h·W_gᵀ) ⊙ (h·W_uᵀ))·W_dᵀ`
#[derive(Clone, Debug, PartialEq)]
pub struct SwigluAdapter {
    pub w_gate: Mat,
    pub w_up: Mat,
    pub w_down: Mat,
    pub gate: GateActivation,
}

/// `(h·W_downᵀ)·W_upᵀ`. The logit-space adapter has the same form over logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAdapter {
    pub w_down: Mat,
    pub w_up: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    Swiglu(SwigluAdapter),
    Linear(LinearAdapter),
    /// Linear bottleneck over vocabulary logits.
    Logit(LinearAdapter),
}

/// Gradients for every adapter tensor, in [`Adapter::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl AdapterGrads {
    pub fn zeros_like(adapter: &Adapter) -> Self {
        Self { tensors: adapter.tensors().iter().map(|(_, m)| vec![0.0; m.data().len()]).collect() }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.concat()
    }

    pub fn to_f32(&self) -> Vec<Vec<f32>> {
        self.tensors.iter().map(|t| t.iter().map(|&g| g as f32).collect()).collect()
    }
}

fn outer_acc(acc: &mut [f64], left: &[f64], right: &[f64]) {
    let cols = right.len();
    for (i, &l) in left.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        for (a, &r) in acc[i * cols..(i + 1) * cols].iter_mut().zip(right) {
            *a += l * r;
        }
    }
}

impl SwigluAdapter {
    fn delta(&self, h: &[f64]) -> Vec<f64> {
        let g = self.w_gate.matvec_f64(h);
        let u = self.w_up.matvec_f64(h);
        let z: Vec<f64> = g.iter().zip(&u).map(|(&g, &u)| self.gate.eval(g) * u).collect();
        self.w_down.matvec_f64(&z)
    }

    fn backward_into(&self, h: &[f64], upstream: &[f64], grads: &mut [Vec<f64>]) {
        let g = self.w_gate.matvec_f64(h);
        let u = self.w_up.matvec_f64(h);
        let a: Vec<f64> = g.iter().map(|&x| self.gate.eval(x)).collect();
        let z: Vec<f64> = a.iter().zip(&u).map(|(a, u)| a * u).collect();
        let dz = self.w_down.t_matvec_f64(upstream);
        let du: Vec<f64> = dz.iter().zip(&a).map(|(d, a)| d * a).collect();
        let dg: Vec<f64> =
            dz.iter().zip(&u).zip(&g).map(|((d, u), &g)| d * u * self.gate.grad(g)).collect();
        outer_acc(&mut grads[0], &dg, h);
        outer_acc(&mut grads[1], &du, h);
        outer_acc(&mut grads[2], upstream, &z);
    }
}

impl LinearAdapter {
    fn delta(&self, x: &[f64]) -> Vec<f64> {
        self.w_up.matvec_f64(&self.w_down.matvec_f64(x))
    }

    fn backward_into(&self, x: &[f64], upstream: &[f64], grads: &mut [Vec<f64>]) {
        let z = self.w_down.matvec_f64(x);
        let dz = self.w_up.t_matvec_f64(upstream);
        outer_acc(&mut grads[0], &dz, x);
        outer_acc(&mut grads[1], upstream, &z);
    }
}

impl Adapter {
    /// Input-side matrices ~ N(0, 0.02²) from `seed`; output-side matrix zero.
    pub fn init(kind: AdapterKind, dim: usize, d_inner: usize, seed: u64) -> Result<Self> {
        Self::init_with_gate(kind, dim, d_inner, seed, GateActivation::Silu)
    }

    pub fn init_with_gate(
        kind: AdapterKind,
        dim: usize,
        d_inner: usize,
        seed: u64,
        gate: GateActivation,
    ) -> Result<Self> {
        if dim == 0 || d_inner == 0 {
            return Err(Error::Config(format!("adapter dims must be positive, got {dim}/{d_inner}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match kind {
            AdapterKind::Swiglu => {
                let w_gate = Mat::gaussian(d_inner, dim, INIT_STD, &mut rng);
                let w_up = Mat::gaussian(d_inner, dim, INIT_STD, &mut rng);
                Adapter::Swiglu(SwigluAdapter { w_gate, w_up, w_down: Mat::zeros(dim, d_inner), gate })
            }
            AdapterKind::Linear | AdapterKind::Logit => {
                let lin = LinearAdapter {
                    w_down: Mat::gaussian(d_inner, dim, INIT_STD, &mut rng),
                    w_up: Mat::zeros(dim, d_inner),
                };
                if kind == AdapterKind::Linear {
                    Adapter::Linear(lin)
                } else {
                    Adapter::Logit(lin)
                }
            }
        })
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Swiglu(_) => AdapterKind::Swiglu,
            Adapter::Linear(_) => AdapterKind::Linear,
            Adapter::Logit(_) => AdapterKind::Logit,
        }
    }

    /// `d_model` for hidden-state adapters, `vocab_size` for logit adapters.
    pub fn input_dim(&self) -> usize {
        match self {
            Adapter::Swiglu(a) => a.w_gate.cols(),
            Adapter::Linear(a) | Adapter::Logit(a) => a.w_down.cols(),
        }
    }

    pub fn d_inner(&self) -> usize {
        match self {
            Adapter::Swiglu(a) => a.w_gate.rows(),
            Adapter::Linear(a) | Adapter::Logit(a) => a.w_down.rows(),
        }
    }

    pub fn gate(&self) -> Option<GateActivation> {
        match self {
            Adapter::Swiglu(a) => Some(a.gate),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        param_count(self.kind(), self.input_dim(), self.d_inner())
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        match self {
            Adapter::Swiglu(a) => vec![("w_gate", &a.w_gate), ("w_up", &a.w_up), ("w_down", &a.w_down)],
            Adapter::Linear(a) | Adapter::Logit(a) => vec![("w_down", &a.w_down), ("w_up", &a.w_up)],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        match self {
            Adapter::Swiglu(a) => vec![&mut a.w_gate, &mut a.w_up, &mut a.w_down],
            Adapter::Linear(a) | Adapter::Logit(a) => vec![&mut a.w_down, &mut a.w_up],
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, m)| m.data().iter().map(|&v| v as f64)).collect()
    }

    /// True when the output-side matrix is all zeros (the adapter is an identity).
    pub fn is_identity(&self) -> bool {
        match self {
            Adapter::Swiglu(a) => a.w_down.is_zero(),
            Adapter::Linear(a) | Adapter::Logit(a) => a.w_up.is_zero(),
        }
    }

    fn check_dim(&self, n: usize, what: &str) -> Result<()> {
        if n != self.input_dim() {
            return Err(Error::Shape(format!(
                "{} adapter expects {} inputs, {what} has {n}",
                self.kind(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// The correction alone, `adapter(x)`, in `f64`.
    pub fn delta(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_dim(x.len(), "input")?;
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        Ok(match self {
            Adapter::Swiglu(a) => a.delta(&x),
            Adapter::Linear(a) | Adapter::Logit(a) => a.delta(&x),
        })
    }

    /// `x + adapter(x)`.
    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        let delta = self.delta(x)?;
        Ok(x.iter().zip(&delta).map(|(&v, &d)| (v as f64 + d) as f32).collect())
    }

    /// Accumulates `∂⟨upstream, apply(x)⟩/∂θ` into `grads`. The input is
    /// treated as a constant; no gradient flows back into it.
    pub fn backward_into(&self, x: &[f32], upstream: &[f64], grads: &mut AdapterGrads) -> Result<()> {
        self.check_dim(x.len(), "input")?;
        self.check_dim(upstream.len(), "upstream gradient")?;
        if upstream.iter().all(|&u| u == 0.0) {
            return Ok(());
        }
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        match self {
            Adapter::Swiglu(a) => a.backward_into(&x, upstream, &mut grads.tensors),
            Adapter::Linear(a) | Adapter::Logit(a) => a.backward_into(&x, upstream, &mut grads.tensors),
        }
        Ok(())
    }

    pub fn backward(&self, x: &[f32], upstream: &[f64]) -> Result<AdapterGrads> {
        let mut grads = AdapterGrads::zeros_like(self);
        self.backward_into(x, upstream, &mut grads)?;
        Ok(grads)
    }

    fn kind_code(&self) -> u8 {
        match self {
            Adapter::Swiglu(a) if a.gate == GateActivation::Sigmoid => 3,
            Adapter::Swiglu(_) => 0,
            Adapter::Linear(_) => 1,
            Adapter::Logit(_) => 2,
        }
    }

    /// `ADP1`: magic, `u8` kind (0 swiglu/SiLU, 1 linear, 2 logit,
    /// 3 swiglu/sigmoid), `u32` input dim, `u32` d_inner, named tensors.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BinWriter::new(w);
        w.bytes(b"ADP1")?;
        w.u8(self.kind_code())?;
        w.u32(self.input_dim() as u32)?;
        w.u32(self.d_inner() as u32)?;
        for (name, m) in self.tensors() {
            w.tensor(name, m)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BinReader::new(r, "adapter");
        r.magic(b"ADP1")?;
        let code = r.u8()?;
        let dim = r.u32()? as usize;
        let inner = r.u32()? as usize;
        let mut t = |name: &str, shape: (usize, usize)| -> Result<Mat> {
            let m = r.tensor(name)?;
            if m.shape() != shape {
                return Err(Error::Format {
                    what: "adapter",
                    msg: format!("tensor `{name}` has shape {:?}, expected {shape:?}", m.shape()),
                });
            }
            Ok(m)
        };
        let adapter = match code {
            0 | 3 => Adapter::Swiglu(SwigluAdapter {
                w_gate: t("w_gate", (inner, dim))?,
                w_up: t("w_up", (inner, dim))?,
                w_down: t("w_down", (dim, inner))?,
                gate: if code == 3 { GateActivation::Sigmoid } else { GateActivation::Silu },
            }),
            1 | 2 => {
                let lin = LinearAdapter { w_down: t("w_down", (inner, dim))?, w_up: t("w_up", (dim, inner))? };
                if code == 1 {
                    Adapter::Linear(lin)
                } else {
                    Adapter::Logit(lin)
                }
            }
            other => return Err(r.err(format!("unknown adapter kind code {other}"))),
        };
        r.expect_eof()?;
        Ok(adapter)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(param_count(AdapterKind::Swiglu, 4096, 64), 786_432);
        assert_eq!(param_count(AdapterKind::Linear, 4096, 96), 786_432);
        assert_eq!(param_count(AdapterKind::Swiglu, 16, 4), 192);
        assert_eq!(d_inner_for_budget(AdapterKind::Swiglu, 2560, 786_432), 102);
        assert_eq!(d_inner_for_budget(AdapterKind::Linear, 4096, 786_432), 96);
    }

    proptest! {
        #[test]
        fn three_to_two_inner_ratio_matches_counts(d in 1usize..5000, k in 1usize..64) {
            prop_assert_eq!(param_count(AdapterKind::Swiglu, d, 2 * k), param_count(AdapterKind::Linear, d, 3 * k));
        }

        #[test]
        fn fresh_adapters_are_identity(seed in any::<u64>(), h in proptest::collection::vec(-20.0f32..20.0, 16)) {
            for kind in AdapterKind::ALL {
                let a = Adapter::init(kind, 16, 4, seed).unwrap();
                let out = a.apply(&h).unwrap();
                prop_assert!(out.iter().zip(&h).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn linear_hand_example() {
        let a = Adapter::Linear(LinearAdapter {
            w_down: Mat::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            w_up: Mat::from_rows(&[vec![0.0], vec![1.0]]).unwrap(),
        });
        assert_eq!(a.apply(&[3.0, 5.0]).unwrap(), vec![3.0, 8.0]);
    }

    #[test]
    fn swiglu_hand_example() {
        // d_model 2, d_inner 1: g = 0.5, u = 2, silu(0.5) = 0.5·σ(0.5)
        let a = Adapter::Swiglu(SwigluAdapter {
            w_gate: Mat::from_rows(&[vec![0.5, 0.0]]).unwrap(),
            w_up: Mat::from_rows(&[vec![0.0, 2.0]]).unwrap(),
            w_down: Mat::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
            gate: GateActivation::Silu,
        });
        let silu_half = 0.311_229_665_600_927_3_f64;
        let z = silu_half * 2.0;
        let out = a.apply(&[1.0, 1.0]).unwrap();
        assert!((out[0] as f64 - (1.0 + z)).abs() < 1e-6);
        assert!((out[1] as f64 - (1.0 - z)).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let a = Adapter::init(AdapterKind::Swiglu, 8, 2, 0).unwrap();
        assert!(a.apply(&[0.0; 7]).is_err());
        assert!(a.backward(&[0.0; 8], &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        for kind in AdapterKind::ALL {
            let mut a = Adapter::init(kind, 6, 3, 1).unwrap();
            for m in a.tensors_mut() {
                m.data_mut().iter_mut().for_each(|v| *v += 0.1);
            }
            let g = a.backward(&[0.5; 6], &[0.0; 6]).unwrap();
            assert_eq!(g.norm(), 0.0);
        }
    }

    #[test]
    fn linear_backward_hand_outer_products() {
        // d_model 2, d_inner 1. z = W_down·h = 3; dz = W_upᵀ·δ = δ₁.
        let a = Adapter::Linear(LinearAdapter {
            w_down: Mat::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            w_up: Mat::from_rows(&[vec![0.0], vec![1.0]]).unwrap(),
        });
        let g = a.backward(&[3.0, 5.0], &[2.0, -1.0]).unwrap();
        assert_eq!(g.tensors[0], vec![-3.0, -5.0]); // dW_down = dz·hᵀ
        assert_eq!(g.tensors[1], vec![6.0, -3.0]); // dW_up = δ·zᵀ
    }

    #[test]
    fn seeds_control_input_side_weights() {
        let a = Adapter::init(AdapterKind::Linear, 8, 4, 5).unwrap();
        assert_eq!(a, Adapter::init(AdapterKind::Linear, 8, 4, 5).unwrap());
        assert_ne!(a, Adapter::init(AdapterKind::Linear, 8, 4, 6).unwrap());
        assert!(a.is_identity());
    }

    #[test]
    fn adp1_round_trip_all_kinds() {
        for (kind, gate) in [
            (AdapterKind::Swiglu, GateActivation::Silu),
            (AdapterKind::Swiglu, GateActivation::Sigmoid),
            (AdapterKind::Linear, GateActivation::Silu),
            (AdapterKind::Logit, GateActivation::Silu),
        ] {
            let a = Adapter::init_with_gate(kind, 10, 3, 9, gate).unwrap();
            let mut buf = Vec::new();
            a.write_to(&mut buf).unwrap();
            assert_eq!(&buf[..4], b"ADP1");
            assert_eq!(Adapter::read_from(buf.as_slice()).unwrap(), a);
        }
    }
}
