//! Finite-difference certification of the adapter gradients.
//!
//! The numeric side runs an independent `f64` forward over a flat parameter
//! vector, so it shares no code with [`Adapter::delta`] or
//! [`Adapter::backward_into`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapters::{Adapter, AdapterKind, GateActivation};
use crate::error::Result;
use crate::numerics::{finite_diff, max_relative_error, Mat};
use crate::trainer::{reproduce_gradient_bug, GradientBugReport};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub d_model: usize,
    pub d_inner: usize,
    pub vocab: usize,
    pub logit_d_inner: usize,
    pub seeds: Vec<u64>,
    pub eps: f64,
    /// `None` picks `max(1e-4, 10·eps²)`.
    pub tolerance: Option<f64>,
    /// Inputs per objective.
    pub samples: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            d_model: 16,
            d_inner: 4,
            vocab: 64,
            logit_d_inner: 8,
            seeds: (0..5).collect(),
            eps: 1e-3,
            tolerance: None,
            samples: 3,
        }
    }
}

impl GradcheckOptions {
    pub fn tolerance(&self) -> f64 {
        self.tolerance.unwrap_or_else(|| (10.0 * self.eps * self.eps).max(1e-4))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckCase {
    pub kind: AdapterKind,
    pub gate: Option<GateActivation>,
    pub seed: u64,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub bug: GradientBugReport,
    pub bug_passed: bool,
    pub tolerance: f64,
    pub eps: f64,
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.bug_passed && self.cases.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let status = |ok: bool| if ok { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "gradient bug reproduction: correct norm {:.4}, broken norm {:.4}, loss {} / {}  {}\n",
            self.bug.correct_norm,
            self.bug.broken_norm,
            self.bug.correct_loss,
            self.bug.broken_loss,
            status(self.bug_passed)
        ));
        out.push_str(&format!("finite differences (eps {:e}, tolerance {:e}):\n", self.eps, self.tolerance));
        for c in &self.cases {
            let name = match c.gate {
                Some(g) => format!("{}/{}", c.kind, g),
                None => c.kind.to_string(),
            };
            out.push_str(&format!(
                "  {name:<16} seed {:<3} params {:<5} max rel err {:.3e}  {}\n",
                c.seed,
                c.n_params,
                c.max_rel_error,
                status(c.passed)
            ));
        }
        out
    }
}

/// Independent forward of `x + adapter(x)` from flat parameters laid out in
/// [`Adapter::tensors`] order.
fn reference_apply(kind: AdapterKind, gate: GateActivation, dim: usize, inner: usize, p: &[f64], x: &[f64]) -> Vec<f64> {
    let mat = |off: usize, rows: usize, cols: usize, v: &[f64]| -> Vec<f64> {
        (0..rows).map(|r| (0..cols).map(|c| p[off + r * cols + c] * v[c]).sum()).collect()
    };
    let delta = match kind {
        AdapterKind::Swiglu => {
            let g = mat(0, inner, dim, x);
            let u = mat(inner * dim, inner, dim, x);
            let z: Vec<f64> = g
                .iter()
                .zip(&u)
                .map(|(&g, &u)| {
                    let a = match gate {
                        GateActivation::Silu => g / (1.0 + (-g).exp()),
                        GateActivation::Sigmoid => 1.0 / (1.0 + (-g).exp()),
                    };
                    a * u
                })
                .collect();
            mat(2 * inner * dim, dim, inner, &z)
        }
        AdapterKind::Linear | AdapterKind::Logit => {
            let z = mat(0, inner, dim, x);
            mat(inner * dim, dim, inner, &z)
        }
    };
    x.iter().zip(&delta).map(|(a, b)| a + b).collect()
}

fn log_softmax_at(logits: &[f64], t: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits[t] - lse
}

struct Problem {
    inputs: Vec<Vec<f32>>,
    targets: Vec<usize>,
    /// Projection for hidden-state kinds; unused for logit adapters.
    embed: Mat,
}

/// `Σ_s log_softmax(head(apply(x_s)))[t_s]`, where the head is the
/// projection for hidden-state adapters and the identity for logit adapters.
fn reference_objective(kind: AdapterKind, gate: GateActivation, dim: usize, inner: usize, prob: &Problem, p: &[f64]) -> f64 {
    prob.inputs
        .iter()
        .zip(&prob.targets)
        .map(|(x, &t)| {
            let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let y = reference_apply(kind, gate, dim, inner, p, &x);
            let logits = if kind.is_hidden_state() { prob.embed.matvec_f64(&y) } else { y };
            log_softmax_at(&logits, t)
        })
        .sum()
}

fn analytic_gradient(adapter: &Adapter, prob: &Problem) -> Result<Vec<f64>> {
    let mut grads = crate::adapters::AdapterGrads::zeros_like(adapter);
    for (x, &t) in prob.inputs.iter().zip(&prob.targets) {
        let delta = adapter.delta(x)?;
        let y: Vec<f64> = x.iter().zip(&delta).map(|(&a, b)| a as f64 + b).collect();
        let logits = if adapter.kind().is_hidden_state() { prob.embed.matvec_f64(&y) } else { y };
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        let mut dlogits: Vec<f64> = logits.iter().map(|v| -(v - m).exp() / z).collect();
        dlogits[t] += 1.0;
        let upstream = if adapter.kind().is_hidden_state() { prob.embed.t_matvec_f64(&dlogits) } else { dlogits };
        adapter.backward_into(x, &upstream, &mut grads)?;
    }
    Ok(grads.flatten())
}

/// An adapter with every tensor randomised, so that no gradient is
/// trivially zero (a fresh adapter's zero output matrix would hide the
/// input-side gradients). Small weights keep the third derivatives, and so
/// the central-difference truncation error, low enough for `eps = 1e-2`.
fn random_adapter(kind: AdapterKind, gate: GateActivation, dim: usize, inner: usize, rng: &mut ChaCha8Rng) -> Result<Adapter> {
    let mut a = Adapter::init_with_gate(kind, dim, inner, 0, gate)?;
    for m in a.tensors_mut() {
        *m = Mat::gaussian(m.rows(), m.cols(), 0.1, rng);
    }
    Ok(a)
}

/// Checks one (kind, gate, seed) combination.
pub fn check_case(kind: AdapterKind, gate: GateActivation, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dim, inner) = if kind.is_hidden_state() { (opts.d_model, opts.d_inner) } else { (opts.vocab, opts.logit_d_inner) };
    let adapter = random_adapter(kind, gate, dim, inner, &mut rng)?;
    let head_rows = if kind.is_hidden_state() { opts.vocab } else { 1 };
    let prob = Problem {
        inputs: (0..opts.samples).map(|_| Mat::gaussian(1, dim, 1.0, &mut rng).into_data()).collect(),
        targets: (0..opts.samples).map(|s| (seed as usize * 7 + s * 13) % if kind.is_hidden_state() { opts.vocab } else { dim }).collect(),
        embed: Mat::gaussian(head_rows, opts.d_model, 0.5, &mut rng),
    };
    let analytic = analytic_gradient(&adapter, &prob)?;
    let numeric = finite_diff(|p| reference_objective(kind, gate, dim, inner, &prob, p), &adapter.flat_params(), opts.eps)?;
    let err = max_relative_error(&analytic, &numeric);
    Ok(GradcheckCase {
        kind,
        gate: (kind == AdapterKind::Swiglu).then_some(gate),
        seed,
        n_params: analytic.len(),
        max_rel_error: err,
        passed: err <= opts.tolerance(),
    })
}

/// The gradient-bug reproduction plus finite-difference checks over every
/// adapter kind (and both SwiGLU gates) for each seed.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let bug = reproduce_gradient_bug();
    let bug_passed =
        (bug.correct_norm - 3f64.sqrt()).abs() <= 1e-4 && bug.broken_norm == 0.0 && bug.correct_loss == bug.broken_loss;
    let combos = [
        (AdapterKind::Swiglu, GateActivation::Silu),
        (AdapterKind::Swiglu, GateActivation::Sigmoid),
        (AdapterKind::Linear, GateActivation::Silu),
        (AdapterKind::Logit, GateActivation::Silu),
    ];
    let mut cases = Vec::new();
    for &(kind, gate) in &combos {
        for &seed in &opts.seeds {
            cases.push(check_case(kind, gate, seed, opts)?);
        }
    }
    Ok(GradcheckReport { bug, bug_passed, tolerance: opts.tolerance(), eps: opts.eps, cases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid;

    #[test]
    fn reference_gate_matches_library_sigmoid() {
        for x in [-3.0, -0.5, 0.0, 0.5, 4.0] {
            let r = reference_apply(AdapterKind::Swiglu, GateActivation::Sigmoid, 1, 1, &[x, 1.0, 1.0], &[1.0]);
            assert!((r[0] - 1.0 - sigmoid(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn reference_matches_library_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in AdapterKind::ALL {
            let a = random_adapter(kind, GateActivation::Silu, 5, 2, &mut rng).unwrap();
            let x = Mat::gaussian(1, 5, 1.0, &mut rng).into_data();
            let lib = a.apply(&x).unwrap();
            let xr: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let r = reference_apply(kind, GateActivation::Silu, 5, 2, &a.flat_params(), &xr);
            for (l, r) in lib.iter().zip(&r) {
                assert!((*l as f64 - r).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn default_suite_passes() {
        let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.cases.len(), 20);
    }

    #[test]
    fn coarse_step_passes_looser_tolerance() {
        let report = run_gradcheck(&GradcheckOptions { eps: 1e-2, ..Default::default() }).unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn tolerance_follows_eps() {
        let o = GradcheckOptions { eps: 1e-2, ..Default::default() };
        assert!((o.tolerance() - 1e-3).abs() < 1e-15);
        assert_eq!(GradcheckOptions::default().tolerance(), 1e-4);
    }
}
