//! Minimal reproduction of the detached-parameter gradient bug.
//!
//! A tiny reverse-mode tape stands in for an autodiff framework. The
//! differentiated inputs are tape leaves; `Module::update` copies plain
//! values into *new* leaves, which is exactly what happens when a parameter
//! dictionary is differentiated instead of the module that owns the weights.

use serde::Serialize;

#[derive(Clone, Copy, Debug)]
struct Var(usize);

#[derive(Default)]
struct Tape {
    values: Vec<f64>,
    /// Each node's parents with the local partial derivative.
    parents: Vec<Vec<(usize, f64)>>,
}

impl Tape {
    fn leaf(&mut self, v: f64) -> Var {
        self.values.push(v);
        self.parents.push(Vec::new());
        Var(self.values.len() - 1)
    }

    fn value(&self, v: Var) -> f64 {
        self.values[v.0]
    }

    fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = self.leaf(va * vb);
        self.parents[out.0] = vec![(a.0, vb), (b.0, va)];
        out
    }

    fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.leaf(self.value(a) + self.value(b));
        self.parents[out.0] = vec![(a.0, 1.0), (b.0, 1.0)];
        out
    }

    fn grad(&self, out: Var, wrt: &[Var]) -> Vec<f64> {
        let mut adj = vec![0.0; self.values.len()];
        adj[out.0] = 1.0;
        for node in (0..=out.0).rev() {
            let a = adj[node];
            for &(p, d) in &self.parents[node] {
                adj[p] += a * d;
            }
        }
        wrt.iter().map(|v| adj[v.0]).collect()
    }
}

/// A bias-free 3→1 linear layer whose weights live on the tape.
struct Module {
    weight: Vec<Var>,
}

impl Module {
    fn forward(&self, tape: &mut Tape, x: &[f64]) -> Var {
        let mut acc = tape.leaf(0.0);
        for (&w, &xi) in self.weight.iter().zip(x) {
            let xv = tape.leaf(xi);
            let prod = tape.mul(w, xv);
            acc = tape.add(acc, prod);
        }
        acc
    }

    /// Loads plain values; the new weights are fresh leaves with no history.
    fn update(&mut self, tape: &mut Tape, params: &[f64]) {
        self.weight = params.iter().map(|&p| tape.leaf(p)).collect();
    }
}

/// Differentiates `loss` with respect to leaves holding `params`.
fn value_and_grad(params: &[f64], loss: impl FnOnce(&mut Tape, &[Var]) -> Var) -> (f64, Vec<f64>) {
    let mut tape = Tape::default();
    let inputs: Vec<Var> = params.iter().map(|&p| tape.leaf(p)).collect();
    let out = loss(&mut tape, &inputs);
    (tape.value(out), tape.grad(out, &inputs))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientBugReport {
    pub correct_loss: f64,
    pub correct_norm: f64,
    pub broken_loss: f64,
    pub broken_norm: f64,
}

/// Runs both call patterns on `sum(W·[1,1,1])`: differentiating through the
/// module's own weights (norm √3), and through a detached parameter copy
/// (norm 0 with an unchanged loss).
pub fn reproduce_gradient_bug() -> GradientBugReport {
    let weights = [0.25, -0.5, 0.75];
    let x = [1.0, 1.0, 1.0];
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();

    let (correct_loss, g) = value_and_grad(&weights, |tape, params| {
        let module = Module { weight: params.to_vec() };
        module.forward(tape, &x)
    });
    let correct_norm = norm(&g);

    let (broken_loss, g) = value_and_grad(&weights, |tape, params| {
        let mut module = Module { weight: Vec::new() };
        let snapshot: Vec<f64> = params.iter().map(|&p| tape.value(p)).collect();
        module.update(tape, &snapshot);
        module.forward(tape, &x)
    });
    let broken_norm = norm(&g);

    GradientBugReport { correct_loss, correct_norm, broken_loss, broken_norm }
}
