use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AdamW hyperparameters. Weight decay is decoupled: it scales the
/// parameters directly and never enters the moment estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment accumulators, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }
}

impl AdamW {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, ..Self::default() }
    }

    /// One in-place update of every tensor in `params`.
    pub fn step(
        &self,
        params: &mut [&mut [f32]],
        grads: &[&[f32]],
        state: &mut OptimizerState,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, {} gradients, {} optimizer slots",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != state.m[i].len() {
                return Err(Error::Shape(format!(
                    "tensor {i}: param {} vs grad {} vs state {}",
                    p.len(),
                    g.len(),
                    state.m[i].len()
                )));
            }
        }

        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let pj = p[j] as f64 * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                p[j] = pj as f32;
            }
        }
        Ok(())
    }
}

/// L2 norm over every entry of every tensor.
pub fn global_norm(grads: &[&[f32]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f32]], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x as f64 * x as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = (*x as f64 * scale) as f32;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_grad_applies_only_decoupled_decay() {
        let opt = AdamW::with_lr(0.1, 0.01);
        let mut p = vec![2.0f32, -4.0];
        let g = vec![0.0f32; 2];
        let mut st = OptimizerState::new(&[2]);
        opt.step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert_eq!(p, vec![(2.0f64 * 0.999) as f32, (-4.0f64 * 0.999) as f32]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g, v̂ = g², so Δ = lr·g/(|g| + eps).
        let opt = AdamW::with_lr(0.1, 0.0);
        for &(p0, g) in &[(1.0f32, 0.5f32), (1.0, -3.0), (-0.25, 1e-3)] {
            let mut p = vec![p0];
            let mut st = OptimizerState::new(&[1]);
            opt.step(&mut [&mut p], &[&[g]], &mut st).unwrap();
            let gd = g as f64;
            let expected = p0 as f64 - 0.1 * gd / (gd.abs() + 1e-8);
            assert!((p[0] as f64 - expected).abs() < 1e-7, "{p0} {g}: {} vs {expected}", p[0]);
        }
    }

    #[test]
    fn two_identical_steps_keep_moving_against_grad() {
        // Hand-rolled: step 2 has m̂ = g and v̂ = g² again, so each step moves lr.
        let opt = AdamW::with_lr(0.1, 0.0);
        let mut p = vec![1.0f32];
        let mut st = OptimizerState::new(&[1]);
        opt.step(&mut [&mut p], &[&[0.5]], &mut st).unwrap();
        let after_one = p[0];
        opt.step(&mut [&mut p], &[&[0.5]], &mut st).unwrap();
        assert!(after_one < 1.0 && p[0] < after_one);
        assert!((after_one - 0.9).abs() < 1e-6);
        assert!((p[0] - 0.8).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let opt = AdamW::default();
        let mut p = vec![0.0f32; 3];
        let mut st = OptimizerState::new(&[3]);
        assert!(opt.step(&mut [&mut p], &[&[0.0; 2]], &mut st).is_err());
        let mut st2 = OptimizerState::new(&[4]);
        assert!(opt.step(&mut [&mut p], &[&[0.0; 3]], &mut st2).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![0.3f32, 0.4];
        assert!((clip_global_norm(&mut [&mut g], 1.0) - 0.5).abs() < 1e-7);
        assert_eq!(g, vec![0.3, 0.4]);

        let mut g = vec![3.0f32, 4.0];
        assert_eq!(clip_global_norm(&mut [&mut g], 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-7 && (g[1] - 0.8).abs() < 1e-7);

        let mut g = vec![0.0f32; 5];
        assert_eq!(clip_global_norm(&mut [&mut g], 1.0), 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn adamw_identity_without_grad_or_decay(p in proptest::collection::vec(-10.0f32..10.0, 1..16), lr in 1e-5f64..1.0) {
            let opt = AdamW::with_lr(lr, 0.0);
            let mut q = p.clone();
            let g = vec![0.0f32; p.len()];
            let mut st = OptimizerState::new(&[p.len()]);
            opt.step(&mut [&mut q], &[&g], &mut st).unwrap();
            prop_assert_eq!(q, p);
        }

        #[test]
        fn clip_bounds_and_idempotence(
            a in proptest::collection::vec(-100.0f32..100.0, 1..12),
            b in proptest::collection::vec(-100.0f32..100.0, 1..12),
            max in 0.01f64..10.0,
        ) {
            let (mut a1, mut b1) = (a.clone(), b.clone());
            clip_global_norm(&mut [&mut a1, &mut b1], max);
            prop_assert!(global_norm(&[&a1, &b1]) <= max + 1e-6 * max.max(1.0));
            let (mut a2, mut b2) = (a1.clone(), b1.clone());
            clip_global_norm(&mut [&mut a2, &mut b2], max);
            for (x, y) in a1.iter().chain(&b1).zip(a2.iter().chain(&b2)) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-6));
            }
        }
    }
}
