//! Steering-vector baseline: a contrastive direction added to one layer's
//! residual output, and the layers × strengths sweep.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluator::{score_records, FactScore};
use crate::factset::Candidates;
use crate::model::{candidate_record_hooked, candidate_tokens, Tokenizer, ToyModel};
use crate::numerics::Mat;

pub const DEFAULT_STRENGTHS: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 3.0, 5.0];

/// Layer grid used for models with at least 34 layers.
pub const DEEP_LAYER_GRID: [usize; 5] = [5, 10, 18, 25, 33];

#[derive(Clone, Debug, PartialEq)]
pub struct SteeringConfig {
    pub layer: usize,
    pub strength: f64,
    /// Unit vector of length `d_model`.
    pub direction: Vec<f32>,
    /// Inject at this position only; `None` injects at every position.
    pub position: Option<usize>,
}

impl SteeringConfig {
    pub fn new(layer: usize, strength: f64, direction: Vec<f32>) -> Self {
        Self { layer, strength, direction, position: None }
    }

    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        if self.layer >= model.n_layers() {
            return Err(Error::LayerOutOfRange { layer: self.layer, n_layers: model.n_layers() });
        }
        if self.direction.len() != model.d_model() {
            return Err(Error::Shape(format!(
                "steering direction has {} dims, model has {}",
                self.direction.len(),
                model.d_model()
            )));
        }
        let norm = self.direction.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("steering direction has norm {norm}, expected 1")));
        }
        if !self.strength.is_finite() {
            return Err(Error::NonFinite("steering strength".into()));
        }
        Ok(())
    }

    fn inject(&self, site: usize, pos: usize, x: &mut [f32]) {
        if site == self.layer + 1 && self.position.is_none_or(|p| p == pos) {
            for (v, &d) in x.iter_mut().zip(&self.direction) {
                *v = (*v as f64 + self.strength * d as f64) as f32;
            }
        }
    }
}

/// `normalize(mean(truth) − mean(distractor))`.
pub fn build_direction(truth: &[Vec<f32>], distractor: &[Vec<f32>]) -> Result<Vec<f32>> {
    let mean = |vs: &[Vec<f32>], what: &'static str| -> Result<Vec<f64>> {
        let first = vs.first().ok_or(Error::Empty(what))?;
        let mut acc = vec![0.0f64; first.len()];
        for v in vs {
            if v.len() != acc.len() {
                return Err(Error::Shape(format!("{what}: vectors of length {} and {}", acc.len(), v.len())));
            }
            acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64);
        }
        Ok(acc.into_iter().map(|a| a / vs.len() as f64).collect())
    };
    let t = mean(truth, "truth states")?;
    let d = mean(distractor, "distractor states")?;
    if t.len() != d.len() {
        return Err(Error::Shape(format!("truth dim {} vs distractor dim {}", t.len(), d.len())));
    }
    let diff: Vec<f64> = t.iter().zip(&d).map(|(a, b)| a - b).collect();
    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroDirection);
    }
    Ok(diff.iter().map(|v| (v / norm) as f32).collect())
}

/// Final hidden states with `strength · direction` added to the output of
/// `config.layer`. Weights are untouched.
pub fn apply_steering(model: &ToyModel, tokens: &[u32], config: &SteeringConfig) -> Result<Mat> {
    config.validate(model)?;
    model.forward_hidden_hooked(tokens, &mut |site, pos, x| config.inject(site, pos, x))
}

/// Truth and distractor states at the output of `layer`, taken at the
/// positions that predict each completion token.
pub fn contrastive_states(
    model: &ToyModel,
    tokenizer: &dyn Tokenizer,
    items: &[&dyn Candidates],
    layer: usize,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    if layer >= model.n_layers() {
        return Err(Error::LayerOutOfRange { layer, n_layers: model.n_layers() });
    }
    let (mut truth, mut distractor) = (Vec::new(), Vec::new());
    for item in items {
        for c in 0..4u8 {
            let (seq, ctx) = candidate_tokens(model, *item, c, tokenizer)?;
            let streams = model.residual_streams(&seq)?;
            let out = &streams[layer + 1];
            let rows = (ctx - 1..seq.len() - 1).map(|p| out.row(p).to_vec());
            if c == 0 {
                truth.extend(rows);
            } else {
                distractor.extend(rows);
            }
        }
    }
    Ok((truth, distractor))
}

/// Five evenly spaced layers (deduplicated), or [`DEEP_LAYER_GRID`] for deep models.
pub fn default_layer_grid(n_layers: usize) -> Vec<usize> {
    if n_layers >= 34 {
        return DEEP_LAYER_GRID.to_vec();
    }
    if n_layers == 0 {
        return Vec::new();
    }
    let mut grid: Vec<usize> =
        (0..5).map(|i| (i as f64 * (n_layers - 1) as f64 / 4.0).round() as usize).collect();
    grid.dedup();
    grid
}

pub fn score_steered(
    model: &ToyModel,
    tokenizer: &dyn Tokenizer,
    item: &dyn Candidates,
    config: &SteeringConfig,
) -> Result<FactScore> {
    config.validate(model)?;
    let recs = (0..4u8)
        .map(|c| candidate_record_hooked(model, item, c, tokenizer, &mut |s, p, x| config.inject(s, p, x)))
        .collect::<Result<Vec<_>>>()?;
    score_records(item.id(), [&recs[0], &recs[1], &recs[2], &recs[3]], model.embed(), None)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SteeringGrid {
    pub layers: Vec<usize>,
    pub strengths: Vec<f64>,
    /// `counts[i][j]`: facts passing with layer `layers[i]` at `strengths[j]`.
    pub counts: Vec<Vec<usize>>,
    pub n_facts: usize,
    pub baseline_passed: usize,
}

impl SteeringGrid {
    pub fn cells(&self) -> usize {
        self.counts.iter().map(Vec::len).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for s in &self.strengths {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
        for (l, row) in self.layers.iter().zip(&self.counts) {
            let _ = write!(out, "{l}");
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = format!("Steering sweep: passes out of {} (baseline {})\n", self.n_facts, self.baseline_passed);
        let _ = write!(out, "{:>8}", "layer");
        for s in &self.strengths {
            let _ = write!(out, " {:>7}", format!("α={s}"));
        }
        out.push('\n');
        for (l, row) in self.layers.iter().zip(&self.counts) {
            let _ = write!(out, "{l:>8}");
            for c in row {
                let _ = write!(out, " {:>7}", format!("{c}/{}", self.n_facts));
            }
            out.push('\n');
        }
        out
    }
}

/// For every (layer, strength), builds the contrastive direction at that
/// layer from `items`, steers, and counts passing facts.
pub fn sweep(
    model: &ToyModel,
    tokenizer: &dyn Tokenizer,
    items: &[&dyn Candidates],
    layers: &[usize],
    strengths: &[f64],
) -> Result<SteeringGrid> {
    if layers.is_empty() || strengths.is_empty() {
        return Err(Error::Empty("steering grid"));
    }
    let mut baseline_passed = 0;
    for item in items {
        baseline_passed += usize::from(crate::evaluator::score_direct(model, tokenizer, *item, None)?.pass);
    }
    let mut counts = Vec::with_capacity(layers.len());
    for &layer in layers {
        let (t, d) = contrastive_states(model, tokenizer, items, layer)?;
        let direction = build_direction(&t, &d)?;
        let mut row = Vec::with_capacity(strengths.len());
        for &strength in strengths {
            let cfg = SteeringConfig::new(layer, strength, direction.clone());
            let mut passed = 0;
            for item in items {
                passed += usize::from(score_steered(model, tokenizer, *item, &cfg)?.pass);
            }
            row.push(passed);
        }
        counts.push(row);
    }
    Ok(SteeringGrid {
        layers: layers.to_vec(),
        strengths: strengths.to_vec(),
        counts,
        n_facts: items.len(),
        baseline_passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factset::AnchorFact;
    use crate::model::{ByteTokenizer, ToyModelConfig};

    fn model() -> ToyModel {
        ToyModel::new(ToyModelConfig { n_layers: 3, ..Default::default() }).unwrap()
    }

    fn unit(d: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn direction_examples() {
        let dir = build_direction(&[vec![2.0, 0.0]], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(dir, vec![1.0, 0.0]);
        assert!(matches!(build_direction(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]), Err(Error::ZeroDirection)));
        let a = build_direction(&[vec![1.0, 3.0], vec![2.0, 0.5]], &[vec![0.0, 1.0]]).unwrap();
        let b = build_direction(&[vec![0.0, 1.0]], &[vec![1.0, 3.0], vec![2.0, 0.5]]).unwrap();
        assert_eq!(a.iter().map(|v| -v).collect::<Vec<_>>(), b);
        assert!(build_direction(&[], &[vec![1.0]]).is_err());
    }

    #[test]
    fn zero_strength_is_bit_exact_noop() {
        let m = model();
        let tokens: Vec<u32> = b"steer me".iter().map(|&b| b as u32).collect();
        let plain = m.forward_hidden(&tokens).unwrap();
        for layer in 0..m.n_layers() {
            let cfg = SteeringConfig::new(layer, 0.0, unit(m.d_model(), layer));
            let steered = apply_steering(&m, &tokens, &cfg).unwrap();
            assert!(plain.data().iter().zip(steered.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn injection_at_one_position_is_causal() {
        let m = model();
        let tokens: Vec<u32> = b"abcdefgh".iter().map(|&b| b as u32).collect();
        let plain = m.forward_hidden(&tokens).unwrap();
        let cfg = SteeringConfig { position: Some(4), ..SteeringConfig::new(0, 3.0, unit(m.d_model(), 1)) };
        let steered = apply_steering(&m, &tokens, &cfg).unwrap();
        for p in 0..tokens.len() {
            let same = plain.row(p) == steered.row(p);
            assert_eq!(same, p < 4, "position {p}");
        }
    }

    #[test]
    fn injected_delta_negates_with_strength() {
        let m = model();
        let tokens: Vec<u32> = b"xyz".iter().map(|&b| b as u32).collect();
        let dir = unit(m.d_model(), 2);
        let grab = |alpha: f64| {
            let cfg = SteeringConfig::new(1, alpha, dir.clone());
            let mut seen = Vec::new();
            m.forward_hidden_hooked(&tokens, &mut |s, p, x| {
                if s == 2 && p == 0 {
                    let before = x.to_vec();
                    cfg.inject(s, p, x);
                    seen = x.iter().zip(&before).map(|(a, b)| (a - b) as f64).collect();
                }
            })
            .unwrap();
            seen
        };
        let (up, down) = (grab(1.0), grab(-1.0));
        for (u, d) in up.iter().zip(&down) {
            assert!((u + d).abs() < 1e-5);
        }
    }

    #[test]
    fn config_validation() {
        let m = model();
        assert!(matches!(
            SteeringConfig::new(3, 1.0, unit(32, 0)).validate(&m),
            Err(Error::LayerOutOfRange { layer: 3, n_layers: 3 })
        ));
        assert!(SteeringConfig::new(0, 1.0, vec![0.5; 32]).validate(&m).is_err());
        assert!(SteeringConfig::new(0, 1.0, unit(16, 0)).validate(&m).is_err());
    }

    #[test]
    fn layer_grids() {
        assert_eq!(default_layer_grid(6), vec![0, 1, 3, 4, 5]);
        assert_eq!(default_layer_grid(36), DEEP_LAYER_GRID.to_vec());
        assert_eq!(default_layer_grid(2), vec![0, 1]);
        assert_eq!(default_layer_grid(1), vec![0]);
    }

    #[test]
    fn sweep_shape_and_zero_row() {
        let m = model();
        let items: Vec<AnchorFact> = (0..3)
            .map(|i| AnchorFact {
                id: format!("a{i}"),
                context: format!("context {i}"),
                truth: "yes".into(),
                distractors: ["no".into(), "maybe".into(), "never".into()],
                source_note: None,
            })
            .collect();
        let refs: Vec<&dyn Candidates> = items.iter().map(|a| a as &dyn Candidates).collect();
        let grid = sweep(&m, &ByteTokenizer, &refs, &[0, 2], &[0.0, 1.0, 4.0]).unwrap();
        assert_eq!(grid.cells(), 6);
        assert!(grid.counts.iter().all(|r| r[0] == grid.baseline_passed));
        assert!(grid.counts.iter().flatten().all(|&c| c <= 3));
        assert_eq!(grid.to_csv().lines().count(), 3);
    }
}
