//! Hinge + anchored margin loss, full-batch training over cached hidden
//! states, and the step-1 zero-gradient sentinel.

mod gradbug;

pub use gradbug::{reproduce_gradient_bug, GradientBugReport};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{d_inner_for_budget, Adapter, AdapterGrads, AdapterKind, GateActivation};
use crate::error::{Error, Result};
use crate::evaluator::{adapted_logits, score_records, FactScore};
use crate::factset::SplitSpec;
use crate::model::{CacheRecord, EmbeddingTable, HiddenStateCache};
use crate::numerics::{clip_global_norm, softmax_f64, AdamW, OptimizerState};

/// Pre-clip gradient norms below this at step 1 are treated as a structural zero.
pub const SENTINEL_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub anchor_floor: f64,
    pub anchor_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub kind: AdapterKind,
    /// Bottleneck width; `None` means the kind's default.
    pub d_inner: Option<usize>,
    /// When set, overrides `d_inner` with the largest width within this many parameters.
    pub param_budget: Option<usize>,
    pub gate: GateActivation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 1.5,
            anchor_floor: 0.1,
            anchor_weight: 2.0,
            lr: 5e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            max_steps: 400,
            seed: 0,
            kind: AdapterKind::Swiglu,
            d_inner: None,
            param_budget: None,
            gate: GateActivation::Silu,
        }
    }
}

impl TrainConfig {
    /// Parses `key = value` TOML; missing keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.tau, self.anchor_floor, self.anchor_weight, self.lr, self.weight_decay, self.clip_norm]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("hyperparameters must be finite".into()));
        }
        if !(self.tau > self.anchor_floor && self.anchor_floor > 0.0) {
            return Err(Error::Config(format!(
                "need tau > anchor_floor > 0, got tau={} anchor_floor={}",
                self.tau, self.anchor_floor
            )));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.anchor_weight < 0.0 {
            return Err(Error::Config("lr, weight_decay and anchor_weight must be non-negative".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.d_inner == Some(0) {
            return Err(Error::Config("d_inner must be positive".into()));
        }
        Ok(())
    }

    /// Input dimension for this config's adapter kind.
    pub fn input_dim(&self, embed: &EmbeddingTable) -> usize {
        if self.kind.is_hidden_state() {
            embed.d_model()
        } else {
            embed.vocab_size()
        }
    }

    pub fn resolved_d_inner(&self, dim: usize) -> usize {
        match (self.param_budget, self.d_inner) {
            (Some(budget), _) => d_inner_for_budget(self.kind, dim, budget).max(1),
            (None, Some(i)) => i,
            (None, None) => self.kind.default_d_inner(),
        }
    }

    pub fn init_adapter(&self, embed: &EmbeddingTable) -> Result<Adapter> {
        let dim = self.input_dim(embed);
        Adapter::init_with_gate(self.kind, dim, self.resolved_d_inner(dim), self.seed, self.gate)
    }
}

/// `mean(max(0, τ − m))` over train margins plus
/// `anchor_weight · mean(max(0, floor − m))` over anchor margins.
pub fn loss(train_margins: &[f64], anchor_margins: &[f64], config: &TrainConfig) -> Result<f64> {
    if train_margins.is_empty() {
        return Err(Error::Empty("train margins"));
    }
    let hinge = |target: f64, ms: &[f64]| ms.iter().map(|m| (target - m).max(0.0)).sum::<f64>() / ms.len() as f64;
    let anchor = if anchor_margins.is_empty() { 0.0 } else { hinge(config.anchor_floor, anchor_margins) };
    Ok(hinge(config.tau, train_margins) + config.anchor_weight * anchor)
}

/// Fails when a positive step-1 loss produced a vanishing gradient.
pub fn gradient_sentinel(grad_norm: f64, step: usize, loss: f64) -> Result<()> {
    if step == 1 && loss > 0.0 && !(grad_norm >= SENTINEL_THRESHOLD) {
        return Err(Error::ZeroGradient(format!(
            "step 1 has loss {loss:.6} but gradient norm {grad_norm:.4e}; the parameters being \
             differentiated are probably detached from the ones used in the loss (a plain \
             parameter snapshot was passed instead of the live module)"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub mean_train_margin: f64,
    /// `None` when training without anchors.
    pub min_anchor_margin: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Trailing moving average of the loss ending at `step` (1-based).
    pub fn smoothed_loss(&self, step: usize, window: usize) -> Option<f64> {
        if step == 0 || step > self.steps.len() || window == 0 {
            return None;
        }
        let lo = step.saturating_sub(window);
        let slice = &self.steps[lo..step];
        Some(slice.iter().map(|s| s.loss).sum::<f64>() / slice.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm,mean_train_margin,min_anchor_margin\n");
        for s in &self.steps {
            let anchor = s.min_anchor_margin.map(|m| format!("{m:.9}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.9},{:.9},{:.9},{}", s.step, s.loss, s.grad_norm, s.mean_train_margin, anchor);
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub adapter: Adapter,
    pub history: TrainHistory,
}

struct Item<'a> {
    id: &'a str,
    records: [&'a CacheRecord; 4],
}

fn items<'a>(cache: &'a HiddenStateCache, ids: &'a [String]) -> Result<Vec<Item<'a>>> {
    ids.iter().map(|id| Ok(Item { id, records: cache.fact_records(id)? })).collect()
}

/// Adds `coeff · ∂ log P(record) / ∂θ` to `grads`.
fn accumulate_logprob_grad(
    record: &CacheRecord,
    embed: &EmbeddingTable,
    adapter: &Adapter,
    coeff: f64,
    grads: &mut AdapterGrads,
) -> Result<()> {
    let w = embed.weight();
    for (h, &t) in record.hidden.iter().zip(&record.targets) {
        let logits = adapted_logits(h, embed, Some(adapter))?;
        let p = softmax_f64(&logits)?;
        // d log p_t / d logits = onehot(t) − p
        let mut dlogits: Vec<f64> = p.iter().map(|&q| -coeff * q).collect();
        dlogits[t as usize] += coeff;
        if adapter.kind().is_hidden_state() {
            let upstream = w.t_matvec_f64(&dlogits);
            adapter.backward_into(h, &upstream, grads)?;
        } else {
            let base = crate::model::project_logits(h, embed)?;
            adapter.backward_into(&base, &dlogits, grads)?;
        }
    }
    Ok(())
}

fn best_distractor(score: &FactScore) -> usize {
    // first maximum, matching the margin definition's tie behaviour
    let mut best = 0;
    for (i, &lp) in score.distractor_logprobs.iter().enumerate() {
        if lp > score.distractor_logprobs[best] {
            best = i;
        }
    }
    best + 1
}

/// Hinge subgradients of one loss term with respect to a fact's margin:
/// `∂/∂m max(0, target − m) = −1` while the hinge is active.
fn accumulate_margin_grad(
    item: &Item,
    score: &FactScore,
    target: f64,
    weight: f64,
    embed: &EmbeddingTable,
    adapter: &Adapter,
    grads: &mut AdapterGrads,
) -> Result<()> {
    if target - score.margin <= 0.0 || weight == 0.0 {
        return Ok(());
    }
    let dm = -weight;
    accumulate_logprob_grad(item.records[0], embed, adapter, dm, grads)?;
    accumulate_logprob_grad(item.records[best_distractor(score)], embed, adapter, -dm, grads)?;
    Ok(())
}

/// Margins and the full-batch loss gradient at the current adapter.
pub fn loss_and_grad(
    cache: &HiddenStateCache,
    embed: &EmbeddingTable,
    adapter: &Adapter,
    train_ids: &[String],
    anchor_ids: &[String],
    config: &TrainConfig,
) -> Result<(f64, AdapterGrads, Vec<FactScore>, Vec<FactScore>)> {
    let train = items(cache, train_ids)?;
    let anchors = items(cache, anchor_ids)?;
    step_terms(&train, &anchors, embed, adapter, config)
}

fn step_terms(
    train: &[Item],
    anchors: &[Item],
    embed: &EmbeddingTable,
    adapter: &Adapter,
    config: &TrainConfig,
) -> Result<(f64, AdapterGrads, Vec<FactScore>, Vec<FactScore>)> {
    let score = |it: &Item| score_records(it.id, it.records, embed, Some(adapter));
    let train_scores = train.iter().map(score).collect::<Result<Vec<_>>>()?;
    let anchor_scores = anchors.iter().map(score).collect::<Result<Vec<_>>>()?;
    let tm: Vec<f64> = train_scores.iter().map(|s| s.margin).collect();
    let am: Vec<f64> = anchor_scores.iter().map(|s| s.margin).collect();
    let value = loss(&tm, &am, config)?;

    let mut grads = AdapterGrads::zeros_like(adapter);
    let tw = 1.0 / train.len() as f64;
    for (it, s) in train.iter().zip(&train_scores) {
        accumulate_margin_grad(it, s, config.tau, tw, embed, adapter, &mut grads)?;
    }
    if !anchors.is_empty() {
        let aw = config.anchor_weight / anchors.len() as f64;
        for (it, s) in anchors.iter().zip(&anchor_scores) {
            accumulate_margin_grad(it, s, config.anchor_floor, aw, embed, adapter, &mut grads)?;
        }
    }
    Ok((value, grads, train_scores, anchor_scores))
}

/// Full-batch AdamW training of a fresh adapter on the split's train facts,
/// with the anchors held above the floor.
pub fn train(
    cache: &HiddenStateCache,
    embed: &EmbeddingTable,
    split: &SplitSpec,
    anchor_ids: &[String],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if cache.d_model() != embed.d_model() {
        return Err(Error::Shape(format!(
            "cache d_model {} does not match embedding d_model {}",
            cache.d_model(),
            embed.d_model()
        )));
    }
    let train_items = items(cache, &split.train_ids)?;
    if train_items.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let anchor_items = items(cache, anchor_ids)?;

    let mut adapter = config.init_adapter(embed)?;
    let sizes: Vec<usize> = adapter.tensors().iter().map(|(_, m)| m.data().len()).collect();
    let mut state = OptimizerState::new(&sizes);
    let opt = AdamW::with_lr(config.lr, config.weight_decay);
    let mut history = TrainHistory::default();

    for step in 1..=config.max_steps {
        let (value, grads, ts, an) = step_terms(&train_items, &anchor_items, embed, &adapter, config)?;
        let mut g32 = grads.to_f32();
        let mut views: Vec<&mut [f32]> = g32.iter_mut().map(|g| g.as_mut_slice()).collect();
        let grad_norm = clip_global_norm(&mut views, config.clip_norm);
        gradient_sentinel(grad_norm, step, value)?;
        history.steps.push(StepRecord {
            step,
            loss: value,
            grad_norm,
            mean_train_margin: ts.iter().map(|s| s.margin).sum::<f64>() / ts.len() as f64,
            min_anchor_margin: an.iter().map(|s| s.margin).reduce(f64::min),
        });

        let grad_refs: Vec<&[f32]> = g32.iter().map(|g| g.as_slice()).collect();
        let mut tensors = adapter.tensors_mut();
        let mut params: Vec<&mut [f32]> = tensors.iter_mut().map(|m| m.data_mut()).collect();
        opt.step(&mut params, &grad_refs, &mut state)?;
    }
    Ok(TrainOutcome { adapter, history })
}

/// Anchor ids whose margin dropped by more than `tol` or which passed at
/// baseline but fail after training.
pub fn anchor_regressions(baseline: &[FactScore], after: &[FactScore], tol: f64) -> Vec<String> {
    baseline
        .iter()
        .zip(after)
        .filter(|(b, a)| a.margin < b.margin - tol || (b.pass && !a.pass))
        .map(|(b, _)| b.fact_id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff, max_relative_error, Mat};

    #[test]
    fn loss_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(loss(&[1.5, 2.0], &[0.1, 5.0], &cfg).unwrap(), 0.0);
        assert!((loss(&[0.5], &[0.0], &cfg).unwrap() - 1.2).abs() < 1e-12);
        assert!((loss(&[-2.0], &[], &cfg).unwrap() - 3.5).abs() < 1e-12);
        assert!(loss(&[], &[0.0], &cfg).is_err());
    }

    #[test]
    fn sentinel_cases() {
        assert!(matches!(gradient_sentinel(0.0, 1, 0.7), Err(Error::ZeroGradient(_))));
        assert!(gradient_sentinel(1.7321, 1, 0.7).is_ok());
        assert!(gradient_sentinel(0.0, 1, 0.0).is_ok());
        assert!(gradient_sentinel(0.0, 2, 0.7).is_ok());
        assert!(gradient_sentinel(f64::NAN, 1, 0.7).is_err());
    }

    #[test]
    fn config_validation_and_toml() {
        let cfg = TrainConfig::from_toml("tau = 2.0\nkind = \"linear\"\nmax_steps = 10\n").unwrap();
        assert_eq!((cfg.tau, cfg.kind, cfg.max_steps, cfg.lr), (2.0, AdapterKind::Linear, 10, 5e-4));
        assert!(TrainConfig::from_toml("tau = 0.05").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("max_steps = 0").is_err());
        let budget = TrainConfig { param_budget: Some(786_432), kind: AdapterKind::Linear, ..Default::default() };
        assert_eq!(budget.resolved_d_inner(4096), 96);
    }

    #[test]
    fn smoothed_loss_window() {
        let h = TrainHistory {
            steps: (1..=4)
                .map(|s| StepRecord { step: s, loss: s as f64, grad_norm: 0.0, mean_train_margin: 0.0, min_anchor_margin: None })
                .collect(),
        };
        assert_eq!(h.smoothed_loss(4, 2), Some(3.5));
        assert_eq!(h.smoothed_loss(1, 10), Some(1.0));
        assert_eq!(h.smoothed_loss(5, 2), None);
        assert!(h.to_csv().lines().nth(1).unwrap().ends_with(','));
    }

    fn tiny_cache(seed: u64) -> (HiddenStateCache, EmbeddingTable) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (d, vocab) = (6, 10);
        let embed = EmbeddingTable::new(Mat::gaussian(vocab, d, 1.0, &mut rng));
        let mut cache = HiddenStateCache::new(d);
        for f in 0..3 {
            for c in 0..4u8 {
                let n = 2 + (f + c as usize) % 2;
                let hidden: Vec<Vec<f32>> = (0..n).map(|_| Mat::gaussian(1, d, 1.0, &mut rng).into_data()).collect();
                let targets = (0..n).map(|k| ((f * 3 + c as usize + k) % vocab) as u32).collect();
                cache
                    .push(CacheRecord { fact_id: format!("f{f}"), candidate: c, targets, hidden })
                    .unwrap();
            }
        }
        (cache, embed)
    }

    fn perturbed(adapter: &Adapter, seed: u64) -> Adapter {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut a = adapter.clone();
        for m in a.tensors_mut() {
            let noise = Mat::gaussian(m.rows(), m.cols(), 0.3, &mut rng);
            for (v, n) in m.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
        a
    }

    fn with_params(adapter: &Adapter, flat: &[f64]) -> Adapter {
        let mut a = adapter.clone();
        let mut off = 0;
        for m in a.tensors_mut() {
            for v in m.data_mut() {
                *v = flat[off] as f32;
                off += 1;
            }
        }
        a
    }

    #[test]
    fn loss_gradient_matches_finite_differences_away_from_kinks() {
        let train_ids = vec!["f0".to_string(), "f1".to_string()];
        let anchor_ids = vec!["f2".to_string()];
        let all: Vec<String> = train_ids.iter().chain(&anchor_ids).cloned().collect();
        for kind in AdapterKind::ALL {
            let mut checked = 0;
            for seed in 0..8 {
                let (cache, embed) = tiny_cache(seed);
                let cfg = TrainConfig { kind, d_inner: Some(3), tau: 40.0, anchor_floor: 30.0, ..Default::default() };
                let adapter = perturbed(&cfg.init_adapter(&embed).unwrap(), seed + 100);
                // the max over distractors has kinks; skip points too close to one
                let (_, _, scores, _) = loss_and_grad(&cache, &embed, &adapter, &all, &[], &cfg).unwrap();
                let near_kink = scores.iter().any(|s| {
                    let mut d = s.distractor_logprobs;
                    d.sort_by(|a, b| b.total_cmp(a));
                    d[0] - d[1] < 0.5
                });
                if near_kink {
                    continue;
                }
                let (_, grads, _, _) = loss_and_grad(&cache, &embed, &adapter, &train_ids, &anchor_ids, &cfg).unwrap();
                let numeric = finite_diff(
                    |p| {
                        let a = with_params(&adapter, p);
                        loss_and_grad(&cache, &embed, &a, &train_ids, &anchor_ids, &cfg).unwrap().0
                    },
                    &adapter.flat_params(),
                    1e-2,
                )
                .unwrap();
                let err = max_relative_error(&grads.flatten(), &numeric);
                // f32 parameters and logits limit the finite-difference resolution here
                assert!(err < 2e-2, "{kind} seed {seed}: {err}");
                checked += 1;
            }
            assert!(checked >= 2, "{kind}: only {checked} kink-free configurations");
        }
    }
}
