//! Sequence scoring, the margin metric, per-split evaluation, intensity
//! reports, and the cross-split statistics.

mod report;
mod stats;

pub use report::{heldout_report, HeldoutReport, KindSummary};

pub use stats::{
    fisher_exact_two_sided, pooled_stats, signed_rank_null_counts, wilcoxon_signed_rank, PooledStats,
    WilcoxonResult,
};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterKind};
use crate::error::{Error, Result};
use crate::factset::{Candidates, Fact, ReferenceMargins, SplitSpec};
use crate::model::{project_logits, CacheRecord, EmbeddingTable, HiddenStateCache, Tokenizer, ToyModel};
use crate::numerics::logsumexp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactScore {
    pub fact_id: String,
    pub truth_logprob: f64,
    pub distractor_logprobs: [f64; 3],
    pub margin: f64,
    pub pass: bool,
}

impl FactScore {
    pub fn new(fact_id: impl Into<String>, truth_logprob: f64, distractor_logprobs: [f64; 3]) -> Self {
        let margin = fact_margin(truth_logprob, &distractor_logprobs).expect("three distractors");
        Self { fact_id: fact_id.into(), truth_logprob, distractor_logprobs, margin, pass: margin > 0.0 }
    }
}

/// Logits for one hidden state with the adapter attached at its own site:
/// hidden-state adapters before the projection, logit adapters after it.
pub fn adapted_logits(h: &[f32], embed: &EmbeddingTable, adapter: Option<&Adapter>) -> Result<Vec<f32>> {
    match adapter {
        None => project_logits(h, embed),
        Some(a) if a.kind().is_hidden_state() => project_logits(&a.apply(h)?, embed),
        Some(a) => a.apply(&project_logits(h, embed)?),
    }
}

/// `Σ_k log P(target_k | prefix)` over a cached completion.
pub fn sequence_logprob(record: &CacheRecord, embed: &EmbeddingTable, adapter: Option<&Adapter>) -> Result<f64> {
    let mut total = 0.0f64;
    for (h, &t) in record.hidden.iter().zip(&record.targets) {
        let logits = adapted_logits(h, embed, adapter)?;
        let lse = logsumexp(&logits)?;
        let logit = *logits.get(t as usize).ok_or(Error::TokenOutOfRange { id: t, vocab: logits.len() })?;
        total += logit as f64 - lse;
    }
    Ok(total)
}

/// `truth − max(distractors)`. Callers treat only strictly positive margins as passing.
pub fn fact_margin(truth: f64, distractors: &[f64]) -> Result<f64> {
    let best = distractors
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(Error::Empty("distractor scores"))?;
    Ok(truth - best)
}

pub fn score_records(fact_id: &str, records: [&CacheRecord; 4], embed: &EmbeddingTable, adapter: Option<&Adapter>) -> Result<FactScore> {
    let truth = sequence_logprob(records[0], embed, adapter)?;
    let mut distractors = [0.0; 3];
    for (d, r) in distractors.iter_mut().zip(&records[1..]) {
        *d = sequence_logprob(r, embed, adapter)?;
    }
    Ok(FactScore::new(fact_id, truth, distractors))
}

pub fn score_fact(cache: &HiddenStateCache, embed: &EmbeddingTable, adapter: Option<&Adapter>, fact_id: &str) -> Result<FactScore> {
    score_records(fact_id, cache.fact_records(fact_id)?, embed, adapter)
}

/// Scores by running the model directly, without a cache.
pub fn score_direct(model: &ToyModel, tokenizer: &dyn Tokenizer, item: &dyn Candidates, adapter: Option<&Adapter>) -> Result<FactScore> {
    let recs = (0..4u8)
        .map(|c| crate::model::candidate_record(model, item, c, tokenizer))
        .collect::<Result<Vec<_>>>()?;
    score_records(item.id(), [&recs[0], &recs[1], &recs[2], &recs[3]], model.embed(), adapter)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split_index: usize,
    /// `None` for the unadapted baseline.
    pub kind: Option<AdapterKind>,
    pub train: Vec<FactScore>,
    pub heldout: Vec<FactScore>,
    pub train_passed: usize,
    pub heldout_passed: usize,
}

impl SplitResult {
    pub fn new(split_index: usize, kind: Option<AdapterKind>, train: Vec<FactScore>, heldout: Vec<FactScore>) -> Self {
        let train_passed = train.iter().filter(|s| s.pass).count();
        let heldout_passed = heldout.iter().filter(|s| s.pass).count();
        Self { split_index, kind, train, heldout, train_passed, heldout_passed }
    }

    pub fn heldout_counts(&self) -> (usize, usize) {
        (self.heldout_passed, self.heldout.len())
    }
}

pub fn evaluate_split(
    cache: &HiddenStateCache,
    embed: &EmbeddingTable,
    adapter: Option<&Adapter>,
    split: &SplitSpec,
) -> Result<SplitResult> {
    let score = |ids: &[String]| ids.iter().map(|id| score_fact(cache, embed, adapter, id)).collect::<Result<Vec<_>>>();
    Ok(SplitResult::new(split.split_index, adapter.map(Adapter::kind), score(&split.train_ids)?, score(&split.heldout_ids)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelSummary {
    pub level: u8,
    pub n: usize,
    pub passed: usize,
    pub rate: f64,
    pub mean_margin: f64,
}

/// Pass rate and mean margin per intensity level, for levels that have entries.
pub fn intensity_report<I: IntoIterator<Item = (u8, f64)>>(entries: I) -> Vec<LevelSummary> {
    let mut sums: [(usize, usize, f64); 4] = [(0, 0, 0.0); 4];
    for (level, margin) in entries {
        let s = &mut sums[(level.clamp(1, 4) - 1) as usize];
        s.0 += 1;
        s.1 += usize::from(margin > 0.0);
        s.2 += margin;
    }
    sums.iter()
        .enumerate()
        .filter(|(_, s)| s.0 > 0)
        .map(|(i, &(n, passed, total))| LevelSummary {
            level: i as u8 + 1,
            n,
            passed,
            rate: passed as f64 / n as f64,
            mean_margin: total / n as f64,
        })
        .collect()
}

pub fn intensity_report_reference(refs: &ReferenceMargins) -> Vec<LevelSummary> {
    intensity_report(refs.entries().iter().map(|e| (e.intensity, e.margin)))
}

/// Intensity report over computed scores; scores without a matching fact are skipped.
pub fn intensity_report_scores(facts: &[Fact], scores: &[FactScore]) -> Vec<LevelSummary> {
    let levels: HashMap<&str, u8> = facts.iter().map(|f| (f.id.as_str(), f.intensity)).collect();
    intensity_report(scores.iter().filter_map(|s| levels.get(s.fact_id.as_str()).map(|&l| (l, s.margin))))
}
