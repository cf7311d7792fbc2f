//! Aggregation of per-split results into the held-out summary, per-split
//! and per-level tables.

use std::fmt::Write as _;

use serde::Serialize;

use super::stats::{fisher_exact_two_sided, pooled_stats, wilcoxon_signed_rank, PooledStats, WilcoxonResult};
use super::{intensity_report_scores, LevelSummary, SplitResult};
use crate::adapters::AdapterKind;
use crate::error::{Error, Result};
use crate::factset::Fact;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KindSummary {
    /// `None` for the baseline.
    pub kind: Option<AdapterKind>,
    pub heldout: PooledStats,
    /// `(train passed, train total)` per split, in split order.
    pub train: Vec<(usize, usize)>,
    pub heldout_per_split: Vec<(usize, usize)>,
    pub split_indices: Vec<usize>,
}

impl KindSummary {
    fn label(&self) -> &'static str {
        self.kind.map_or("baseline", AdapterKind::name)
    }

    fn train_cell(&self) -> String {
        let passed: Vec<usize> = self.train.iter().map(|t| t.0).collect();
        let total = self.train.first().map_or(0, |t| t.1);
        let (lo, hi) = (passed.iter().min().copied().unwrap_or(0), passed.iter().max().copied().unwrap_or(0));
        if lo == hi {
            format!("{lo}/{total}")
        } else {
            format!("{lo}-{hi}/{total}")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeldoutReport {
    /// Baseline first (when present), then adapter kinds in `AdapterKind` order.
    pub rows: Vec<KindSummary>,
    /// Two-sided Fisher p on pooled held-out counts, swiglu vs linear.
    pub fisher_p: Option<f64>,
    /// Signed-rank test on per-split held-out counts, swiglu vs linear.
    pub wilcoxon: Option<WilcoxonResult>,
    /// Baseline pass rate by intensity level over every fact in the first baseline split.
    pub levels: Vec<LevelSummary>,
}

/// Groups `results` by kind and computes the summary statistics. Each
/// (kind, split index) pair may appear at most once.
pub fn heldout_report(results: &[SplitResult], facts: &[Fact]) -> Result<HeldoutReport> {
    if results.is_empty() {
        return Err(Error::Empty("split results"));
    }
    let mut kinds: Vec<Option<AdapterKind>> = results.iter().map(|r| r.kind).collect();
    kinds.sort();
    kinds.dedup();
    let mut rows = Vec::new();
    for kind in kinds {
        let mut rs: Vec<&SplitResult> = results.iter().filter(|r| r.kind == kind).collect();
        rs.sort_by_key(|r| r.split_index);
        if rs.windows(2).any(|w| w[0].split_index == w[1].split_index) {
            return Err(Error::Split(format!("duplicate split result for {}", kind.map_or("baseline", AdapterKind::name))));
        }
        let heldout_per_split: Vec<(usize, usize)> = rs.iter().map(|r| r.heldout_counts()).collect();
        rows.push(KindSummary {
            kind,
            heldout: pooled_stats(&heldout_per_split)?,
            train: rs.iter().map(|r| (r.train_passed, r.train.len())).collect(),
            heldout_per_split,
            split_indices: rs.iter().map(|r| r.split_index).collect(),
        });
    }

    let find = |k: AdapterKind| rows.iter().find(|r| r.kind == Some(k));
    let (fisher_p, wilcoxon) = match (find(AdapterKind::Swiglu), find(AdapterKind::Linear)) {
        (Some(s), Some(l)) => {
            let h = (&s.heldout, &l.heldout);
            let fisher = fisher_exact_two_sided(h.0.passed, h.0.total - h.0.passed, h.1.passed, h.1.total - h.1.passed);
            let wilcoxon = if s.split_indices == l.split_indices {
                let pairs: Vec<(f64, f64)> =
                    s.heldout_per_split.iter().zip(&l.heldout_per_split).map(|(a, b)| (a.0 as f64, b.0 as f64)).collect();
                Some(wilcoxon_signed_rank(&pairs)?)
            } else {
                None
            };
            (Some(fisher), wilcoxon)
        }
        _ => (None, None),
    };

    let levels = results
        .iter()
        .filter(|r| r.kind.is_none())
        .min_by_key(|r| r.split_index)
        .map(|r| {
            let all: Vec<_> = r.train.iter().chain(&r.heldout).cloned().collect();
            intensity_report_scores(facts, &all)
        })
        .unwrap_or_default();

    Ok(HeldoutReport { rows, fisher_p, wilcoxon, levels })
}

impl HeldoutReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let n_splits = self.rows.iter().map(|r| r.heldout_per_split.len()).max().unwrap_or(0);
        let _ = writeln!(out, "Held-out pass rate (mean ± population std over {n_splits} splits)");
        let _ = writeln!(out, "{:<10} {:>7}  {:>16}  {:>7}", "kind", "train", "held-out", "pooled");
        for r in &self.rows {
            let train = if r.kind.is_some() { r.train_cell() } else { "-".into() };
            let _ = writeln!(
                out,
                "{:<10} {:>7}  {:>6.1}% ± {:>5.1}%  {:>3}/{:<3}",
                r.label(),
                train,
                r.heldout.mean_percent,
                r.heldout.std_percent,
                r.heldout.passed,
                r.heldout.total
            );
        }
        match self.fisher_p {
            Some(p) => {
                let _ = writeln!(out, "Fisher exact p (two-sided, pooled held-out, swiglu vs linear): {p:.4}");
            }
            None => out.push_str("Fisher exact test omitted: needs both swiglu and linear results\n"),
        }

        out.push_str("\nPer-split held-out passes\n");
        let _ = write!(out, "{:<6}", "split");
        for r in &self.rows {
            let _ = write!(out, " {:>9}", r.label());
        }
        out.push('\n');
        let mut splits: Vec<usize> = self.rows.iter().flat_map(|r| r.split_indices.iter().copied()).collect();
        splits.sort_unstable();
        splits.dedup();
        for s in splits {
            let _ = write!(out, "{:<6}", s + 1);
            for r in &self.rows {
                let cell = r
                    .split_indices
                    .iter()
                    .position(|&i| i == s)
                    .map(|k| format!("{}/{}", r.heldout_per_split[k].0, r.heldout_per_split[k].1))
                    .unwrap_or_else(|| "-".into());
                let _ = write!(out, " {cell:>9}");
            }
            out.push('\n');
        }
        if let Some(w) = &self.wilcoxon {
            let _ = writeln!(out, "signed-rank p (exact, swiglu vs linear): {:.4} (n = {})", w.p_value, w.n);
        }

        if !self.levels.is_empty() {
            out.push_str("\nBaseline pass rate by intensity level\n");
            let _ = writeln!(out, "{:<6} {:>7} {:>6} {:>12}", "level", "passed", "rate", "mean margin");
            for l in &self.levels {
                let _ = writeln!(
                    out,
                    "L{:<5} {:>3}/{:<3} {:>5.0}% {:>+12.3}",
                    l.level,
                    l.passed,
                    l.n,
                    100.0 * l.rate,
                    l.mean_margin
                );
            }
        }
        out
    }

    /// One row per (kind, split).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,split,train_passed,train_total,heldout_passed,heldout_total\n");
        for r in &self.rows {
            for (k, &s) in r.split_indices.iter().enumerate() {
                let (tp, tt) = r.train[k];
                let (hp, ht) = r.heldout_per_split[k];
                let _ = writeln!(out, "{},{},{tp},{tt},{hp},{ht}", r.label(), s + 1);
            }
        }
        out
    }
}
