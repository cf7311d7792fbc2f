//! The published numbers as golden data, and the statistics recomputed from
//! them.
//!
//! Files live under `data/paper/v1` as JSON Lines next to a `MANIFEST.sha256`
//! in `sha256sum` format. They are compiled in, and every load verifies the
//! digests first.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterKind;
use crate::error::{Error, Result};
use crate::evaluator::{
    fisher_exact_two_sided, intensity_report_reference, pooled_stats, wilcoxon_signed_rank, LevelSummary, PooledStats,
};
use crate::factset::{placeholder_corpus, to_jsonl, ReferenceMargins, PAPER_LEVEL_COUNTS};

pub const MANIFEST_FILE: &str = "MANIFEST.sha256";

const EMBEDDED: [(&str, &str); 5] = [
    ("fact_margins.jsonl", include_str!("../data/paper/v1/fact_margins.jsonl")),
    ("informational.jsonl", include_str!("../data/paper/v1/informational.jsonl")),
    ("level_summary.jsonl", include_str!("../data/paper/v1/level_summary.jsonl")),
    ("scale_summary.jsonl", include_str!("../data/paper/v1/scale_summary.jsonl")),
    ("split_counts.jsonl", include_str!("../data/paper/v1/split_counts.jsonl")),
];
const EMBEDDED_MANIFEST: &str = include_str!("../data/paper/v1/MANIFEST.sha256");

/// Printed per-level aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelRow {
    pub intensity: u8,
    pub label: String,
    pub facts: usize,
    pub passed: usize,
    pub rate_percent: f64,
    pub mean_margin: f64,
}

/// Printed per-scale held-out aggregate, percentages over five splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleRow {
    pub scale: String,
    pub d_model: usize,
    pub swiglu_mean: f64,
    pub swiglu_std: f64,
    pub linear_mean: f64,
    pub linear_std: f64,
    pub fisher_p: f64,
    pub train_passed: usize,
    pub train_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCount {
    pub scale: String,
    pub kind: AdapterKind,
    /// 1-based.
    pub split: usize,
    pub passed: usize,
    pub total: usize,
}

/// A printed value that cannot be recomputed from the rest of the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Note {
    pub key: String,
    pub value: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoldenTables {
    pub fact_margins: ReferenceMargins,
    pub levels: Vec<LevelRow>,
    pub scales: Vec<ScaleRow>,
    pub splits: Vec<SplitCount>,
    pub notes: Vec<Note>,
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (digest, name) = line
            .split_once("  ")
            .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected `<sha256>  <file>`".into() })?;
        out.insert(name.trim().to_string(), digest.trim().to_lowercase());
    }
    Ok(out)
}

/// Checks every listed file against the manifest; files missing from
/// either side count as mismatches.
pub fn verify_digests(manifest: &str, files: &[(&str, &str)]) -> Result<()> {
    let expected = parse_manifest(manifest)?;
    for (name, text) in files {
        if expected.get(*name).map(String::as_str) != Some(sha256_hex(text).as_str()) {
            return Err(Error::DigestMismatch { file: (*name).to_string() });
        }
    }
    for name in expected.keys() {
        if !files.iter().any(|(f, _)| f == name) {
            return Err(Error::DigestMismatch { file: name.clone() });
        }
    }
    Ok(())
}

fn jsonl<T: for<'de> Deserialize<'de>>(file: &str, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: format!("{file}: {e}") })
        })
        .collect()
}

impl GoldenTables {
    fn from_files(manifest: &str, files: &[(&str, &str)]) -> Result<Self> {
        verify_digests(manifest, files)?;
        let get = |name: &str| {
            files
                .iter()
                .find(|(f, _)| *f == name)
                .map(|(_, t)| *t)
                .ok_or_else(|| Error::DigestMismatch { file: name.to_string() })
        };
        let tables = Self {
            fact_margins: ReferenceMargins::parse(get("fact_margins.jsonl")?)?,
            levels: jsonl("level_summary.jsonl", get("level_summary.jsonl")?)?,
            scales: jsonl("scale_summary.jsonl", get("scale_summary.jsonl")?)?,
            splits: jsonl("split_counts.jsonl", get("split_counts.jsonl")?)?,
            notes: jsonl("informational.jsonl", get("informational.jsonl")?)?,
        };
        tables.validate()?;
        Ok(tables)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Format { what: "golden data", msg });
        if self.fact_margins.level_counts().0 != PAPER_LEVEL_COUNTS {
            return bad(format!("fact margins have level shape {:?}", self.fact_margins.level_counts().0));
        }
        for s in &self.splits {
            if s.total != 16 || s.passed > s.total || !(1..=5).contains(&s.split) {
                return bad(format!("{} {} split {}: {}/{}", s.scale, s.kind, s.split, s.passed, s.total));
            }
        }
        for row in &self.scales {
            for kind in [AdapterKind::Swiglu, AdapterKind::Linear] {
                if self.split_counts(&row.scale, kind).len() != 5 {
                    return bad(format!("{} {kind}: expected 5 splits", row.scale));
                }
            }
        }
        Ok(())
    }

    /// The compiled-in copy.
    pub fn embedded() -> Result<Self> {
        Self::from_files(EMBEDDED_MANIFEST, &EMBEDDED)
    }

    pub fn fact_margin(&self, topic: &str, intensity: u8) -> Option<f64> {
        self.fact_margins.get(topic, intensity)
    }

    /// `(passed, total)` for a 1-based split.
    pub fn split_count(&self, scale: &str, kind: AdapterKind, split: usize) -> Option<(usize, usize)> {
        self.splits
            .iter()
            .find(|s| s.scale == scale && s.kind == kind && s.split == split)
            .map(|s| (s.passed, s.total))
    }

    /// Per-split counts in split order.
    pub fn split_counts(&self, scale: &str, kind: AdapterKind) -> Vec<(usize, usize)> {
        let mut rows: Vec<&SplitCount> = self.splits.iter().filter(|s| s.scale == scale && s.kind == kind).collect();
        rows.sort_by_key(|s| s.split);
        rows.into_iter().map(|s| (s.passed, s.total)).collect()
    }

    pub fn scale(&self, scale: &str) -> Option<&ScaleRow> {
        self.scales.iter().find(|r| r.scale == scale)
    }

    pub fn note(&self, key: &str) -> Option<&Note> {
        self.notes.iter().find(|n| n.key == key)
    }
}

/// Path of the shipped corpus file, relative to the crate root.
pub const SHIPPED_CORPUS: &str = "data/corpus/paper_facts.jsonl";

/// The shipped corpus text: the 31 reference entries as placeholder facts.
pub fn shipped_corpus_jsonl(g: &GoldenTables) -> Result<String> {
    to_jsonl(&placeholder_corpus(&g.fact_margins))
}

/// The embedded tables (digest-checked).
pub fn load_golden() -> Result<GoldenTables> {
    GoldenTables::embedded()
}

/// Loads and verifies a data directory laid out like the embedded one.
pub fn load_golden_dir(dir: &Path) -> Result<GoldenTables> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let names: Vec<String> = parse_manifest(&manifest)?.into_keys().collect();
    let texts = names
        .iter()
        .map(|n| std::fs::read_to_string(dir.join(n)).map_err(|_| Error::DigestMismatch { file: n.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let files: Vec<(&str, &str)> = names.iter().map(String::as_str).zip(texts.iter().map(String::as_str)).collect();
    GoldenTables::from_files(&manifest, &files)
}

/// Writes the embedded files and manifest into `dir`.
pub fn write_embedded(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, text) in EMBEDDED {
        std::fs::write(dir.join(name), text)?;
    }
    std::fs::write(dir.join(MANIFEST_FILE), EMBEDDED_MANIFEST)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelCheck {
    pub computed: LevelSummary,
    pub printed: LevelRow,
    pub counts_match: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleCheck {
    pub scale: String,
    pub swiglu: PooledStats,
    pub linear: PooledStats,
    pub fisher_p: f64,
    pub printed: ScaleRow,
    /// Largest gap between a recomputed and a printed mean or std, in points.
    pub max_percent_gap: f64,
    pub fisher_gap: f64,
}

/// Everything the statistics tooling recomputes from the golden data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reproduction {
    pub levels: Vec<LevelCheck>,
    pub scales: Vec<ScaleCheck>,
    /// Exact signed-rank p on the 8B per-split pairs.
    pub wilcoxon_p_8b: f64,
    pub wilcoxon_p_printed: Option<f64>,
    pub baseline_percent_printed: Option<f64>,
}

pub const PERCENT_TOLERANCE: f64 = 0.1;
pub const FISHER_TOLERANCE: f64 = 0.01;

impl Reproduction {
    pub fn levels_pass(&self) -> bool {
        self.levels.len() == 4 && self.levels.iter().all(|l| l.counts_match)
    }

    pub fn scales_pass(&self) -> bool {
        !self.scales.is_empty()
            && self.scales.iter().all(|s| s.max_percent_gap <= PERCENT_TOLERANCE && s.fisher_gap <= FISHER_TOLERANCE)
    }

    pub fn passed(&self) -> bool {
        self.levels_pass() && self.scales_pass()
    }

    pub fn render(&self) -> String {
        let mut out = String::from("Pass rate by intensity level (recomputed from per-fact margins)\n");
        out.push_str("level  label        passed   rate   printed   mean margin  printed mean\n");
        for l in &self.levels {
            out.push_str(&format!(
                "L{}     {:<12} {:>2}/{:<2}   {:>4.0}%  {:>2}/{:<2}     {:>+8.2}     {:>+8.2}{}\n",
                l.computed.level,
                l.printed.label,
                l.computed.passed,
                l.computed.n,
                100.0 * l.computed.rate,
                l.printed.passed,
                l.printed.facts,
                l.computed.mean_margin,
                l.printed.mean_margin,
                if l.counts_match { "  PASS" } else { "  FAIL" }
            ));
        }
        out.push_str("\nHeld-out pass rate by scale (mean ± population std over 5 splits)\n");
        out.push_str("scale  swiglu           printed      linear           printed      fisher p  printed  status\n");
        for s in &self.scales {
            out.push_str(&format!(
                "{:<6} {:>5.2} ± {:>5.2}    {:>4.1} ± {:>4.1}  {:>5.2} ± {:>5.2}    {:>4.1} ± {:>4.1}  {:>7.4}   {:.2}    {}\n",
                s.scale,
                s.swiglu.mean_percent,
                s.swiglu.std_percent,
                s.printed.swiglu_mean,
                s.printed.swiglu_std,
                s.linear.mean_percent,
                s.linear.std_percent,
                s.printed.linear_mean,
                s.printed.linear_std,
                s.fisher_p,
                s.printed.fisher_p,
                if s.max_percent_gap <= PERCENT_TOLERANCE && s.fisher_gap <= FISHER_TOLERANCE { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(&format!("\nsigned-rank p on 8B per-split pairs: {:.4} (exact, midranks)", self.wilcoxon_p_8b));
        if let Some(p) = self.wilcoxon_p_printed {
            out.push_str(&format!("; printed {p:.2} (informational)"));
        }
        out.push('\n');
        if let Some(b) = self.baseline_percent_printed {
            out.push_str(&format!("baseline held-out rate {b}% (printed only; per-split counts unavailable)\n"));
        }
        out.push_str(&format!("overall: {}\n", if self.passed() { "PASS" } else { "FAIL" }));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale,kind,passed,total,mean_percent,std_percent,printed_mean,printed_std,fisher_p,printed_fisher_p\n");
        for s in &self.scales {
            for (kind, st, pm, ps) in [
                ("swiglu", &s.swiglu, s.printed.swiglu_mean, s.printed.swiglu_std),
                ("linear", &s.linear, s.printed.linear_mean, s.printed.linear_std),
            ] {
                out.push_str(&format!(
                    "{},{kind},{},{},{:.4},{:.4},{pm},{ps},{:.6},{}\n",
                    s.scale, st.passed, st.total, st.mean_percent, st.std_percent, s.fisher_p, s.printed.fisher_p
                ));
            }
        }
        out
    }
}

/// Recomputes the level pass rates, per-scale pooled statistics, Fisher
/// p-values and the 8B signed-rank test from the golden data.
pub fn reproduce(g: &GoldenTables) -> Result<Reproduction> {
    let levels = intensity_report_reference(&g.fact_margins)
        .into_iter()
        .map(|computed| {
            let printed = g
                .levels
                .iter()
                .find(|r| r.intensity == computed.level)
                .cloned()
                .ok_or_else(|| Error::Format { what: "golden data", msg: format!("no printed row for L{}", computed.level) })?;
            let counts_match = computed.passed == printed.passed && computed.n == printed.facts;
            Ok(LevelCheck { computed, printed, counts_match })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut scales = Vec::new();
    for printed in &g.scales {
        let swiglu = pooled_stats(&g.split_counts(&printed.scale, AdapterKind::Swiglu))?;
        let linear = pooled_stats(&g.split_counts(&printed.scale, AdapterKind::Linear))?;
        let fisher_p = fisher_exact_two_sided(
            swiglu.passed,
            swiglu.total - swiglu.passed,
            linear.passed,
            linear.total - linear.passed,
        );
        let max_percent_gap = [
            swiglu.mean_percent - printed.swiglu_mean,
            swiglu.std_percent - printed.swiglu_std,
            linear.mean_percent - printed.linear_mean,
            linear.std_percent - printed.linear_std,
        ]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()));
        scales.push(ScaleCheck {
            scale: printed.scale.clone(),
            fisher_gap: (fisher_p - printed.fisher_p).abs(),
            swiglu,
            linear,
            fisher_p,
            printed: printed.clone(),
            max_percent_gap,
        });
    }

    let pairs: Vec<(f64, f64)> = g
        .split_counts("8B", AdapterKind::Swiglu)
        .iter()
        .zip(g.split_counts("8B", AdapterKind::Linear))
        .map(|(a, b)| (a.0 as f64, b.0 as f64))
        .collect();
    let wilcoxon_p_8b = wilcoxon_signed_rank(&pairs)?.p_value;

    Ok(Reproduction {
        levels,
        scales,
        wilcoxon_p_8b,
        wilcoxon_p_printed: g.note("wilcoxon_p_8b_printed").map(|n| n.value),
        baseline_percent_printed: g.note("baseline_heldout_percent").map(|n| n.value),
    })
}
