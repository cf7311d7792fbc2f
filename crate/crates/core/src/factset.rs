//! Fact corpus: schema, JSON Lines I/O, validation, seeded splits, the
//! shipped reference margins, and a synthetic corpus generator for the toy model.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::score_direct;
use crate::model::{ByteTokenizer, ToyModel};

/// Expected facts per intensity level L1..L4 in the 31-fact corpus.
pub const PAPER_LEVEL_COUNTS: [usize; 4] = [9, 9, 8, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactRole {
    Discriminating,
    Anchor,
}

/// Anything that can be scored as a context followed by four candidate
/// completions: index 0 is the truth, 1..=3 the distractors.
pub trait Candidates {
    fn id(&self) -> &str;
    fn context(&self) -> &str;
    fn truth(&self) -> &str;
    fn distractors(&self) -> &[String; 3];
    fn role(&self) -> FactRole;

    fn candidate(&self, index: usize) -> &str {
        match index {
            0 => self.truth(),
            i => &self.distractors()[i - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub id: String,
    pub topic: String,
    pub intensity: u8,
    pub context: String,
    pub truth: String,
    pub distractors: [String; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorFact {
    pub id: String,
    pub context: String,
    pub truth: String,
    pub distractors: [String; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_note: Option<String>,
}

impl Candidates for Fact {
    fn id(&self) -> &str {
        &self.id
    }
    fn context(&self) -> &str {
        &self.context
    }
    fn truth(&self) -> &str {
        &self.truth
    }
    fn distractors(&self) -> &[String; 3] {
        &self.distractors
    }
    fn role(&self) -> FactRole {
        FactRole::Discriminating
    }
}

impl Candidates for AnchorFact {
    fn id(&self) -> &str {
        &self.id
    }
    fn context(&self) -> &str {
        &self.context
    }
    fn truth(&self) -> &str {
        &self.truth
    }
    fn distractors(&self) -> &[String; 3] {
        &self.distractors
    }
    fn role(&self) -> FactRole {
        FactRole::Anchor
    }
}

// Lenient wire shapes so that invariant violations can name the fact id.
#[derive(Deserialize)]
struct RawFact {
    id: String,
    topic: String,
    intensity: i64,
    context: String,
    truth: String,
    distractors: Vec<String>,
    #[serde(default)]
    source_note: Option<String>,
}

#[derive(Deserialize)]
struct RawAnchor {
    id: String,
    context: String,
    truth: String,
    distractors: Vec<String>,
    #[serde(default)]
    source_note: Option<String>,
}

fn check_completions(id: &str, context: &str, truth: &str, distractors: Vec<String>) -> Result<[String; 3]> {
    let invalid = |msg: String| Error::InvalidFact { id: id.to_string(), msg };
    if id.is_empty() {
        return Err(invalid("empty id".into()));
    }
    if context.is_empty() {
        return Err(invalid("empty context".into()));
    }
    if truth.is_empty() {
        return Err(invalid("empty truth completion".into()));
    }
    let n = distractors.len();
    let distractors: [String; 3] = distractors
        .try_into()
        .map_err(|_| invalid(format!("expected exactly 3 distractors, found {n}")))?;
    for (i, d) in distractors.iter().enumerate() {
        if d.is_empty() {
            return Err(invalid(format!("distractor {} is empty", i + 1)));
        }
        if d == truth {
            return Err(invalid(format!("distractor {} equals the truth", i + 1)));
        }
    }
    Ok(distractors)
}

impl Fact {
    pub fn validate(&self) -> Result<()> {
        check_completions(&self.id, &self.context, &self.truth, self.distractors.to_vec())?;
        if !(1..=4).contains(&self.intensity) {
            return Err(Error::InvalidFact {
                id: self.id.clone(),
                msg: format!("intensity {} outside 1..=4", self.intensity),
            });
        }
        Ok(())
    }
}

fn parse_lines<T: DeserializeOwned>(text: &str) -> Result<Vec<(usize, T)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })
        })
        .collect()
}

fn check_unique<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::InvalidFact { id: id.to_string(), msg: "duplicate id".into() });
        }
    }
    Ok(())
}

/// Parses the fact JSON Lines format; blank lines are skipped.
pub fn parse_facts(text: &str) -> Result<Vec<Fact>> {
    let raw = parse_lines::<RawFact>(text)?;
    let mut facts = Vec::with_capacity(raw.len());
    for (_, r) in raw {
        let distractors = check_completions(&r.id, &r.context, &r.truth, r.distractors)?;
        let intensity = u8::try_from(r.intensity)
            .ok()
            .filter(|l| (1..=4).contains(l))
            .ok_or_else(|| Error::InvalidFact {
                id: r.id.clone(),
                msg: format!("intensity {} outside 1..=4", r.intensity),
            })?;
        facts.push(Fact {
            id: r.id,
            topic: r.topic,
            intensity,
            context: r.context,
            truth: r.truth,
            distractors,
            source_note: r.source_note,
        });
    }
    check_unique(facts.iter().map(|f| f.id.as_str()))?;
    Ok(facts)
}

pub fn parse_anchors(text: &str) -> Result<Vec<AnchorFact>> {
    let raw = parse_lines::<RawAnchor>(text)?;
    let mut anchors = Vec::with_capacity(raw.len());
    for (_, r) in raw {
        let distractors = check_completions(&r.id, &r.context, &r.truth, r.distractors)?;
        anchors.push(AnchorFact {
            id: r.id,
            context: r.context,
            truth: r.truth,
            distractors,
            source_note: r.source_note,
        });
    }
    check_unique(anchors.iter().map(|a| a.id.as_str()))?;
    Ok(anchors)
}

pub fn load_facts(path: &Path) -> Result<Vec<Fact>> {
    parse_facts(&std::fs::read_to_string(path)?)
}

pub fn load_anchors(path: &Path) -> Result<Vec<AnchorFact>> {
    parse_anchors(&std::fs::read_to_string(path)?)
}

/// One JSON object per line, in slice order.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LevelCounts(pub [usize; 4]);

impl LevelCounts {
    pub fn of(facts: &[Fact]) -> Self {
        let mut c = [0usize; 4];
        for f in facts {
            c[(f.intensity - 1) as usize] += 1;
        }
        Self(c)
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

/// Checks the {9, 9, 8, 5} intensity shape. The topic count is not checked.
pub fn validate_paper_corpus(facts: &[Fact]) -> Result<LevelCounts> {
    let counts = LevelCounts::of(facts);
    if counts.0 != PAPER_LEVEL_COUNTS {
        return Err(Error::CorpusShape { expected: PAPER_LEVEL_COUNTS, actual: counts.0 });
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub split_index: usize,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub heldout_ids: Vec<String>,
}

/// `n_splits` independent uniform partitions: a seeded Fisher–Yates shuffle
/// per split (ChaCha stream = split index), first `train_size` ids train.
/// Both halves keep corpus order.
pub fn make_splits(ids: &[&str], n_splits: usize, train_size: usize, seed: u64) -> Result<Vec<SplitSpec>> {
    if n_splits == 0 {
        return Err(Error::Split("n_splits must be at least 1".into()));
    }
    if train_size >= ids.len() {
        return Err(Error::Split(format!(
            "train_size {train_size} must be smaller than the corpus ({} facts)",
            ids.len()
        )));
    }
    check_unique(ids.iter().copied())?;
    Ok((0..n_splits)
        .map(|split_index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(split_index as u64);
            let mut order: Vec<usize> = (0..ids.len()).collect();
            order.shuffle(&mut rng);
            let mut in_train = vec![false; ids.len()];
            for &i in &order[..train_size] {
                in_train[i] = true;
            }
            let pick = |want: bool| {
                ids.iter().zip(&in_train).filter(|(_, &t)| t == want).map(|(id, _)| id.to_string()).collect()
            };
            SplitSpec { split_index, seed, train_ids: pick(true), heldout_ids: pick(false) }
        })
        .collect())
}

pub fn fact_ids(facts: &[Fact]) -> Vec<&str> {
    facts.iter().map(|f| f.id.as_str()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMargin {
    pub topic: String,
    pub intensity: u8,
    pub margin: f64,
}

/// Baseline margins keyed by (topic, intensity).
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceMargins {
    entries: Vec<ReferenceMargin>,
}

impl ReferenceMargins {
    pub fn parse(text: &str) -> Result<Self> {
        let entries: Vec<ReferenceMargin> =
            parse_lines::<ReferenceMargin>(text)?.into_iter().map(|(_, r)| r).collect();
        let mut seen = HashSet::new();
        for e in &entries {
            if !(1..=4).contains(&e.intensity) {
                return Err(Error::Parse { line: 0, msg: format!("{} intensity {}", e.topic, e.intensity) });
            }
            if !seen.insert((e.topic.as_str(), e.intensity)) {
                return Err(Error::Parse { line: 0, msg: format!("duplicate entry {} L{}", e.topic, e.intensity) });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ReferenceMargin] {
        &self.entries
    }

    pub fn get(&self, topic: &str, intensity: u8) -> Option<f64> {
        self.entries.iter().find(|e| e.topic == topic && e.intensity == intensity).map(|e| e.margin)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn level_counts(&self) -> LevelCounts {
        let mut c = [0usize; 4];
        for e in &self.entries {
            c[(e.intensity - 1) as usize] += 1;
        }
        LevelCounts(c)
    }

    pub fn topics(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.topic.as_str()) {
                out.push(&e.topic);
            }
        }
        out
    }
}

/// The 31-fact corpus shape with placeholder completion text, one fact per
/// reference-margin entry. Ids are `<topic-slug>-l<level>`.
pub fn placeholder_corpus(refs: &ReferenceMargins) -> Vec<Fact> {
    refs.entries()
        .iter()
        .map(|e| {
            let tag = format!("{} L{}", e.topic, e.intensity);
            Fact {
                id: format!("{}-l{}", e.topic.to_lowercase().replace(' ', "-"), e.intensity),
                topic: e.topic.clone(),
                intensity: e.intensity,
                context: format!("[{tag}] context"),
                truth: format!("[{tag}] factual completion"),
                distractors: [1, 2, 3].map(|i| format!("[{tag}] distractor {i}")),
                source_note: Some("placeholder text; margin from the reference table".into()),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    /// Minimum fraction of facts whose baseline margin is negative.
    pub negative_fraction: f64,
    pub context_len: usize,
    pub completion_len: usize,
    pub n_topics: usize,
    /// Draw budget per requested fact before giving up.
    pub draws_per_fact: usize,
    /// Anchors are kept only if their baseline margin lies in this open interval.
    pub anchor_band: (f64, f64),
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { negative_fraction: 0.5, context_len: 12, completion_len: 4, n_topics: 8, draws_per_fact: 200, anchor_band: (0.0, 0.1) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub facts: Vec<Fact>,
    pub anchors: Vec<AnchorFact>,
}

const SYNTH_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| SYNTH_ALPHABET[rng.random_range(0..SYNTH_ALPHABET.len())] as char).collect()
}

fn random_candidates(rng: &mut ChaCha8Rng, opts: &SynthOptions) -> (String, String, [String; 3]) {
    let context = random_text(rng, opts.context_len);
    let mut picked: Vec<String> = Vec::with_capacity(4);
    while picked.len() < 4 {
        let c = random_text(rng, opts.completion_len);
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    let truth = picked.remove(0);
    let distractors: [String; 3] = picked.try_into().expect("three distractors");
    (context, truth, distractors)
}

/// Level for the i-th of n synthetic facts, in the 9:9:8:5 proportion.
fn synth_level(i: usize, n: usize) -> u8 {
    let pos = (i as f64 + 0.5) / n as f64;
    let cuts = [9.0 / 31.0, 18.0 / 31.0, 26.0 / 31.0];
    1 + cuts.iter().filter(|&&c| pos > c).count() as u8
}

/// Random byte-text facts selected against `model` so that at least
/// `opts.negative_fraction` of them start with a negative margin. Anchors
/// are facts the model already prefers, drawn from `opts.anchor_band`; with
/// the default band every anchor starts below the training floor, where the
/// anchor hinge holds it.
pub fn synth_factset(
    seed: u64,
    n_facts: usize,
    n_anchors: usize,
    model: &ToyModel,
    opts: &SynthOptions,
) -> Result<SynthCorpus> {
    let tok = ByteTokenizer;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want_neg = (opts.negative_fraction * n_facts as f64).ceil() as usize;
    let want_other = n_facts - want_neg.min(n_facts);
    let budget = opts.draws_per_fact * (n_facts + n_anchors).max(1);

    let mut negatives = Vec::new();
    let mut others = Vec::new();
    let mut anchors = Vec::new();
    let mut draws = 0;
    while negatives.len() < want_neg || others.len() < want_other || anchors.len() < n_anchors {
        if draws == budget {
            return Err(Error::SynthExhausted { wanted: want_neg, draws });
        }
        draws += 1;
        let (context, truth, distractors) = random_candidates(&mut rng, opts);
        let probe = AnchorFact { id: String::new(), context, truth, distractors, source_note: None };
        let margin = score_direct(model, &tok, &probe, None)?.margin;
        let (lo, hi) = opts.anchor_band;
        if anchors.len() < n_anchors && margin > lo && margin < hi {
            anchors.push(probe);
        } else if margin < 0.0 && negatives.len() < want_neg {
            negatives.push(probe);
        } else if others.len() < want_other {
            others.push(probe);
        }
    }

    // interleave so that negatives are spread over levels and topics
    let mut drawn = Vec::with_capacity(n_facts);
    let (mut ni, mut oi) = (negatives.into_iter(), others.into_iter());
    for i in 0..n_facts {
        let take_neg = (i * want_neg) / n_facts.max(1) != ((i + 1) * want_neg) / n_facts.max(1);
        let next = if take_neg { ni.next().or_else(|| oi.next()) } else { oi.next().or_else(|| ni.next()) };
        drawn.push(next.expect("enough candidates drawn"));
    }

    let facts = drawn
        .into_iter()
        .enumerate()
        .map(|(i, p)| Fact {
            id: format!("synth-{i:03}"),
            topic: format!("topic-{}", i % opts.n_topics.max(1)),
            intensity: synth_level(i, n_facts),
            context: p.context,
            truth: p.truth,
            distractors: p.distractors,
            source_note: None,
        })
        .collect();
    let anchors = anchors
        .into_iter()
        .enumerate()
        .map(|(i, mut a)| {
            a.id = format!("anchor-{i:02}");
            a
        })
        .collect();
    Ok(SynthCorpus { facts, anchors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, intensity: i64, distractors: &[&str]) -> String {
        serde_json::json!({
            "id": id, "topic": "t", "intensity": intensity, "context": "c",
            "truth": "yes", "distractors": distractors,
        })
        .to_string()
    }

    #[test]
    fn parses_minimal_record() {
        let facts = parse_facts(&line("t1", 1, &["a", "b", "c"])).unwrap();
        assert_eq!(facts.len(), 1);
        assert_eq!(facts[0].id, "t1");
        assert_eq!(facts[0].distractors, ["a", "b", "c"]);
    }

    #[test]
    fn two_distractors_names_the_fact() {
        let text = format!("{}\n{}", line("ok", 1, &["a", "b", "c"]), line("short", 2, &["a", "b"]));
        match parse_facts(&text) {
            Err(Error::InvalidFact { id, msg }) => {
                assert_eq!(id, "short");
                assert!(msg.contains("3 distractors"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violations() {
        assert!(matches!(parse_facts(&line("x", 5, &["a", "b", "c"])), Err(Error::InvalidFact { .. })));
        assert!(matches!(parse_facts(&line("x", 1, &["a", "yes", "c"])), Err(Error::InvalidFact { .. })));
        assert!(matches!(parse_facts(&line("x", 1, &["a", "", "c"])), Err(Error::InvalidFact { .. })));
        let dup = format!("{}\n{}", line("d", 1, &["a", "b", "c"]), line("d", 1, &["a", "b", "c"]));
        assert!(matches!(parse_facts(&dup), Err(Error::InvalidFact { id, .. }) if id == "d"));
    }

    #[test]
    fn parse_error_reports_line_number() {
        let text = format!("{}\n\nnot json", line("a", 1, &["x", "y", "z"]));
        assert!(matches!(parse_facts(&text), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn corpus_validation() {
        assert!(matches!(validate_paper_corpus(&[]), Err(Error::CorpusShape { .. })));
        let one = parse_facts(&line("a", 1, &["x", "y", "z"])).unwrap().remove(0);
        let all_l1: Vec<Fact> = (0..31).map(|i| Fact { id: format!("f{i}"), ..one.clone() }).collect();
        match validate_paper_corpus(&all_l1) {
            Err(Error::CorpusShape { expected, actual }) => {
                assert_eq!(expected, [9, 9, 8, 5]);
                assert_eq!(actual, [31, 0, 0, 0]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..31).map(|i| format!("f{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let splits = make_splits(&refs, 5, 15, 7).unwrap();
        assert_eq!(splits.len(), 5);
        for s in &splits {
            assert_eq!(s.train_ids.len(), 15);
            assert_eq!(s.heldout_ids.len(), 16);
            assert!(s.train_ids.iter().all(|t| !s.heldout_ids.contains(t)));
        }
        assert_ne!(splits[0].train_ids, splits[1].train_ids);
        assert_eq!(splits, make_splits(&refs, 5, 15, 7).unwrap());

        let tiny = make_splits(&["a", "b"], 1, 1, 99).unwrap();
        assert_eq!((tiny[0].train_ids.len(), tiny[0].heldout_ids.len()), (1, 1));

        assert!(make_splits(&refs, 5, 31, 7).is_err());
        assert!(make_splits(&refs, 0, 15, 7).is_err());
    }

    #[test]
    fn synth_levels_follow_paper_shape_at_31() {
        let mut c = [0; 4];
        for i in 0..31 {
            c[(synth_level(i, 31) - 1) as usize] += 1;
        }
        assert_eq!(c, PAPER_LEVEL_COUNTS);
    }
}
