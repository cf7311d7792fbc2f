use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ResidualHook, Tokenizer, ToyModel};
use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::factset::Candidates;

/// Teacher-forced hidden states for one completion: `hidden[k]` is the
/// final-layer state at the position just before `targets[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub fact_id: String,
    pub candidate: u8,
    pub targets: Vec<u32>,
    pub hidden: Vec<Vec<f32>>,
}

/// Plain data detached from the model; nothing here can reach its weights.
#[derive(Clone, Debug, Default)]
pub struct HiddenStateCache {
    d_model: usize,
    records: Vec<CacheRecord>,
    index: HashMap<(String, u8), usize>,
}

impl PartialEq for HiddenStateCache {
    fn eq(&self, other: &Self) -> bool {
        self.d_model == other.d_model && self.records == other.records
    }
}

impl HiddenStateCache {
    pub fn new(d_model: usize) -> Self {
        Self { d_model, records: Vec::new(), index: HashMap::new() }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn records(&self) -> &[CacheRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: CacheRecord) -> Result<()> {
        if record.hidden.len() != record.targets.len() {
            return Err(Error::Shape(format!(
                "record `{}`/{}: {} hidden vectors for {} targets",
                record.fact_id,
                record.candidate,
                record.hidden.len(),
                record.targets.len()
            )));
        }
        if let Some(v) = record.hidden.iter().find(|v| v.len() != self.d_model) {
            return Err(Error::Shape(format!(
                "record `{}`: hidden vector of {} dims in a {}-dim cache",
                record.fact_id,
                v.len(),
                self.d_model
            )));
        }
        let key = (record.fact_id.clone(), record.candidate);
        if self.index.contains_key(&key) {
            return Err(Error::Shape(format!("duplicate record `{}`/{}", key.0, key.1)));
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, fact_id: &str, candidate: u8) -> Result<&CacheRecord> {
        self.index
            .get(&(fact_id.to_string(), candidate))
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::MissingRecord { fact: fact_id.to_string(), candidate })
    }

    /// The truth record followed by the three distractor records.
    pub fn fact_records(&self, fact_id: &str) -> Result<[&CacheRecord; 4]> {
        Ok([self.get(fact_id, 0)?, self.get(fact_id, 1)?, self.get(fact_id, 2)?, self.get(fact_id, 3)?])
    }

    /// `HSC1` little-endian format.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BinWriter::new(w);
        w.bytes(b"HSC1")?;
        w.u32(self.d_model as u32)?;
        w.u32(self.records.len() as u32)?;
        for r in &self.records {
            w.short_str(&r.fact_id)?;
            w.u8(r.candidate)?;
            w.u32(r.targets.len() as u32)?;
            for &t in &r.targets {
                w.u32(t)?;
            }
            for h in &r.hidden {
                w.f32s(h)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BinReader::new(r, "hidden-state cache");
        r.magic(b"HSC1")?;
        let d_model = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut cache = Self::new(d_model);
        for _ in 0..count {
            let fact_id = r.short_str()?;
            let candidate = r.u8()?;
            let n = r.u32()? as usize;
            let targets = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let hidden = (0..n).map(|_| r.f32s(d_model)).collect::<Result<Vec<_>>>()?;
            cache.push(CacheRecord { fact_id, candidate, targets, hidden })?;
        }
        r.expect_eof()?;
        Ok(cache)
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

/// Runs one forward pass per (item, candidate) over `context ++ completion`
/// and keeps the states that predict each completion token.
pub fn build_cache<F: Candidates, A: Candidates>(
    model: &ToyModel,
    facts: &[F],
    anchors: &[A],
    tokenizer: &dyn Tokenizer,
) -> Result<HiddenStateCache> {
    let mut cache = HiddenStateCache::new(model.d_model());
    let items = facts.iter().map(|f| f as &dyn Candidates).chain(anchors.iter().map(|a| a as &dyn Candidates));
    for item in items {
        for candidate in 0..4u8 {
            cache.push(candidate_record(model, item, candidate, tokenizer)?)?;
        }
    }
    Ok(cache)
}

pub(crate) fn candidate_record(
    model: &ToyModel,
    item: &dyn Candidates,
    candidate: u8,
    tokenizer: &dyn Tokenizer,
) -> Result<CacheRecord> {
    candidate_record_hooked(model, item, candidate, tokenizer, &mut |_, _, _| {})
}

/// Token ids of `context ++ candidate` and the context length.
pub(crate) fn candidate_tokens(
    model: &ToyModel,
    item: &dyn Candidates,
    candidate: u8,
    tokenizer: &dyn Tokenizer,
) -> Result<(Vec<u32>, usize)> {
    let context = tokenizer.encode(item.context());
    let targets = tokenizer.encode(item.candidate(candidate as usize));
    if context.is_empty() || targets.is_empty() {
        return Err(Error::InvalidFact {
            id: item.id().to_string(),
            msg: "context and completion must tokenize to at least one token".into(),
        });
    }
    let seq: Vec<u32> = context.iter().chain(&targets).copied().collect();
    let max = model.config().max_seq_len;
    if seq.len() > max {
        return Err(Error::SequenceTooLong { len: seq.len(), max, fact: Some(item.id().to_string()) });
    }
    Ok((seq, context.len()))
}

/// [`candidate_record`] with a residual-stream hook applied during the forward pass.
pub(crate) fn candidate_record_hooked(
    model: &ToyModel,
    item: &dyn Candidates,
    candidate: u8,
    tokenizer: &dyn Tokenizer,
    hook: ResidualHook,
) -> Result<CacheRecord> {
    let (seq, ctx) = candidate_tokens(model, item, candidate, tokenizer)?;
    let states = model.forward_hidden_hooked(&seq, hook)?;
    let targets = seq[ctx..].to_vec();
    let hidden = (0..targets.len()).map(|k| states.row(ctx + k - 1).to_vec()).collect();
    Ok(CacheRecord { fact_id: item.id().to_string(), candidate, targets, hidden })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factset::{AnchorFact, Fact};
    use crate::model::{ByteTokenizer, ToyModelConfig};

    fn fact(id: &str, truth: &str) -> Fact {
        Fact {
            id: id.into(),
            topic: "t".into(),
            intensity: 1,
            context: "ctx ".into(),
            truth: truth.into(),
            distractors: ["xy".into(), "zzzz".into(), "q".into()],
            source_note: None,
        }
    }

    #[test]
    fn record_shapes_follow_completion_length() {
        let m = ToyModel::new(ToyModelConfig::default()).unwrap();
        let c = build_cache(&m, &[fact("f", "abc")], &[] as &[AnchorFact], &ByteTokenizer).unwrap();
        assert_eq!(c.len(), 4);
        let r = c.get("f", 0).unwrap();
        assert_eq!(r.targets, vec![97, 98, 99]);
        assert_eq!(r.hidden.len(), 3);
        assert_eq!(c.get("f", 2).unwrap().hidden.len(), 4);
        assert!(matches!(c.get("g", 0), Err(Error::MissingRecord { .. })));
    }

    #[test]
    fn empty_corpus_gives_header_only_cache() {
        let m = ToyModel::new(ToyModelConfig::default()).unwrap();
        let c = build_cache(&m, &[] as &[Fact], &[] as &[AnchorFact], &ByteTokenizer).unwrap();
        assert!(c.is_empty());
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 12);
        assert_eq!(HiddenStateCache::read_from(buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn overlength_names_fact() {
        let cfg = ToyModelConfig { max_seq_len: 8, ..Default::default() };
        let m = ToyModel::new(cfg).unwrap();
        let err = build_cache(&m, &[fact("long-one", "abcdefgh")], &[] as &[AnchorFact], &ByteTokenizer).unwrap_err();
        assert!(err.to_string().contains("long-one"), "{err}");
    }

    #[test]
    fn hsc1_round_trip() {
        let m = ToyModel::new(ToyModelConfig::default()).unwrap();
        let c = build_cache(&m, &[fact("a", "one"), fact("b", "two!")], &[] as &[AnchorFact], &ByteTokenizer).unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HSC1");
        let back = HiddenStateCache::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert!(HiddenStateCache::read_from(&buf[..buf.len() - 1]).is_err());
    }
}
