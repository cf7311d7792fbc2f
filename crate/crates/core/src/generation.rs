//! Greedy decoding with an adapter attached in one of four modes, and a
//! bigram repetition proxy for degenerate output.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::model::{project_logits, KvCache, ToyModel};
use crate::numerics::argmax;

pub const DEFAULT_MAX_TOKENS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    /// No adapter.
    Baseline,
    /// Adapter on the residual entering the final block at every position,
    /// so the final block's keys and values see adapted states.
    AllPositions,
    /// Adapter on the frontier's final hidden state only; the KV cache never sees it.
    LastPosition,
    /// `logits + adapter(logits)` at the frontier.
    LogitSpace,
}

impl GenMode {
    pub const ALL: [GenMode; 4] = [GenMode::Baseline, GenMode::AllPositions, GenMode::LastPosition, GenMode::LogitSpace];

    pub fn name(self) -> &'static str {
        match self {
            GenMode::Baseline => "baseline",
            GenMode::AllPositions => "all_positions",
            GenMode::LastPosition => "last_position",
            GenMode::LogitSpace => "logit_space",
        }
    }
}

impl fmt::Display for GenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GenMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown generation mode `{s}`")))
    }
}

fn check_mode<'a>(model: &ToyModel, mode: GenMode, adapter: Option<&'a Adapter>) -> Result<Option<&'a Adapter>> {
    let need_hidden = match mode {
        GenMode::Baseline => return Ok(None),
        GenMode::AllPositions | GenMode::LastPosition => true,
        GenMode::LogitSpace => false,
    };
    let a = adapter.ok_or_else(|| Error::IncompatibleMode {
        mode: mode.to_string(),
        detail: "it needs an adapter".into(),
    })?;
    if a.kind().is_hidden_state() != need_hidden {
        return Err(Error::IncompatibleMode {
            mode: mode.to_string(),
            detail: format!("it does not accept a {} adapter", a.kind()),
        });
    }
    let dim = if need_hidden { model.d_model() } else { model.config().vocab_size };
    if a.input_dim() != dim {
        return Err(Error::Shape(format!("adapter expects {} inputs, model provides {dim}", a.input_dim())));
    }
    Ok(Some(a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// Generated tokens only (the prompt is not repeated).
    pub tokens: Vec<u32>,
    pub kv: KvCache,
}

/// Greedy decoding of `max_tokens` tokens after `prompt`.
pub fn decode(
    model: &ToyModel,
    prompt: &[u32],
    mode: GenMode,
    adapter: Option<&Adapter>,
    max_tokens: usize,
) -> Result<DecodeOutput> {
    decode_observed(model, prompt, mode, adapter, max_tokens, &mut |_, _| {})
}

/// [`decode`], calling `observe(sequence_so_far, kv)` after every token is
/// fed through the model (prompt tokens included).
pub fn decode_observed(
    model: &ToyModel,
    prompt: &[u32],
    mode: GenMode,
    adapter: Option<&Adapter>,
    max_tokens: usize,
    observe: &mut dyn FnMut(&[u32], &KvCache),
) -> Result<DecodeOutput> {
    let adapter = check_mode(model, mode, adapter)?;
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    if max_tokens == 0 {
        return Err(Error::Config("max_tokens must be at least 1".into()));
    }
    let fed = prompt.len() + max_tokens - 1;
    let max = model.config().max_seq_len;
    if fed > max {
        return Err(Error::SequenceTooLong { len: fed, max, fact: None });
    }

    let final_site = model.n_layers() - 1;
    let mut hook = |site: usize, _pos: usize, x: &mut [f32]| {
        if let (GenMode::AllPositions, Some(a), true) = (mode, adapter, site == final_site) {
            let y = a.apply(x).expect("adapter width checked against the model");
            x.copy_from_slice(&y);
        }
    };

    let mut kv = model.new_kv_cache();
    let mut seq: Vec<u32> = Vec::with_capacity(fed + 1);
    let mut generated = Vec::with_capacity(max_tokens);
    let mut next = prompt[0];
    let mut pending = prompt[1..].iter().copied();
    loop {
        let h = model.step(next, &mut kv, &mut hook)?;
        seq.push(next);
        observe(&seq, &kv);
        if let Some(t) = pending.next() {
            next = t;
            continue;
        }
        let logits = match (mode, adapter) {
            (GenMode::LastPosition, Some(a)) => project_logits(&a.apply(&h)?, model.embed())?,
            (GenMode::LogitSpace, Some(a)) => a.apply(&project_logits(&h, model.embed())?)?,
            _ => project_logits(&h, model.embed())?,
        };
        let token = argmax(&logits) as u32;
        generated.push(token);
        if generated.len() == max_tokens {
            break;
        }
        next = token;
    }
    Ok(DecodeOutput { tokens: generated, kv })
}

/// Baseline greedy decoding by full recomputation at every step, without a
/// KV cache. Reference for the cached path.
pub fn decode_uncached(model: &ToyModel, prompt: &[u32], max_tokens: usize) -> Result<Vec<u32>> {
    if max_tokens == 0 {
        return Err(Error::Config("max_tokens must be at least 1".into()));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(max_tokens);
    for _ in 0..max_tokens {
        let states = model.forward_hidden(&seq)?;
        let logits = project_logits(states.row(states.rows() - 1), model.embed())?;
        let t = argmax(&logits) as u32;
        out.push(t);
        seq.push(t);
    }
    Ok(out)
}

/// KV cache from feeding `tokens` through the unadapted model.
pub fn baseline_prefill(model: &ToyModel, tokens: &[u32]) -> Result<KvCache> {
    let mut kv = model.new_kv_cache();
    for &t in tokens {
        model.step(t, &mut kv, &mut |_, _, _| {})?;
    }
    Ok(kv)
}

/// `1 − distinct bigrams / total bigrams`; 0 for all-distinct, near 1 for loops.
pub fn repetition_score(tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Config(format!("repetition score needs at least 2 tokens, got {}", tokens.len())));
    }
    let total = tokens.len() - 1;
    let distinct: HashSet<(u32, u32)> = tokens.windows(2).map(|w| (w[0], w[1])).collect();
    Ok(1.0 - distinct.len() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterKind;
    use crate::model::ToyModelConfig;
    use crate::numerics::Mat;
    use rand::SeedableRng;

    fn model() -> ToyModel {
        ToyModel::new(ToyModelConfig { max_seq_len: 48, ..Default::default() }).unwrap()
    }

    fn scrambled(kind: AdapterKind, dim: usize, seed: u64) -> Adapter {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut a = Adapter::init(kind, dim, kind.default_d_inner(), seed).unwrap();
        for m in a.tensors_mut() {
            *m = Mat::gaussian(m.rows(), m.cols(), 0.3, &mut rng);
        }
        a
    }

    #[test]
    fn repetition_examples() {
        assert_eq!(repetition_score(&[1, 2, 3, 4]).unwrap(), 0.0);
        assert_eq!(repetition_score(&[7, 7, 7, 7, 7]).unwrap(), 0.75);
        assert!((repetition_score(&[1, 2, 1, 2, 1, 2]).unwrap() - 0.6).abs() < 1e-12);
        assert!(repetition_score(&[1]).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in GenMode::ALL {
            assert_eq!(m.name().parse::<GenMode>().unwrap(), m);
        }
        assert!("sideways".parse::<GenMode>().is_err());
    }

    #[test]
    fn incompatible_adapters_rejected() {
        let m = model();
        let logit = Adapter::init(AdapterKind::Logit, 256, 8, 0).unwrap();
        let lin = Adapter::init(AdapterKind::Linear, 32, 96, 0).unwrap();
        assert!(matches!(decode(&m, &[1], GenMode::LastPosition, Some(&logit), 2), Err(Error::IncompatibleMode { .. })));
        assert!(matches!(decode(&m, &[1], GenMode::LogitSpace, Some(&lin), 2), Err(Error::IncompatibleMode { .. })));
        assert!(matches!(decode(&m, &[1], GenMode::AllPositions, None, 2), Err(Error::IncompatibleMode { .. })));
        assert!(decode(&m, &[1], GenMode::Baseline, None, 0).is_err());
        assert!(decode(&m, &[], GenMode::Baseline, None, 2).is_err());
        assert!(matches!(decode(&m, &[1; 40], GenMode::Baseline, None, 10), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn cached_matches_uncached() {
        let m = model();
        let prompt: Vec<u32> = b"the quick".iter().map(|&b| b as u32).collect();
        let cached = decode(&m, &prompt, GenMode::Baseline, None, 12).unwrap();
        assert_eq!(cached.tokens, decode_uncached(&m, &prompt, 12).unwrap());
        assert_eq!(cached.kv.len(), prompt.len() + 11);
    }

    #[test]
    fn last_position_never_touches_the_cache() {
        let m = model();
        let a = scrambled(AdapterKind::Swiglu, 32, 4);
        let prompt: Vec<u32> = b"hello".iter().map(|&b| b as u32).collect();
        let mut checked = 0;
        let out = decode_observed(&m, &prompt, GenMode::LastPosition, Some(&a), 10, &mut |seq, kv| {
            assert!(kv.bits_eq(&baseline_prefill(&m, seq).unwrap()));
            checked += 1;
        })
        .unwrap();
        assert_eq!(checked, prompt.len() + 9);
        assert_ne!(out.tokens, decode(&m, &prompt, GenMode::Baseline, None, 10).unwrap().tokens);
    }

    #[test]
    fn all_positions_changes_final_layer_cache() {
        let m = model();
        let a = scrambled(AdapterKind::Linear, 32, 9);
        let prompt: Vec<u32> = b"hello".iter().map(|&b| b as u32).collect();
        let out = decode(&m, &prompt, GenMode::AllPositions, Some(&a), 4).unwrap();
        let fed: Vec<u32> = prompt.iter().chain(&out.tokens[..3]).copied().collect();
        let base = baseline_prefill(&m, &fed).unwrap();
        assert!(!out.kv.layer_eq(&base, m.n_layers() - 1));
        // earlier layers run before the injection site
        assert!(out.kv.layer_eq(&base, 0));
    }
}
