//! The frozen feature extractor: a small pre-norm decoder-only transformer
//! with tied embeddings, plus the hidden-state cache built from it.
//!
//! `forward_hidden` returns states *after* the final RMS norm, i.e. the exact
//! vectors that the tied embedding projects to logits. Adapters attach there.

mod cache;
mod kv;
mod tokenizer;

pub use cache::{build_cache, CacheRecord, HiddenStateCache};
pub(crate) use cache::{candidate_record, candidate_record_hooked, candidate_tokens};
pub use kv::KvCache;
pub use tokenizer::{ByteTokenizer, Tokenizer};

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::numerics::{dot, silu, Mat};

const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 256,
            max_seq_len: 128,
            init_seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Tied input/output embedding, `vocab_size × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    weight: Mat,
}

impl EmbeddingTable {
    pub fn new(weight: Mat) -> Self {
        Self { weight }
    }

    pub fn weight(&self) -> &Mat {
        &self.weight
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_model(&self) -> usize {
        self.weight.cols()
    }

    /// Writes the `EMB1` format.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BinWriter::new(w);
        w.bytes(b"EMB1")?;
        w.u32(self.vocab_size() as u32)?;
        w.u32(self.d_model() as u32)?;
        w.f32s(self.weight.data())?;
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BinReader::new(r, "embedding");
        r.magic(b"EMB1")?;
        let vocab = r.u32()? as usize;
        let d = r.u32()? as usize;
        let data = r.f32s(vocab * d)?;
        r.expect_eof()?;
        Ok(Self::new(Mat::from_vec(vocab, d, data)?))
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

/// `logits[v] = ⟨h, W_embed[v]⟩`.
pub fn project_logits(h: &[f32], embed: &EmbeddingTable) -> Result<Vec<f32>> {
    if h.len() != embed.d_model() {
        return Err(Error::Shape(format!(
            "hidden state has {} dims, embedding expects {}",
            h.len(),
            embed.d_model()
        )));
    }
    Ok(embed.weight.matvec(h))
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    attn_norm: Mat,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    mlp_norm: Mat,
    w_gate: Mat,
    w_up: Mat,
    w_down: Mat,
}

impl Block {
    fn tensors(&self) -> [(&'static str, &Mat); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn mlp(&self, x: &[f32]) -> Vec<f32> {
        let n = rms_norm(x, self.mlp_norm.data());
        let g = self.w_gate.matvec(&n);
        let u = self.w_up.matvec(&n);
        let z: Vec<f32> = g.iter().zip(&u).map(|(&g, &u)| (silu(g as f64) * u as f64) as f32).collect();
        self.w_down.matvec(&z)
    }
}

/// Residual-stream callback: `(site, position, state)`. Site `ℓ < n_layers`
/// is the stream entering block `ℓ`; site `n_layers` is the stream leaving
/// the last block, just before the final norm. The output of block `ℓ` is
/// therefore site `ℓ + 1`.
pub type ResidualHook<'a> = &'a mut dyn FnMut(usize, usize, &mut [f32]);

/// The frozen model. Weights are private and never mutated after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    embed: EmbeddingTable,
    blocks: Vec<Block>,
    final_norm: Mat,
}

impl ToyModel {
    /// Deterministic initialization from `config.init_seed`; every tensor
    /// draws from its own ChaCha stream.
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut stream = 0u64;
        let mut gaussian = |rows: usize, cols: usize, std: f32| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
            rng.set_stream(stream);
            stream += 1;
            Mat::gaussian(rows, cols, std, &mut rng)
        };
        let ones = |n: usize| Mat::from_vec(1, n, vec![1.0; n]).expect("positive dims");

        let embed = EmbeddingTable::new(gaussian(config.vocab_size, d, 2.0 / (d as f32).sqrt()));
        let in_std = 1.0 / (d as f32).sqrt();
        let ff_std = 1.0 / (config.d_ff as f32).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                attn_norm: ones(d),
                wq: gaussian(d, d, in_std),
                wk: gaussian(d, d, in_std),
                wv: gaussian(d, d, in_std),
                wo: gaussian(d, d, in_std),
                mlp_norm: ones(d),
                w_gate: gaussian(config.d_ff, d, in_std),
                w_up: gaussian(config.d_ff, d, in_std),
                w_down: gaussian(d, config.d_ff, ff_std),
            })
            .collect();
        Ok(Self { final_norm: ones(d), config, embed, blocks })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn embed(&self) -> &EmbeddingTable {
        &self.embed
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn check_tokens(&self, tokens: &[u32], start: usize) -> Result<()> {
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        if start + tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: start + tokens.len(),
                max: self.config.max_seq_len,
                fact: None,
            });
        }
        Ok(())
    }

    fn embed_input(&self, token: u32, pos: usize) -> Vec<f32> {
        let d = self.config.d_model;
        self.embed
            .weight
            .row(token as usize)
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
                let angle = pos as f64 * freq;
                let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                (e as f64 + pe) as f32
            })
            .collect()
    }

    /// Final-layer hidden states (after the final norm), one row per position.
    pub fn forward_hidden(&self, tokens: &[u32]) -> Result<Mat> {
        self.forward_hidden_hooked(tokens, &mut |_, _, _| {})
    }

    /// Full-sequence forward pass with a residual-stream hook.
    pub fn forward_hidden_hooked(&self, tokens: &[u32], hook: ResidualHook) -> Result<Mat> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        self.check_tokens(tokens, 0)?;
        let residual = self.run_full(tokens, hook);
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for x in &residual {
            data.extend(rms_norm(x, self.final_norm.data()));
        }
        Mat::from_vec(tokens.len(), d, data)
    }

    /// Residual stream at every site (`n_layers + 1` matrices of positions × d_model).
    pub fn residual_streams(&self, tokens: &[u32]) -> Result<Vec<Mat>> {
        let n_sites = self.config.n_layers + 1;
        let mut sites: Vec<Vec<f32>> = vec![Vec::new(); n_sites];
        self.forward_hidden_hooked(tokens, &mut |site, _pos, x| sites[site].extend_from_slice(x))?;
        sites
            .into_iter()
            .map(|data| Mat::from_vec(tokens.len(), self.config.d_model, data))
            .collect()
    }

    fn run_full(&self, tokens: &[u32], hook: ResidualHook) -> Vec<Vec<f32>> {
        let mut xs: Vec<Vec<f32>> =
            tokens.iter().enumerate().map(|(p, &t)| self.embed_input(t, p)).collect();
        for (layer, block) in self.blocks.iter().enumerate() {
            for (p, x) in xs.iter_mut().enumerate() {
                hook(layer, p, x);
            }
            let normed: Vec<Vec<f32>> = xs.iter().map(|x| rms_norm(x, block.attn_norm.data())).collect();
            let qs: Vec<Vec<f32>> = normed.iter().map(|n| block.wq.matvec(n)).collect();
            let ks: Vec<Vec<f32>> = normed.iter().map(|n| block.wk.matvec(n)).collect();
            let vs: Vec<Vec<f32>> = normed.iter().map(|n| block.wv.matvec(n)).collect();
            for (p, x) in xs.iter_mut().enumerate() {
                let a = attend(&qs[p], &ks[..=p], &vs[..=p], self.config.n_heads);
                add_assign(x, &block.wo.matvec(&a));
                let m = block.mlp(x);
                add_assign(x, &m);
            }
        }
        for (p, x) in xs.iter_mut().enumerate() {
            hook(self.config.n_layers, p, x);
        }
        xs
    }

    /// Processes one token at position `kv.len()`, appending its keys and
    /// values, and returns its final hidden state.
    pub fn step(&self, token: u32, kv: &mut KvCache, hook: ResidualHook) -> Result<Vec<f32>> {
        kv.check_shape(self.config.n_layers, self.config.d_model)?;
        let p = kv.len();
        self.check_tokens(&[token], p)?;
        let mut x = self.embed_input(token, p);
        for (layer, block) in self.blocks.iter().enumerate() {
            hook(layer, p, &mut x);
            let n = rms_norm(&x, block.attn_norm.data());
            let q = block.wq.matvec(&n);
            kv.push(layer, block.wk.matvec(&n), block.wv.matvec(&n));
            let (keys, values) = kv.layer(layer);
            let a = attend(&q, keys, values, self.config.n_heads);
            add_assign(&mut x, &block.wo.matvec(&a));
            let m = block.mlp(&x);
            add_assign(&mut x, &m);
        }
        hook(self.config.n_layers, p, &mut x);
        Ok(rms_norm(&x, self.final_norm.data()))
    }

    pub fn new_kv_cache(&self) -> KvCache {
        KvCache::new(self.config.n_layers, self.config.d_model, self.config.n_heads)
    }

    pub fn logits(&self, h: &[f32]) -> Result<Vec<f32>> {
        project_logits(h, &self.embed)
    }

    fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("embed".to_string(), self.embed.weight())];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, m)| (format!("blocks.{i}.{n}"), m)));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    /// SHA-256 over the config and every weight, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut header = Vec::new();
        self.write_config(&mut BinWriter::new(&mut header)).expect("writing to memory");
        hasher.update(&header);
        for (name, m) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for v in m.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    fn write_config<W: Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        let c = &self.config;
        for v in [c.d_model, c.n_layers, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len] {
            w.u32(v as u32)?;
        }
        w.u64(c.init_seed)
    }

    /// `TOY1` weights file: magic, config block, tensor count, named tensors.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BinWriter::new(w);
        w.bytes(b"TOY1")?;
        self.write_config(&mut w)?;
        let tensors = self.named_tensors();
        w.u32(tensors.len() as u32)?;
        for (name, m) in tensors {
            w.tensor(&name, m)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BinReader::new(r, "model weights");
        r.magic(b"TOY1")?;
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let config = ToyModelConfig {
            d_model: dims[0],
            n_layers: dims[1],
            n_heads: dims[2],
            d_ff: dims[3],
            vocab_size: dims[4],
            max_seq_len: dims[5],
            init_seed: r.u64()?,
        };
        config.validate()?;
        let count = r.u32()? as usize;
        if count != 2 + 9 * config.n_layers {
            return Err(r.err(format!("unexpected tensor count {count}")));
        }
        let embed = EmbeddingTable::new(r.tensor("embed")?);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut t = |n: &str| r.tensor(&format!("blocks.{i}.{n}"));
            blocks.push(Block {
                attn_norm: t("attn_norm")?,
                wq: t("wq")?,
                wk: t("wk")?,
                wv: t("wv")?,
                wo: t("wo")?,
                mlp_norm: t("mlp_norm")?,
                w_gate: t("w_gate")?,
                w_up: t("w_up")?,
                w_down: t("w_down")?,
            });
        }
        let final_norm = r.tensor("final_norm")?;
        r.expect_eof()?;
        let model = Self { config, embed, blocks, final_norm };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (d, f) = (c.d_model, c.d_ff);
        let expect = |name: &str, m: &Mat, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(Error::Format {
                    what: "model weights",
                    msg: format!("tensor `{name}` has shape {:?}, expected {shape:?}", m.shape()),
                })
            }
        };
        expect("embed", self.embed.weight(), (c.vocab_size, d))?;
        expect("final_norm", &self.final_norm, (1, d))?;
        for b in &self.blocks {
            for (name, m) in b.tensors() {
                let shape = match name {
                    "attn_norm" | "mlp_norm" => (1, d),
                    "w_gate" | "w_up" => (f, d),
                    "w_down" => (d, f),
                    _ => (d, d),
                };
                expect(name, m, shape)?;
            }
        }
        Ok(())
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

fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| (v as f64 * inv * g as f64) as f32).collect()
}

fn add_assign(x: &mut [f32], delta: &[f32]) {
    for (a, &b) in x.iter_mut().zip(delta) {
        *a += b;
    }
}

/// Causal multi-head attention for one query over the given keys/values.
fn attend(q: &[f32], keys: &[Vec<f32>], values: &[Vec<f32>], n_heads: usize) -> Vec<f32> {
    let d = q.len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0f32; d];
    let mut scores = vec![0.0f64; keys.len()];
    for h in 0..n_heads {
        let span = h * hd..(h + 1) * hd;
        for (s, k) in scores.iter_mut().zip(keys) {
            *s = dot(&q[span.clone()], &k[span.clone()]) as f64 * scale;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for (i, o) in out[span.clone()].iter_mut().enumerate() {
            let acc: f64 = scores.iter().zip(values).map(|(&w, v)| w * v[h * hd + i] as f64).sum();
            *o = (acc / total) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyModel {
        ToyModel::new(ToyModelConfig { init_seed: 3, ..Default::default() }).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = model();
        let b = model();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let c = ToyModel::new(ToyModelConfig { init_seed: 4, ..Default::default() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn head_arithmetic_and_divisibility() {
        assert_eq!(ToyModelConfig::default().head_dim(), 8);
        let bad = ToyModelConfig { d_model: 30, ..Default::default() };
        assert!(matches!(ToyModel::new(bad), Err(Error::Config(_))));
        let zero = ToyModelConfig { n_layers: 0, ..Default::default() };
        assert!(ToyModel::new(zero).is_err());
    }

    #[test]
    fn forward_is_causal_bit_exact() {
        let m = model();
        let tokens: Vec<u32> = b"the quick brown fox".iter().map(|&b| b as u32).collect();
        let full = m.forward_hidden(&tokens).unwrap();
        for k in 0..tokens.len() {
            let prefix = m.forward_hidden(&tokens[..=k]).unwrap();
            for r in 0..=k {
                assert_eq!(prefix.row(r), full.row(r), "prefix {k} row {r}");
            }
        }
    }

    #[test]
    fn single_token_shape_and_determinism() {
        let m = model();
        let h = m.forward_hidden(&[65]).unwrap();
        assert_eq!(h.shape(), (1, 32));
        assert_eq!(m.forward_hidden(&[1, 2, 3]).unwrap(), m.forward_hidden(&[1, 2, 3]).unwrap());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = model();
        assert!(matches!(m.forward_hidden(&[256]), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(m.forward_hidden(&[1; 129]), Err(Error::SequenceTooLong { .. })));
        assert!(m.forward_hidden(&[]).is_err());
    }

    #[test]
    fn incremental_step_matches_full_forward() {
        let m = model();
        let tokens: Vec<u32> = (0..20).map(|i| (i * 37 % 256) as u32).collect();
        let full = m.forward_hidden(&tokens).unwrap();
        let mut kv = m.new_kv_cache();
        for (p, &t) in tokens.iter().enumerate() {
            let h = m.step(t, &mut kv, &mut |_, _, _| {}).unwrap();
            assert_eq!(h.as_slice(), full.row(p));
        }
        assert_eq!(kv.len(), tokens.len());
    }

    #[test]
    fn project_logits_examples() {
        let e = EmbeddingTable::new(Mat::identity(3));
        assert_eq!(project_logits(&[1.0, -2.0, 0.5], &e).unwrap(), vec![1.0, -2.0, 0.5]);
        assert_eq!(project_logits(&[0.0; 3], &e).unwrap(), vec![0.0; 3]);
        assert!(project_logits(&[0.0; 2], &e).is_err());

        // vocab 4, d_model 3; hand multiplication
        let w = Mat::from_rows(&[
            vec![1.0, 0.0, -1.0],
            vec![0.5, 0.5, 0.5],
            vec![2.0, -1.0, 0.0],
            vec![0.0, 0.25, 4.0],
        ])
        .unwrap();
        let logits = project_logits(&[0.2, -0.4, 1.0], &EmbeddingTable::new(w)).unwrap();
        let expected = [0.2 - 1.0, 0.5 * (0.2 - 0.4 + 1.0), 0.4 + 0.4, -0.1 + 4.0];
        for (a, b) in logits.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn weights_round_trip_through_toy1() {
        let m = model();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TOY1");
        let back = ToyModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.checksum(), m.checksum());
        buf.truncate(buf.len() - 3);
        assert!(ToyModel::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn embedding_round_trip_through_emb1() {
        let m = model();
        let mut buf = Vec::new();
        m.embed().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"EMB1");
        assert_eq!(buf.len(), 12 + 256 * 32 * 4);
        assert_eq!(&EmbeddingTable::read_from(buf.as_slice()).unwrap(), m.embed());
    }
}
