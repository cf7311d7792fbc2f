use crate::error::{Error, Result};

/// Per-layer attention keys and values for every processed position.
/// Each stored vector holds all heads concatenated (`d_model` wide).
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    n_heads: usize,
    d_model: usize,
    keys: Vec<Vec<Vec<f32>>>,
    values: Vec<Vec<Vec<f32>>>,
}

impl KvCache {
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize) -> Self {
        Self {
            n_heads,
            d_model,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
        }
    }

    /// Number of cached positions (identical across layers between steps).
    pub fn len(&self) -> usize {
        self.keys.last().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub(crate) fn check_shape(&self, n_layers: usize, d_model: usize) -> Result<()> {
        if self.keys.len() != n_layers || self.d_model != d_model {
            return Err(Error::Shape(format!(
                "KV cache built for {} layers × {} dims, model has {n_layers} × {d_model}",
                self.keys.len(),
                self.d_model
            )));
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, layer: usize, k: Vec<f32>, v: Vec<f32>) {
        self.keys[layer].push(k);
        self.values[layer].push(v);
    }

    pub(crate) fn layer(&self, layer: usize) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.keys[layer], &self.values[layer])
    }

    pub fn key(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        let hd = self.d_model / self.n_heads;
        &self.keys[layer][pos][head * hd..(head + 1) * hd]
    }

    pub fn value(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        let hd = self.d_model / self.n_heads;
        &self.values[layer][pos][head * hd..(head + 1) * hd]
    }

    /// True when the two caches hold bit-identical entries for `layer`.
    pub fn layer_eq(&self, other: &Self, layer: usize) -> bool {
        bits_eq(&self.keys[layer], &other.keys[layer])
            && bits_eq(&self.values[layer], &other.values[layer])
    }

    /// True when every layer matches bit for bit.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.n_layers() == other.n_layers() && (0..self.n_layers()).all(|l| self.layer_eq(other, l))
    }
}

fn bits_eq(a: &[Vec<f32>], b: &[Vec<f32>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}
