use crate::error::{Error, Result};

/// Key and value rows of one attention head, stored flat.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadKv {
    head_dim: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl HeadKv {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_rows(head_dim: usize, keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Self> {
        if keys.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} key rows vs {} value rows",
                keys.len(),
                values.len()
            )));
        }
        let mut kv = Self::new(head_dim);
        for (k, v) in keys.iter().zip(values) {
            kv.push(k, v)?;
        }
        Ok(kv)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.head_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn push(&mut self, key: &[f64], value: &[f64]) -> Result<()> {
        if key.len() != self.head_dim || value.len() != self.head_dim {
            return Err(Error::Dimension(format!(
                "kv row of {}/{} into head_dim {}",
                key.len(),
                value.len(),
                self.head_dim
            )));
        }
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        Ok(())
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.head_dim..(i + 1) * self.head_dim]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.head_dim..(i + 1) * self.head_dim]
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Concatenation `self ++ other`, as one unpartitioned cache.
    pub fn concat(&self, other: &HeadKv) -> Result<HeadKv> {
        if self.head_dim != other.head_dim {
            return Err(Error::Dimension("head_dim differs".into()));
        }
        let mut out = self.clone();
        out.keys.extend_from_slice(&other.keys);
        out.values.extend_from_slice(&other.values);
        Ok(out)
    }

    /// Rows `[start, end)` as a new cache.
    pub fn slice(&self, start: usize, end: usize) -> HeadKv {
        let d = self.head_dim;
        HeadKv {
            head_dim: d,
            keys: self.keys[start * d..end * d].to_vec(),
            values: self.values[start * d..end * d].to_vec(),
        }
    }
}

/// Per-layer, per-head key/value rows for one sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    max_seq: usize,
    layers: Vec<Vec<HeadKv>>,
}

impl KvCache {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize, max_seq: usize) -> Self {
        Self {
            max_seq,
            layers: vec![vec![HeadKv::new(head_dim); n_heads]; n_layers],
        }
    }

    /// Positions cached. Every head of every layer holds this many rows.
    pub fn len(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, HeadKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadKv {
        &self.layers[layer][head]
    }

    pub(crate) fn head_mut(&mut self, layer: usize, head: usize) -> &mut HeadKv {
        &mut self.layers[layer][head]
    }

    pub fn layers(&self) -> &[Vec<HeadKv>] {
        &self.layers
    }

    pub(crate) fn into_layers(self) -> Vec<Vec<HeadKv>> {
        self.layers
    }

    /// Total `f64` entries held across keys and values.
    pub fn scalar_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|h| h.keys().len() + h.values().len())
            .sum()
    }
}
