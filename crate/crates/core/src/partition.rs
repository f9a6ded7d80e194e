//! Lossless two-way split of single-query softmax attention.
//!
//! Each side reports its locally normalized output `a`, its denominator
//! `gamma = sum(exp(s_i - m))` and its max score `m`. Two such partials merge
//! into exactly the attention over the concatenated keys and values.

use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::model::{HeadKv, KvCache};
use crate::numerics::{dot, stable_softmax_stats};

/// One partition's contribution for a single head.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAttention {
    pub a: Vec<f64>,
    pub gamma: f64,
    pub m: f64,
}

impl PartialAttention {
    /// Contribution of a partition with no rows: merges as the identity.
    pub fn empty(head_dim: usize) -> Self {
        Self {
            a: vec![0.0; head_dim],
            gamma: 0.0,
            m: f64::NEG_INFINITY,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.gamma == 0.0
    }

    /// Scalars needed to ship this partial: `a`, `gamma` and `m`.
    pub fn scalar_count(&self) -> usize {
        self.a.len() + 2
    }
}

pub trait PartitionLabel {
    const NAME: &'static str;
}

#[derive(Debug, Clone, Copy)]
pub struct Private;

#[derive(Debug, Clone, Copy)]
pub struct Public;

impl PartitionLabel for Private {
    const NAME: &'static str = "private";
}

impl PartitionLabel for Public {
    const NAME: &'static str = "public";
}

/// Per-layer, per-head KV rows tagged with the side that owns them. The
/// wire format has no encoding for partitions of either label.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPartition<L> {
    layers: Vec<Vec<HeadKv>>,
    _label: PhantomData<L>,
}

impl<L: PartitionLabel> KvPartition<L> {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        Self {
            layers: vec![vec![HeadKv::new(head_dim); n_heads]; n_layers],
            _label: PhantomData,
        }
    }

    pub fn label(&self) -> &'static str {
        L::NAME
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadKv {
        &self.layers[layer][head]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, HeadKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scalar_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|h| h.keys().len() + h.values().len())
            .sum()
    }
}

impl KvPartition<Private> {
    /// Take ownership of a prompt's cache.
    pub fn from_prompt_cache(cache: KvCache) -> Self {
        Self {
            layers: cache.into_layers(),
            _label: PhantomData,
        }
    }
}

impl KvPartition<Public> {
    pub fn append(&mut self, layer: usize, head: usize, key: &[f64], value: &[f64]) -> Result<()> {
        self.layers[layer][head].push(key, value)
    }
}

/// Local attention statistics of `q` over one head's rows. Empty rows give
/// [`PartialAttention::empty`].
pub fn head_partial(q: &[f64], kv: &HeadKv) -> Result<PartialAttention> {
    if q.len() != kv.head_dim() {
        return Err(Error::Dimension(format!(
            "query of {} against head_dim {}",
            q.len(),
            kv.head_dim()
        )));
    }
    if kv.is_empty() {
        return Ok(PartialAttention::empty(kv.head_dim()));
    }
    let scores: Vec<f64> = (0..kv.len()).map(|j| dot(q, kv.key(j))).collect();
    let stats = stable_softmax_stats(&scores)?;
    let mut a = vec![0.0; kv.head_dim()];
    for (j, w) in stats.weights.iter().enumerate() {
        for (o, v) in a.iter_mut().zip(kv.value(j)) {
            *o += w * v;
        }
    }
    Ok(PartialAttention {
        a,
        gamma: stats.gamma,
        m: stats.m,
    })
}

pub fn private_partial(
    q: &[f64],
    part: &KvPartition<Private>,
    layer: usize,
    head: usize,
) -> Result<PartialAttention> {
    head_partial(q, part.head(layer, head))
}

pub fn public_partial(
    q: &[f64],
    part: &KvPartition<Public>,
    layer: usize,
    head: usize,
) -> Result<PartialAttention> {
    head_partial(q, part.head(layer, head))
}

/// Combine two partials with the max-stabilized coefficients
/// `c_pvt = g_pvt / (g_pvt + alpha g_pub)` and
/// `c_pub = g_pub / (g_pvt / alpha + g_pub)`, `alpha = exp(m_pub - m_pvt)`.
pub fn merge_partials(pvt: &PartialAttention, public: &PartialAttention) -> Result<Vec<f64>> {
    if pvt.a.len() != public.a.len() {
        return Err(Error::Dimension("partials of different width".into()));
    }
    match (pvt.is_empty(), public.is_empty()) {
        (true, true) => return Err(Error::EmptyPartition),
        (true, false) => return Ok(public.a.clone()),
        (false, true) => return Ok(pvt.a.clone()),
        (false, false) => {}
    }
    let alpha = (public.m - pvt.m).exp();
    let c_pvt = pvt.gamma / (pvt.gamma + alpha * public.gamma);
    let c_pub = public.gamma / (pvt.gamma / alpha + public.gamma);
    Ok(pvt
        .a
        .iter()
        .zip(&public.a)
        .map(|(x, y)| c_pvt * x + c_pub * y)
        .collect())
}

/// Public partials for many users' heads in one pass. Keys and values are
/// packed into a padded `[batch, max_len, head_dim]` block; padding is masked.
/// Each result equals [`head_partial`] on that user's rows.
pub fn batched_public_partials(qs: &[&[f64]], parts: &[&HeadKv]) -> Result<Vec<PartialAttention>> {
    if qs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if qs.len() != parts.len() {
        return Err(Error::Dimension(format!(
            "{} queries for {} partitions",
            qs.len(),
            parts.len()
        )));
    }
    let hd = parts[0].head_dim();
    for (q, p) in qs.iter().zip(parts) {
        if p.head_dim() != hd || q.len() != hd {
            return Err(Error::Dimension("ragged head_dim within batch".into()));
        }
    }
    let batch = qs.len();
    let max_len = parts.iter().map(|p| p.len()).max().unwrap_or(0);
    let lens: Vec<usize> = parts.iter().map(|p| p.len()).collect();

    let mut keys = vec![0.0; batch * max_len * hd];
    let mut values = vec![0.0; batch * max_len * hd];
    for (b, p) in parts.iter().enumerate() {
        let n = p.len() * hd;
        keys[b * max_len * hd..b * max_len * hd + n].copy_from_slice(p.keys());
        values[b * max_len * hd..b * max_len * hd + n].copy_from_slice(p.values());
    }

    let mut scores = vec![f64::NEG_INFINITY; batch * max_len];
    for b in 0..batch {
        for j in 0..lens[b] {
            let off = (b * max_len + j) * hd;
            scores[b * max_len + j] = dot(qs[b], &keys[off..off + hd]);
        }
    }

    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        if lens[b] == 0 {
            out.push(PartialAttention::empty(hd));
            continue;
        }
        let row = &scores[b * max_len..b * max_len + lens[b]];
        let stats = stable_softmax_stats(row)?;
        let mut a = vec![0.0; hd];
        for (j, w) in stats.weights.iter().enumerate() {
            let off = (b * max_len + j) * hd;
            for (o, v) in a.iter_mut().zip(&values[off..off + hd]) {
                *o += w * v;
            }
        }
        out.push(PartialAttention {
            a,
            gamma: stats.gamma,
            m: stats.m,
        });
    }
    Ok(out)
}
