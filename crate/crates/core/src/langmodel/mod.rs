//! Next-token probability oracles: a smoothed n-gram model, the toy
//! transformer, and small adapters used to build controlled distributions.

mod ngram;
mod vocab;

pub mod corpus;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{prefill, Weights};

pub use ngram::{train_ngram, NgramModel, DEFAULT_SMOOTHING};
pub use vocab::{encode_lines, load_corpus, Vocab};

/// A left-to-right language model over integer tokens.
pub trait ProbOracle {
    fn vocab_size(&self) -> usize;

    /// Distribution of the next token after `context`. Sums to one.
    fn next_dist(&self, context: &[u32]) -> Vec<f64>;
}

impl<T: ProbOracle + ?Sized> ProbOracle for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_dist(&self, context: &[u32]) -> Vec<f64> {
        (**self).next_dist(context)
    }
}

/// `sum_i ln P(tokens[i] | context ++ tokens[..i])`.
pub fn seq_logprob<O: ProbOracle + ?Sized>(oracle: &O, tokens: &[u32], context: &[u32]) -> f64 {
    let mut ctx = context.to_vec();
    let mut total = 0.0;
    for &t in tokens {
        total += oracle.next_dist(&ctx)[t as usize].ln();
        ctx.push(t);
    }
    total
}

/// `p_i^(1/tau)`, renormalized. Computed in the log domain.
pub fn apply_temperature(dist: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if tau == 1.0 {
        return Ok(dist.to_vec());
    }
    let logs: Vec<f64> = dist.iter().map(|p| p.ln() / tau).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Wraps an oracle, applying a fixed temperature to every distribution.
#[derive(Debug, Clone)]
pub struct Tempered<O> {
    inner: O,
    tau: f64,
}

impl<O: ProbOracle> Tempered<O> {
    pub fn new(inner: O, tau: f64) -> Result<Self> {
        apply_temperature(&[1.0], tau)?;
        Ok(Self { inner, tau })
    }
}

impl<O: ProbOracle> ProbOracle for Tempered<O> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn next_dist(&self, context: &[u32]) -> Vec<f64> {
        apply_temperature(&self.inner.next_dist(context), self.tau).expect("validated tau")
    }
}

/// Explicit distributions keyed by the full context, with a fallback.
#[derive(Debug, Clone)]
pub struct TableOracle {
    default: Vec<f64>,
    table: HashMap<Vec<u32>, Vec<f64>>,
}

impl TableOracle {
    pub fn new(default: Vec<f64>) -> Result<Self> {
        check_dist(&default)?;
        Ok(Self {
            default,
            table: HashMap::new(),
        })
    }

    pub fn uniform(vocab: usize) -> Self {
        Self {
            default: vec![1.0 / vocab as f64; vocab],
            table: HashMap::new(),
        }
    }

    pub fn with(mut self, context: &[u32], dist: Vec<f64>) -> Result<Self> {
        check_dist(&dist)?;
        if dist.len() != self.default.len() {
            return Err(Error::Dimension("distribution length differs from vocab".into()));
        }
        self.table.insert(context.to_vec(), dist);
        Ok(self)
    }
}

fn check_dist(dist: &[f64]) -> Result<()> {
    let sum: f64 = dist.iter().sum();
    if dist.is_empty() || dist.iter().any(|p| !(*p > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("not a strictly positive distribution".into()));
    }
    Ok(())
}

impl ProbOracle for TableOracle {
    fn vocab_size(&self) -> usize {
        self.default.len()
    }

    fn next_dist(&self, context: &[u32]) -> Vec<f64> {
        self.table.get(context).unwrap_or(&self.default).clone()
    }
}

/// A copy of `base` where, in exactly one context, the probability of
/// `boosted` is multiplied by `factor` and the difference is taken from
/// `donor`. Used to build a reference distribution at a known log distance.
#[derive(Debug, Clone)]
pub struct TiltedOracle<O> {
    base: O,
    context: Vec<u32>,
    boosted: u32,
    donor: u32,
    factor: f64,
}

impl<O: ProbOracle> TiltedOracle<O> {
    pub fn new(base: O, context: &[u32], boosted: u32, donor: u32, factor: f64) -> Result<Self> {
        if boosted == donor {
            return Err(Error::InvalidArgument("boosted and donor tokens coincide".into()));
        }
        let d = base.next_dist(context);
        let moved = d[boosted as usize] * (factor - 1.0);
        if !(d[donor as usize] - moved > 0.0) || !(factor > 0.0) {
            return Err(Error::InvalidArgument("tilt leaves the donor without mass".into()));
        }
        Ok(Self {
            base,
            context: context.to_vec(),
            boosted,
            donor,
            factor,
        })
    }
}

impl<O: ProbOracle> ProbOracle for TiltedOracle<O> {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }

    fn next_dist(&self, context: &[u32]) -> Vec<f64> {
        let mut d = self.base.next_dist(context);
        if context == self.context.as_slice() {
            let old = d[self.boosted as usize];
            d[self.boosted as usize] = old * self.factor;
            d[self.donor as usize] -= old * (self.factor - 1.0);
        }
        d
    }
}

/// The toy transformer as an oracle: softmax of its next-token logits. An
/// empty context gives the uniform distribution.
pub struct TransformerOracle<'w> {
    weights: &'w Weights,
}

impl<'w> TransformerOracle<'w> {
    pub fn new(weights: &'w Weights) -> Self {
        Self { weights }
    }
}

impl ProbOracle for TransformerOracle<'_> {
    fn vocab_size(&self) -> usize {
        self.weights.config().vocab_size
    }

    fn next_dist(&self, context: &[u32]) -> Vec<f64> {
        let v = self.vocab_size();
        if context.is_empty() {
            return vec![1.0 / v as f64; v];
        }
        let max = self.weights.config().max_seq;
        let ctx = &context[context.len().saturating_sub(max)..];
        let (_, logits) = prefill(self.weights, ctx).expect("in-vocab context");
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }
}

/// `max_S |ln A(S) - ln B(S)|` over a finite set of whole sequences.
pub fn max_log_gap<A: ProbOracle + ?Sized, B: ProbOracle + ?Sized>(a: &A, b: &B, sequences: &[Vec<u32>]) -> f64 {
    sequences
        .iter()
        .map(|s| (seq_logprob(a, s, &[]) - seq_logprob(b, s, &[])).abs())
        .fold(0.0, f64::max)
}
