use std::collections::HashMap;

use super::ProbOracle;
use crate::error::{Error, Result};

pub const DEFAULT_SMOOTHING: f64 = 0.01;

/// Order-`k` n-gram model with additive smoothing:
/// `P(x | c) = (count(c, x) + s) / (count(c) + s V)`, where `c` is the last
/// `k - 1` tokens. Near a sequence start the context is shorter and only
/// matches sequence starts of the same length.
#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    smoothing: f64,
    vocab_size: usize,
    counts: HashMap<Vec<u32>, ContextCounts>,
}

#[derive(Debug, Clone)]
struct ContextCounts {
    next: Vec<u64>,
    total: u64,
}

pub fn train_ngram(corpus: &[Vec<u32>], order: usize, smoothing: f64, vocab_size: usize) -> Result<NgramModel> {
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::EmptyCorpus);
    }
    if order == 0 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    if !(smoothing > 0.0) {
        return Err(Error::InvalidArgument("smoothing must be positive".into()));
    }
    let mut counts: HashMap<Vec<u32>, ContextCounts> = HashMap::new();
    for seq in corpus {
        for (i, &tok) in seq.iter().enumerate() {
            if tok as usize >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: tok,
                    vocab: vocab_size,
                });
            }
            let ctx = seq[i.saturating_sub(order - 1)..i].to_vec();
            let entry = counts.entry(ctx).or_insert_with(|| ContextCounts {
                next: vec![0; vocab_size],
                total: 0,
            });
            entry.next[tok as usize] += 1;
            entry.total += 1;
        }
    }
    Ok(NgramModel {
        order,
        smoothing,
        vocab_size,
        counts,
    })
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn count(&self, context: &[u32], token: u32) -> u64 {
        self.counts
            .get(self.key(context))
            .map_or(0, |c| c.next[token as usize])
    }

    fn key<'a>(&self, context: &'a [u32]) -> &'a [u32] {
        &context[context.len().saturating_sub(self.order - 1)..]
    }
}

impl ProbOracle for NgramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist(&self, context: &[u32]) -> Vec<f64> {
        let v = self.vocab_size as f64;
        let s = self.smoothing;
        match self.counts.get(self.key(context)) {
            Some(c) => {
                let denom = c.total as f64 + s * v;
                c.next.iter().map(|&n| (n as f64 + s) / denom).collect()
            }
            None => vec![1.0 / v; self.vocab_size],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langmodel::seq_logprob;

    #[test]
    fn bigram_hand_count() {
        // a=0, b=1; "ab ab ab"
        let corpus = vec![vec![0, 1, 0, 1, 0, 1]];
        let s = 0.01;
        let m = train_ngram(&corpus, 2, s, 4).unwrap();
        let d = m.next_dist(&[0]);
        assert!((d[1] - (3.0 + s) / (3.0 + s * 4.0)).abs() < 1e-15);
        assert_eq!(m.count(&[0], 1), 3);
        assert_eq!(m.count(&[1], 0), 2);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let m = train_ngram(&[vec![0, 1]], 2, 0.5, 4).unwrap();
        assert_eq!(m.next_dist(&[3]), vec![0.25; 4]);
    }

    #[test]
    fn heavy_smoothing_flattens() {
        let corpus = vec![vec![0, 1, 0, 1, 0, 2]];
        let m = train_ngram(&corpus, 2, 1e9, 4).unwrap();
        for p in m.next_dist(&[0]) {
            assert!((p - 0.25).abs() < 1e-8);
        }
    }

    #[test]
    fn distributions_are_valid_and_deterministic() {
        let corpus = vec![vec![0, 1, 2, 3, 1, 2], vec![3, 3, 1]];
        let a = train_ngram(&corpus, 3, DEFAULT_SMOOTHING, 5).unwrap();
        let b = train_ngram(&corpus, 3, DEFAULT_SMOOTHING, 5).unwrap();
        for ctx in [vec![], vec![0], vec![1, 2], vec![4, 4], vec![0, 1, 2, 3]] {
            let d = a.next_dist(&ctx);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.iter().all(|p| *p > 0.0));
            assert_eq!(d, b.next_dist(&ctx));
        }
        assert!(seq_logprob(&a, &[0, 1, 2], &[]) <= 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(train_ngram(&[], 2, 0.1, 4), Err(Error::EmptyCorpus)));
        assert!(train_ngram(&[vec![0]], 0, 0.1, 4).is_err());
        assert!(train_ngram(&[vec![0]], 2, 0.0, 4).is_err());
        assert!(train_ngram(&[vec![7]], 2, 0.1, 4).is_err());
    }
}
