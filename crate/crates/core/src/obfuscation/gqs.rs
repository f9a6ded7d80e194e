use std::thread;

use super::{ObfuscationConfig, TaggedPrompt};
use crate::error::{Error, Result};
use crate::langmodel::{seq_logprob, ProbOracle, Tempered};

/// Candidate replacements for one tagged segment. The authentic segment is
/// always `candidates()[0]`; the rest follow in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeNgramSet {
    segment: usize,
    epsilon: f64,
    candidates: Vec<Vec<u32>>,
}

impl FakeNgramSet {
    /// Build a set from an authentic segment and replacement candidates.
    /// Candidates equal to the authentic one are dropped; other duplicates
    /// and length mismatches are errors.
    pub fn new(segment: usize, epsilon: f64, authentic: Vec<u32>, fakes: Vec<Vec<u32>>) -> Result<Self> {
        if authentic.is_empty() {
            return Err(Error::InvalidArgument("empty segment".into()));
        }
        let mut candidates = vec![authentic];
        for f in fakes {
            if f.len() != candidates[0].len() {
                return Err(Error::InvalidArgument("candidate length differs from segment".into()));
            }
            if f == candidates[0] {
                continue;
            }
            if candidates.contains(&f) {
                return Err(Error::InvalidArgument("duplicate candidate".into()));
            }
            candidates.push(f);
        }
        Ok(Self {
            segment,
            epsilon,
            candidates,
        })
    }

    /// Index of the span in the tagged prompt.
    pub fn segment(&self) -> usize {
        self.segment
    }

    /// Error bound this set was sampled at.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn candidates(&self) -> &[Vec<u32>] {
        &self.candidates
    }

    pub fn authentic(&self) -> &[u32] {
        &self.candidates[0]
    }

    pub fn fakes(&self) -> &[Vec<u32>] {
        &self.candidates[1..]
    }

    pub fn includes_authentic(&self) -> bool {
        true
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `floor(x / width)`. Bins are half-open, `[j w, (j + 1) w)`.
pub fn bin_index(x: f64, width: f64) -> i64 {
    (x / width).floor() as i64
}

/// Greedy quantized sampling for span `segment` of `prompt` at the
/// configured epsilon. The context is everything left of the span.
pub fn gqs<O: ProbOracle + ?Sized>(
    prompt: &TaggedPrompt,
    segment: usize,
    config: &ObfuscationConfig,
    oracle: &O,
) -> Result<FakeNgramSet> {
    gqs_at(prompt, segment, config, config.epsilon, oracle)
}

struct Candidate {
    tokens: Vec<u32>,
    logprob: f64,
}

fn gqs_at<O: ProbOracle + ?Sized>(
    prompt: &TaggedPrompt,
    segment: usize,
    config: &ObfuscationConfig,
    epsilon: f64,
    oracle: &O,
) -> Result<FakeNgramSet> {
    let span = prompt
        .spans()
        .get(segment)
        .ok_or(Error::IndexOutOfRange {
            index: segment,
            len: prompt.spans().len(),
        })?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let lm = Tempered::new(oracle, config.temperature)?;
    let authentic = prompt.segment(span);
    let n = authentic.len();
    let width = epsilon / n as f64;
    let context = &prompt.tokens()[..span.start];

    let mut frontier = vec![Candidate {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut auth_logprob = 0.0;
    let mut buf = context.to_vec();
    for len in 1..=n {
        buf.truncate(context.len());
        buf.extend_from_slice(&authentic[..len - 1]);
        let ln_rho = lm.next_dist(&buf)[authentic[len - 1] as usize].ln();
        auth_logprob += ln_rho;
        let target = bin_index(ln_rho, width);

        let mut next = Vec::new();
        for c in &frontier {
            buf.truncate(context.len());
            buf.extend_from_slice(&c.tokens);
            for (x, p) in lm.next_dist(&buf).into_iter().enumerate() {
                let lp = p.ln();
                if bin_index(lp, width) == target {
                    let mut tokens = c.tokens.clone();
                    tokens.push(x as u32);
                    next.push(Candidate {
                        tokens,
                        logprob: c.logprob + lp,
                    });
                }
            }
        }
        let prefix = &authentic[..len];
        next.sort_by(|a, b| {
            let da = (a.logprob - auth_logprob).abs();
            let db = (b.logprob - auth_logprob).abs();
            da.total_cmp(&db)
                .then_with(|| (a.tokens != prefix).cmp(&(b.tokens != prefix)))
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        // keep lambda_max replacements on top of the authentic prefix
        next.truncate(config.lambda_max + 1);
        if !next.iter().any(|c| c.tokens == prefix) {
            next.pop();
            next.insert(
                0,
                Candidate {
                    tokens: prefix.to_vec(),
                    logprob: auth_logprob,
                },
            );
        }
        frontier = next;
    }

    let fakes = frontier.into_iter().map(|c| c.tokens).collect();
    FakeNgramSet::new(segment, epsilon, authentic.to_vec(), fakes)
}

/// Sample every span independently at `epsilon / k`, in parallel.
pub fn multi_segment_gqs<O: ProbOracle + Sync + ?Sized>(
    prompt: &TaggedPrompt,
    config: &ObfuscationConfig,
    oracle: &O,
) -> Result<Vec<FakeNgramSet>> {
    let k = prompt.spans().len();
    if k == 0 {
        return Err(Error::InvalidArgument("prompt has no tagged segments".into()));
    }
    let eps = config.epsilon / k as f64;
    thread::scope(|s| {
        let handles: Vec<_> = (0..k)
            .map(|j| s.spawn(move || gqs_at(prompt, j, config, eps, oracle)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gqs worker panicked"))
            .collect()
    })
}

/// Direct check of `|ln LM(fake | ctx) - ln LM(original | ctx)| <= epsilon`.
pub fn verify_bound<O: ProbOracle + ?Sized>(
    original: &[u32],
    fake: &[u32],
    context: &[u32],
    epsilon: f64,
    oracle: &O,
) -> bool {
    if original.len() != fake.len() {
        return false;
    }
    (seq_logprob(oracle, fake, context) - seq_logprob(oracle, original, context)).abs() <= epsilon
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langmodel::TableOracle;
    use crate::obfuscation::Span;

    fn cfg(eps: f64, lambda_max: usize) -> ObfuscationConfig {
        ObfuscationConfig {
            epsilon: eps,
            lambda_max,
            ..Default::default()
        }
    }

    fn single(tokens: Vec<u32>, start: usize, len: usize) -> TaggedPrompt {
        TaggedPrompt::new(tokens, vec![Span::new(start, len)]).unwrap()
    }

    #[test]
    fn uniform_oracle_takes_every_token() {
        let o = TableOracle::uniform(4);
        for eps in [0.01, 0.3, 5.0] {
            let f = gqs(&single(vec![2], 0, 1), 0, &cfg(eps, 16), &o).unwrap();
            let mut got = f.candidates().to_vec();
            got.sort();
            assert_eq!(got, vec![vec![0], vec![1], vec![2], vec![3]]);
            assert_eq!(f.authentic(), &[2]);
        }
    }

    #[test]
    fn constructed_bins() {
        // width 0.3: ln 0.5 / 0.3 = -2.31, ln 0.45 / 0.3 = -2.66, ln 0.04 / 0.3 = -10.7
        let o = TableOracle::new(vec![0.5, 0.45, 0.04, 0.01]).unwrap();
        assert_eq!(bin_index(0.5f64.ln(), 0.3), -3);
        assert_eq!(bin_index(0.45f64.ln(), 0.3), -3);
        assert_eq!(bin_index(0.04f64.ln(), 0.3), -11);
        let f = gqs(&single(vec![0], 0, 1), 0, &cfg(0.3, 16), &o).unwrap();
        assert_eq!(f.candidates(), &[vec![0], vec![1]]);
        assert!(verify_bound(&[0], &[1], &[], 0.3, &o));
        assert!(!verify_bound(&[0], &[2], &[], 0.3, &o));
    }

    #[test]
    fn boundary_value_goes_to_lower_bin() {
        assert_eq!(bin_index(-1.0, 0.5), -2);
        assert_eq!(bin_index(-0.999, 0.5), -2);
        assert_eq!(bin_index(-1.001, 0.5), -3);
    }

    fn three_token_oracle() -> TableOracle {
        TableOracle::new(vec![0.4, 0.35, 0.25])
            .unwrap()
            .with(&[0], vec![0.6, 0.3, 0.1])
            .unwrap()
            .with(&[1], vec![0.34, 0.33, 0.33])
            .unwrap()
            .with(&[2], vec![0.2, 0.5, 0.3])
            .unwrap()
    }

    #[test]
    fn two_tokens_match_exhaustive_filter() {
        let o = three_token_oracle();
        for eps in [0.1, 0.25, 0.5, 1.0, 3.0] {
            let width = eps / 2.0;
            for auth in [[0u32, 0], [0, 2], [1, 1], [2, 1]] {
                let f = gqs(&single(auth.to_vec(), 0, 2), 0, &cfg(eps, 64), &o).unwrap();
                let lp = |ctx: &[u32], x: u32| o.next_dist(ctx)[x as usize].ln();
                let b1 = bin_index(lp(&[], auth[0]), width);
                let b2 = bin_index(lp(&[auth[0]], auth[1]), width);
                let mut expect = Vec::new();
                for x in 0..3u32 {
                    for y in 0..3u32 {
                        if bin_index(lp(&[], x), width) == b1 && bin_index(lp(&[x], y), width) == b2 {
                            expect.push(vec![x, y]);
                        }
                    }
                }
                let mut got = f.candidates().to_vec();
                got.sort();
                assert_eq!(got, expect, "eps {eps} auth {auth:?}");
                for c in f.candidates() {
                    assert!(verify_bound(&auth, c, &[], eps, &o));
                }
            }
        }
    }

    #[test]
    fn pruning_keeps_closest_and_authentic() {
        let o = TableOracle::uniform(10);
        let f = gqs(&single(vec![7, 7], 0, 2), 0, &cfg(1.0, 3), &o).unwrap();
        // all equal distance: authentic first then lexicographic
        assert_eq!(f.candidates(), &[vec![7, 7], vec![0, 0], vec![0, 1], vec![0, 2]]);
    }

    #[test]
    fn temperature_widens_pool() {
        let o = TableOracle::new(vec![0.3, 0.25, 0.2, 0.15, 0.1]).unwrap();
        let p = single(vec![0], 0, 1);
        let cold = gqs(&p, 0, &cfg(0.3, 16), &o).unwrap().len();
        let mut c = cfg(0.3, 16);
        c.temperature = 50.0;
        let hot = gqs(&p, 0, &c, &o).unwrap().len();
        assert!(hot >= cold);
        assert_eq!(hot, 5);
    }

    #[test]
    fn errors() {
        let o = TableOracle::uniform(4);
        let p = single(vec![1, 2], 0, 1);
        assert!(gqs(&p, 0, &cfg(0.0, 4), &o).is_err());
        assert!(gqs(&p, 1, &cfg(0.1, 4), &o).is_err());
        assert!(multi_segment_gqs(&TaggedPrompt::untagged(vec![1]), &cfg(0.1, 4), &o).is_err());
        assert!(!verify_bound(&[1], &[1, 2], &[], 1.0, &o));
    }

    #[test]
    fn multi_segment_splits_budget() {
        let o = three_token_oracle();
        let p = TaggedPrompt::new(vec![0, 1, 2, 1], vec![Span::new(0, 1), Span::new(2, 2)]).unwrap();
        let c = cfg(0.2, 16);
        let sets = multi_segment_gqs(&p, &c, &o).unwrap();
        assert_eq!(sets.len(), 2);
        for s in &sets {
            assert_eq!(s.epsilon(), 0.1);
        }
        let one = TaggedPrompt::new(vec![0, 1, 2, 1], vec![Span::new(2, 2)]).unwrap();
        assert_eq!(multi_segment_gqs(&one, &c, &o).unwrap()[0], gqs(&one, 0, &c, &o).unwrap());
    }

    #[test]
    fn fake_set_construction() {
        assert!(FakeNgramSet::new(0, 0.1, vec![1], vec![vec![1, 2]]).is_err());
        assert!(FakeNgramSet::new(0, 0.1, vec![1], vec![vec![2], vec![2]]).is_err());
        let s = FakeNgramSet::new(0, 0.1, vec![1], vec![vec![1], vec![2]]).unwrap();
        assert_eq!(s.candidates(), &[vec![1], vec![2]]);
        assert_eq!(s.fakes(), &[vec![2]]);
    }
}
