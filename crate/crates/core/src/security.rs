//! Measurements behind the obfuscation guarantee: how alike the virtual
//! prompts look under a reference distribution, how far the sampling model is
//! from that reference, and how often an adversary holding some of the
//! prompts picks the authentic one.

use std::fmt;
use std::thread;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::langmodel::{max_log_gap, seq_logprob, ProbOracle};
use crate::obfuscation::VirtualPromptSet;

/// z for the reported confidence interval (three standard errors).
pub const CI_Z: f64 = 3.0;
const CHUNKS: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct AuthenticityReport {
    /// Smallest `C >= 1` with `1/C <= P(S_i)/P(S_0) <= C` for every prompt.
    pub c: f64,
    /// `P(S_i) / P(S_0)` for each prompt, in prompt order (1 at the authentic index).
    pub ratios: Vec<f64>,
}

fn logprobs<P: ProbOracle + ?Sized>(p: &P, prompts: &[Vec<u32>]) -> Result<Vec<f64>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let lp = seq_logprob(p, s, &[]);
            if lp == f64::NEG_INFINITY || lp.is_nan() {
                Err(Error::ZeroProbability(i))
            } else {
                Ok(lp)
            }
        })
        .collect()
}

pub fn authenticity_c<P: ProbOracle + ?Sized>(p: &P, prompts: &VirtualPromptSet) -> Result<AuthenticityReport> {
    let lps = logprobs(p, prompts.prompts())?;
    let base = lps[prompts.idx()];
    let max_gap = lps.iter().map(|lp| (lp - base).abs()).fold(0.0, f64::max);
    Ok(AuthenticityReport {
        c: max_gap.exp(),
        ratios: lps.iter().map(|lp| (lp - base).exp()).collect(),
    })
}

/// `max |ln P(S) - ln LM(S)|` over the given sequences.
pub fn estimate_delta<P: ProbOracle + ?Sized, L: ProbOracle + ?Sized>(p: &P, lm: &L, set: &[Vec<u32>]) -> f64 {
    max_log_gap(p, lm, set)
}

/// Every sequence of length `len` over `0..vocab`, in lexicographic order.
pub fn all_sequences(vocab: u32, len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..vocab).map(move |t| {
                    let mut n = s.clone();
                    n.push(t);
                    n
                })
            })
            .collect();
    }
    out
}

/// Bounds on the adversary's success probability:
/// `eta/(lambda+1) * 1/(1 + (eta-1) e^(+-(epsilon + 2 delta)))`.
pub fn success_bounds(eta: usize, lambda: usize, epsilon: f64, delta: f64) -> Result<(f64, f64)> {
    if eta == 0 || eta > lambda + 1 {
        return Err(Error::InvalidArgument(format!("eta must be in 1..={}, got {eta}", lambda + 1)));
    }
    let g = epsilon + 2.0 * delta;
    let inclusion = eta as f64 / (lambda + 1) as f64;
    let k = (eta - 1) as f64;
    Ok((inclusion / (1.0 + k * g.exp()), inclusion / (1.0 + k * (-g).exp())))
}

/// The adversary's view of one prompt set: guess weights proportional to P.
#[derive(Debug, Clone)]
pub struct Adversary {
    weights: Vec<f64>,
    authentic: usize,
}

impl Adversary {
    pub fn new<P: ProbOracle + ?Sized>(p: &P, prompts: &VirtualPromptSet) -> Result<Self> {
        let lps = logprobs(p, prompts.prompts())?;
        let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            weights: lps.iter().map(|lp| (lp - max).exp()).collect(),
            authentic: prompts.idx(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Draw `eta` prompts uniformly without replacement, guess one with
    /// probability proportional to P, succeed if it is the authentic one.
    pub fn trial<R: Rng + ?Sized>(&self, eta: usize, rng: &mut R) -> bool {
        let held = sample(rng, self.weights.len(), eta);
        if !held.iter().any(|i| i == self.authentic) {
            return false;
        }
        let total: f64 = held.iter().map(|i| self.weights[i]).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut guess = held.index(eta - 1);
        for i in held.iter() {
            u -= self.weights[i];
            if u < 0.0 {
                guess = i;
                break;
            }
        }
        guess == self.authentic
    }
}

pub fn adversary_trial<P: ProbOracle + ?Sized, R: Rng + ?Sized>(
    p: &P,
    prompts: &VirtualPromptSet,
    eta: usize,
    rng: &mut R,
) -> Result<bool> {
    if eta == 0 || eta > prompts.prompts().len() {
        return Err(Error::InvalidArgument(format!("eta {eta} out of range")));
    }
    Ok(Adversary::new(p, prompts)?.trial(eta, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryResult {
    pub eta: usize,
    pub lambda: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub trials: u64,
    pub successes: u64,
    pub rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub bound_lo: f64,
    pub bound_hi: f64,
}

impl AdversaryResult {
    pub const CSV_HEADER: &'static str = "eta,lambda,epsilon,delta,rate,ci_lo,ci_hi,bound_lo,bound_hi";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.eta,
            self.lambda,
            self.epsilon,
            self.delta,
            self.rate,
            self.ci_lo,
            self.ci_hi,
            self.bound_lo,
            self.bound_hi
        )
    }

    /// The interval `[ci_lo, ci_hi]` meets `[bound_lo, bound_hi]`.
    pub fn brackets(&self) -> bool {
        self.ci_hi >= self.bound_lo && self.ci_lo <= self.bound_hi
    }
}

impl fmt::Display for AdversaryResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.csv_row())
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let lo = if k == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if k as f64 == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Run `trials` independent adversary trials, split over a fixed number of
/// seeded chunks so the result depends only on `seed`.
pub fn monte_carlo_success<P: ProbOracle + ?Sized>(
    p: &P,
    prompts: &VirtualPromptSet,
    eta: usize,
    trials: u64,
    seed: u64,
    epsilon: f64,
    delta: f64,
) -> Result<AdversaryResult> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let lambda = prompts.lambda();
    let (bound_lo, bound_hi) = success_bounds(eta, lambda, epsilon, delta)?;
    let adv = Adversary::new(p, prompts)?;
    let successes: u64 = thread::scope(|s| {
        let handles: Vec<_> = (0..CHUNKS)
            .map(|c| {
                let n = trials / CHUNKS + u64::from(c < trials % CHUNKS);
                let adv = &adv;
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    (0..n).filter(|_| adv.trial(eta, &mut rng)).count() as u64
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("trial worker")).sum()
    });
    let (ci_lo, ci_hi) = wilson_interval(successes, trials, CI_Z);
    Ok(AdversaryResult {
        eta,
        lambda,
        epsilon,
        delta,
        trials,
        successes,
        rate: successes as f64 / trials as f64,
        ci_lo,
        ci_hi,
        bound_lo,
        bound_hi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langmodel::{TableOracle, TiltedOracle};
    use crate::obfuscation::{build_virtual_prompts, FakeNgramSet, ObfuscationConfig, Span, TaggedPrompt};

    fn set_of(tokens: Vec<u32>, fakes: Vec<u32>, lambda: usize) -> VirtualPromptSet {
        let p = TaggedPrompt::new(tokens.clone(), vec![Span::new(tokens.len() - 1, 1)]).unwrap();
        let last = *tokens.last().unwrap();
        let f = FakeNgramSet::new(0, 1.0, vec![last], fakes.into_iter().map(|t| vec![t]).collect()).unwrap();
        let cfg = ObfuscationConfig {
            lambda_max: lambda,
            lambda_min: 0,
            ..Default::default()
        };
        build_virtual_prompts(&p, &[f], &cfg, 1).unwrap()
    }

    #[test]
    fn equiprobable_prompts_have_c_one() {
        let v = set_of(vec![0, 1], vec![2, 3], 2);
        let r = authenticity_c(&TableOracle::uniform(4), &v).unwrap();
        assert_eq!(r.c, 1.0);
        assert!(r.ratios.iter().all(|x| *x == 1.0));
    }

    #[test]
    fn double_probability_gives_c_two() {
        let p = TableOracle::new(vec![0.25; 4])
            .unwrap()
            .with(&[0], vec![0.2, 0.4, 0.2, 0.2])
            .unwrap();
        let v = set_of(vec![0, 0], vec![1, 2], 2);
        let r = authenticity_c(&p, &v).unwrap();
        assert!((r.c - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_an_error() {
        let p = TableOracle::uniform(4);
        let v = set_of(vec![0, 1], vec![2], 1);
        struct Zero(TableOracle);
        impl ProbOracle for Zero {
            fn vocab_size(&self) -> usize {
                4
            }
            fn next_dist(&self, c: &[u32]) -> Vec<f64> {
                let mut d = self.0.next_dist(c);
                d[2] = 0.0;
                d
            }
        }
        assert!(matches!(authenticity_c(&Zero(p), &v), Err(Error::ZeroProbability(_))));
    }

    #[test]
    fn delta_of_perturbation() {
        let base = TableOracle::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let set = all_sequences(4, 2);
        assert_eq!(set.len(), 16);
        assert_eq!(estimate_delta(&base, &base, &set), 0.0);
        let mut last = 0.0;
        for mag in [0.05, 0.1, 0.2] {
            let lm = TiltedOracle::new(base.clone(), &[1], 0, 3, f64::exp(mag)).unwrap();
            let d = estimate_delta(&base, &lm, &set);
            assert!((d - mag).abs() < 1e-12);
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn closed_form_bounds() {
        let (lo, hi) = success_bounds(1, 7, 0.3, 0.1).unwrap();
        assert_eq!((lo, hi), (0.125, 0.125));
        let (lo, hi) = success_bounds(8, 7, 0.0, 0.0).unwrap();
        assert!((lo - 0.125).abs() < 1e-15 && (hi - 0.125).abs() < 1e-15);
        let (lo, hi) = success_bounds(2, 1, 2f64.ln(), 0.0).unwrap();
        assert!((lo - 1.0 / 3.0).abs() < 1e-15);
        assert!((hi - 2.0 / 3.0).abs() < 1e-15);
        assert!(success_bounds(0, 3, 0.1, 0.0).is_err());
        assert!(success_bounds(5, 3, 0.1, 0.0).is_err());
    }

    #[test]
    fn bounds_fall_with_lambda() {
        for eta in 1..4 {
            let mut prev = f64::INFINITY;
            for lambda in 3..40 {
                let (lo, hi) = success_bounds(eta, lambda, 0.2, 0.05).unwrap();
                assert!(lo <= hi);
                assert!(hi <= prev);
                prev = hi;
            }
        }
    }

    #[test]
    fn wilson_contains_proportion() {
        let (lo, hi) = wilson_interval(50, 100, 3.0);
        assert!(lo < 0.5 && hi > 0.5);
        assert_eq!(wilson_interval(0, 10, 3.0).0, 0.0);
        assert!(wilson_interval(0, 10, 3.0).1 > 0.0);
    }

    #[test]
    fn monte_carlo_is_deterministic_and_symmetric() {
        let v = set_of(vec![0, 1], vec![0, 2, 3], 3);
        let p = TableOracle::uniform(4);
        let a = monte_carlo_success(&p, &v, 4, 20_000, 9, 0.0, 0.0).unwrap();
        let b = monte_carlo_success(&p, &v, 4, 20_000, 9, 0.0, 0.0).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_lo <= 0.25 && 0.25 <= a.ci_hi);
        assert!(a.brackets());
        let one = monte_carlo_success(&p, &v, 1, 20_000, 3, 0.0, 0.0).unwrap();
        assert!(one.ci_lo <= 0.25 && 0.25 <= one.ci_hi);
        assert!(monte_carlo_success(&p, &v, 1, 0, 3, 0.0, 0.0).is_err());
        assert_eq!(a.csv_row().split(',').count(), 9);
    }

    #[test]
    fn trial_helper_checks_eta() {
        let v = set_of(vec![0, 1], vec![2], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(adversary_trial(&TableOracle::uniform(4), &v, 3, &mut rng).is_err());
        // both prompts held, uniform P: a fair coin
        let wins = (0..2000)
            .filter(|_| adversary_trial(&TableOracle::uniform(4), &v, 2, &mut rng).unwrap())
            .count();
        assert!((800..1200).contains(&wins));
    }
}
