//! Self-checks run by `ospd verify`. Each suite returns named checks with a
//! pass flag and a short detail string.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::langmodel::{ProbOracle, TableOracle};
use crate::model::{attention_reference, greedy_generate, init_model, HeadKv, ModelConfig};
use crate::numerics::Matrix;
use crate::obfuscation::{build_virtual_prompts, gqs, verify_bound, FakeNgramSet, ObfuscationConfig, Span, TaggedPrompt};
use crate::partition::{head_partial, merge_partials};
use crate::protocol::accounting::predicted_round_scalars;
use crate::protocol::{comm_accounting, run_decode_session, Controller, GateMode, Message, RunOptions, Tag, Tamper, UserRequest, Verdict};
use crate::security::{monte_carlo_success, success_bounds};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    SplitExact,
    Gqs,
    Bounds,
    Protocol,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "theorem1" | "split" => Suite::SplitExact,
            "gqs" => Suite::Gqs,
            "bounds" => Suite::Bounds,
            "protocol" => Suite::Protocol,
            "all" => Suite::All,
            _ => return Err(Error::InvalidArgument(format!("unknown suite {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}.{} {}", self.suite, self.name, self.detail)
    }
}

fn check(suite: &'static str, name: &'static str, pass: bool, detail: String) -> Check {
    Check {
        suite,
        name,
        pass,
        detail,
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    match suite {
        Suite::SplitExact => Ok(split_exact(seed)),
        Suite::Gqs => gqs_suite(seed),
        Suite::Bounds => bounds_suite(seed),
        Suite::Protocol => protocol_suite(seed),
        Suite::All => {
            let mut out = split_exact(seed);
            out.extend(gqs_suite(seed)?);
            out.extend(bounds_suite(seed)?);
            out.extend(protocol_suite(seed)?);
            Ok(out)
        }
    }
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0) * scale).collect())
        .collect()
}

/// Split attention against the single-pass reference on random instances.
pub fn split_exact(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for (name, scale, tol) in [("merge_exact", 1.0, 1e-9), ("merge_large_scores", 50.0, 1e-6)] {
        let mut worst = 0.0f64;
        let mut finite = true;
        for _ in 0..1000 {
            let n = rng.gen_range(1..=64);
            let d = 2 * rng.gen_range(1..=16);
            let split = rng.gen_range(0..=n);
            let q = random_rows(&mut rng, 1, d, scale).remove(0);
            let k = random_rows(&mut rng, n, d, 1.0);
            let v = random_rows(&mut rng, n, d, 1.0);
            let pvt = HeadKv::from_rows(d, &k[..split], &v[..split]).expect("shape");
            let publ = HeadKv::from_rows(d, &k[split..], &v[split..]).expect("shape");
            let merged = merge_partials(
                &head_partial(&q, &pvt).expect("partial"),
                &head_partial(&q, &publ).expect("partial"),
            )
            .expect("merge");
            let reference = attention_reference(
                &Matrix::row_vector(&q),
                &Matrix::from_rows(&k).expect("k"),
                &Matrix::from_rows(&v).expect("v"),
            )
            .expect("reference");
            for (a, b) in merged.iter().zip(reference.row(0)) {
                finite &= a.is_finite();
                let err = if scale > 1.0 { (a - b).abs() / b.abs().max(1.0) } else { (a - b).abs() };
                worst = worst.max(err);
            }
        }
        results.push(check(
            "theorem1",
            name,
            finite && worst <= tol,
            format!("instances=1000 max_err={worst:.3e} tol={tol:e}"),
        ));
    }
    results
}

/// A context-dependent distribution drawn from a hash of the context.
struct HashOracle {
    vocab: usize,
    seed: u64,
}

impl ProbOracle for HashOracle {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_dist(&self, context: &[u32]) -> Vec<f64> {
        let h = context
            .iter()
            .fold(self.seed, |h, t| (h ^ u64::from(*t)).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let w: Vec<f64> = (0..self.vocab).map(|_| (rng.gen_range(-2.0..2.0f64)).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }
}

fn exhaustive_candidates<O: ProbOracle>(o: &O, context: &[u32], authentic: &[u32], width: f64) -> Vec<Vec<u32>> {
    let v = o.vocab_size() as u32;
    let bin = |ctx: &[u32], prefix: &[u32], t: u32| {
        let mut c = ctx.to_vec();
        c.extend_from_slice(prefix);
        (o.next_dist(&c)[t as usize].ln() / width).floor() as i64
    };
    let targets: Vec<i64> = (0..authentic.len())
        .map(|i| bin(context, &authentic[..i], authentic[i]))
        .collect();
    let mut all: Vec<Vec<u32>> = vec![Vec::new()];
    for _ in 0..authentic.len() {
        all = all
            .into_iter()
            .flat_map(|p| (0..v).map(move |t| [p.as_slice(), &[t]].concat()))
            .collect();
    }
    let mut out: Vec<Vec<u32>> = all
        .into_iter()
        .filter(|x| (0..x.len()).all(|i| bin(context, &x[..i], x[i]) == targets[i]))
        .collect();
    if !out.iter().any(|x| x == authentic) {
        out.push(authentic.to_vec());
    }
    out.sort();
    out
}

/// Bound soundness on random oracles, and equality with brute force where
/// the space is small enough to enumerate.
pub fn gqs_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6751);
    let epsilons = [0.05, 0.1, 0.5, 1.0];
    let (mut sound, mut total, mut exact, mut compared) = (0usize, 0usize, 0usize, 0usize);
    for case in 0..200 {
        let vocab = rng.gen_range(4..=64usize);
        let n = rng.gen_range(1..=4usize);
        let eps = epsilons[case % epsilons.len()];
        let o = HashOracle { vocab, seed: rng.gen() };
        let ctx_len = rng.gen_range(0..4);
        let tokens: Vec<u32> = (0..ctx_len + n).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let prompt = TaggedPrompt::new(tokens.clone(), vec![Span::new(ctx_len, n)])?;
        let cfg = ObfuscationConfig {
            epsilon: eps,
            lambda_max: 16,
            ..Default::default()
        };
        let set = gqs(&prompt, 0, &cfg, &o)?;
        let auth = &tokens[ctx_len..];
        for c in set.candidates() {
            total += 1;
            sound += usize::from(verify_bound(auth, c, &tokens[..ctx_len], eps, &o));
        }
        if n <= 2 && vocab <= 16 {
            compared += 1;
            let big = ObfuscationConfig {
                lambda_max: vocab.pow(n as u32),
                ..cfg
            };
            let mut got = gqs(&prompt, 0, &big, &o)?.candidates().to_vec();
            got.sort();
            exact += usize::from(got == exhaustive_candidates(&o, &tokens[..ctx_len], auth, eps / n as f64));
        }
    }
    Ok(vec![
        check("gqs", "bound_sound", sound == total, format!("candidates={total} within_bound={sound}")),
        check(
            "gqs",
            "exhaustive_match",
            exact == compared && compared > 0,
            format!("cases={compared} equal={exact}"),
        ),
    ])
}

/// Virtual prompts whose last token is the only difference, under a random
/// distribution known to the adversary.
fn bounds_instance(rng: &mut ChaCha8Rng, lambda: usize) -> Result<(TableOracle, crate::obfuscation::VirtualPromptSet, f64)> {
    let vocab = 16;
    let mut p: Vec<f64> = (0..vocab).map(|_| rng.gen_range(1.0..2.0)).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    let o = TableOracle::new(p.clone())?;
    let fakes: Vec<Vec<u32>> = (1..=lambda as u32).map(|t| vec![t]).collect();
    let eps = fakes
        .iter()
        .map(|f| (p[f[0] as usize].ln() - p[0].ln()).abs())
        .fold(0.0, f64::max);
    let prompt = TaggedPrompt::new(vec![3, 0], vec![Span::new(1, 1)])?;
    let set = FakeNgramSet::new(0, eps, vec![0], fakes)?;
    let cfg = ObfuscationConfig {
        lambda_max: lambda,
        lambda_min: lambda,
        ..Default::default()
    };
    Ok((o, build_virtual_prompts(&prompt, &[set], &cfg, rng.gen())?, eps))
}

pub fn bounds_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b0);
    let mut out = Vec::new();
    let mut eta1_exact = true;
    for lambda in [1, 3, 7, 15] {
        let (lo, hi) = success_bounds(1, lambda, 0.7, 0.2)?;
        eta1_exact &= lo == 1.0 / (lambda + 1) as f64 && hi == lo;
    }
    out.push(check("bounds", "eta1_exact", eta1_exact, "lambda=1,3,7,15".into()));
    let (mut ok, mut runs, mut eta1_ok) = (0, 0, true);
    for lambda in [1usize, 3, 7] {
        let (o, set, eps) = bounds_instance(&mut rng, lambda)?;
        let mut etas = vec![1, 2, (lambda + 2) / 2, lambda + 1];
        etas.dedup();
        for eta in etas {
            let r = monte_carlo_success(&o, &set, eta, 100_000, rng.gen(), eps, 0.0)?;
            runs += 1;
            ok += usize::from(r.brackets());
            if eta == 1 {
                let target = 1.0 / (lambda + 1) as f64;
                eta1_ok &= r.ci_lo <= target && target <= r.ci_hi;
            }
        }
    }
    out.push(check("bounds", "monte_carlo_bracket", ok == runs, format!("runs={runs} bracketed={ok}")));
    out.push(check("bounds", "eta1_rate", eta1_ok, "ci contains 1/(lambda+1)".into()));
    Ok(out)
}

pub fn protocol_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::new();

    let mut same = true;
    for s in 0..2u32 {
        let cfg = ModelConfig {
            seed: s + seed as u32,
            ..Default::default()
        };
        let w = Arc::new(init_model(cfg)?);
        for _ in 0..2 {
            let prompt: Vec<u32> = (0..rng.gen_range(2..12)).map(|_| rng.gen_range(0..63)).collect();
            let want = greedy_generate(&w, &prompt, 16)?;
            let opts = RunOptions {
                max_tokens: 16,
                ..Default::default()
            };
            let rep = run_decode_session(w.clone(), UserRequest::plain(1, prompt), opts)?;
            same &= rep.users[0].authentic == want;
        }
    }
    out.push(check("protocol", "output_invariance", same, "seeds=2 prompts=2 steps=16".into()));

    let mut ctl = Controller::new(GateMode::Exact);
    let mut passed = 0;
    for i in 0..10_000u32 {
        let session = rng.gen_range(0..8);
        ctl.expect(session, rng.gen_range(0..64));
        let msg = match i % 5 {
            0 => Message::query(session, 0, 0, &[rng.gen(); 8]),
            1 => Message::final_y(session, &[rng.gen(); 64]),
            2 => Message::abort(session, "x"),
            3 => Message::new(Tag::Partial, session, 0, 0, (0..rng.gen_range(0..80)).map(|_| rng.gen()).collect()),
            _ => Message::new(Tag::Control, session, 0, 0, vec![rng.gen()]),
        };
        passed += usize::from(ctl.gate(&msg) == Verdict::Pass);
    }
    out.push(check("protocol", "controller_fuzz", passed == 0, format!("frames=10000 passed={passed}")));

    let w = Arc::new(init_model(ModelConfig::default())?);
    let mut req = UserRequest::plain(2, vec![1, 2, 3, 4]);
    req.tamper = Some(Tamper { stream: 0, step: 2 });
    let rep = run_decode_session(
        w.clone(),
        req,
        RunOptions {
            max_tokens: 8,
            ..Default::default()
        },
    )?;
    let u = &rep.users[0];
    let killed = rep.killed.contains(&u.stream_ids[0]) && u.authentic.len() == 2;
    out.push(check(
        "protocol",
        "tamper_blocked",
        killed,
        format!("delivered={} killed={:?}", u.authentic.len(), rep.killed),
    ));

    let rep = run_decode_session(
        w.clone(),
        UserRequest::plain(3, vec![5, 6, 7]),
        RunOptions {
            max_tokens: 12,
            ..Default::default()
        },
    )?;
    let comm = comm_accounting(&rep.transcript.entries());
    let (q, p) = predicted_round_scalars(w.config());
    let counts: Vec<usize> = comm.all_rounds().map(|r| r.attention_scalars()).collect();
    let constant = !counts.is_empty() && counts.iter().all(|c| *c == q + p);
    out.push(check(
        "protocol",
        "comm_constant",
        constant,
        format!("rounds={} scalars_per_round={}", counts.len(), q + p),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for s in [Suite::SplitExact, Suite::Gqs, Suite::Bounds, Suite::Protocol] {
            for c in run_suite(s, 1).unwrap() {
                assert!(c.pass, "{c}");
            }
        }
        assert!("nope".parse::<Suite>().is_err());
    }
}
