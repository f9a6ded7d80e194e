//! Serving-mode comparison: one shared model without protection, one model
//! instance per user, and the partitioned protocol.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, decode_step_batch, greedy_generate, init_model, prefill_batch, CopyTracker, KvCache, ModelConfig, Weights};
use crate::obfuscation::{FakeNgramSet, ObfuscationConfig, Span, TaggedPrompt};
use crate::protocol::{comm_accounting, run_sessions, RunOptions, UserRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NoProtection,
    FullIsolation,
    Spd,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::NoProtection, Mode::FullIsolation, Mode::Spd];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NoProtection => "no_protection",
            Mode::FullIsolation => "full_isolation",
            Mode::Spd => "spd",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub mode: Mode,
    pub users: usize,
    pub in_tokens: usize,
    /// Tokens generated per user, counting the one produced by prefill.
    pub out_tokens: usize,
    /// Fake prompts per user; spd only.
    pub lambda: usize,
    pub model: ModelConfig,
    pub repetitions: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::InvalidArgument("users must be at least 1".into()));
        }
        if self.repetitions < 3 {
            return Err(Error::InvalidArgument("repetitions must be at least 3".into()));
        }
        if self.in_tokens == 0 || self.out_tokens == 0 {
            return Err(Error::InvalidArgument("token counts must be positive".into()));
        }
        if self.lambda > 0 && self.mode != Mode::Spd {
            return Err(Error::InvalidArgument("lambda applies to spd only".into()));
        }
        if self.lambda + 1 >= self.model.vocab_size {
            return Err(Error::InvalidArgument("lambda must be below vocab_size - 1".into()));
        }
        self.model.validate()?;
        if self.in_tokens + self.out_tokens > self.model.max_seq {
            return Err(Error::Overlong {
                len: self.in_tokens + self.out_tokens,
                max_seq: self.model.max_seq,
            });
        }
        Ok(())
    }
}

/// The model used for timing: large enough that weight traffic dominates a
/// decode step.
pub fn bench_model() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        n_heads: 8,
        d_model: 256,
        head_dim: 32,
        vocab_size: 512,
        max_seq: 160,
        seed: 11,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mode: Mode,
    pub users: usize,
    pub lambda: usize,
    pub in_tokens: usize,
    pub out_tokens: usize,
    pub ms_per_token_med: f64,
    pub ms_per_token_p95: f64,
    /// Peak number of resident weight copies during a run.
    pub weight_copies: usize,
    pub bytes_per_token: f64,
    /// Tokens returned to each user (the authentic stream under spd).
    pub outputs: Vec<Vec<u32>>,
}

pub const CSV_HEADER: &str =
    "mode,users,lambda,in_tokens,out_tokens,ms_per_token_med,ms_per_token_p95,weight_copies,bytes_per_token";

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.4},{},{:.1}",
            self.mode,
            self.users,
            self.lambda,
            self.in_tokens,
            self.out_tokens,
            self.ms_per_token_med,
            self.ms_per_token_p95,
            self.weight_copies,
            self.bytes_per_token
        )
    }
}

/// User `u`'s prompt for a given seed: uniform over every id but EOS.
pub fn bench_prompt(seed: u64, user: usize, len: usize, vocab: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (user as u64 + 1).wrapping_mul(0xd6e8_feb8_6659_fd93));
    (0..len).map(|_| rng.gen_range(0..vocab as u32 - 1)).collect()
}

struct RunOut {
    outputs: Vec<Vec<u32>>,
    bytes: usize,
    tokens: usize,
}

fn no_protection(w: &Weights, prompts: &[Vec<u32>], out_tokens: usize) -> Result<RunOut> {
    let eos = w.config().eos();
    let refs: Vec<&[u32]> = prompts.iter().map(Vec::as_slice).collect();
    let mut caches = Vec::with_capacity(prompts.len());
    let mut outputs = Vec::with_capacity(prompts.len());
    for (cache, logits) in prefill_batch(w, &refs)? {
        caches.push(cache);
        outputs.push(vec![argmax(&logits)]);
    }
    for _ in 1..out_tokens {
        let live: Vec<usize> = (0..outputs.len()).filter(|&i| outputs[i].last() != Some(&eos)).collect();
        if live.is_empty() {
            break;
        }
        let toks: Vec<u32> = live.iter().map(|&i| *outputs[i].last().expect("non-empty")).collect();
        let mut active: Vec<KvCache> = live.iter().map(|&i| std::mem::take(&mut caches[i])).collect();
        let logits = decode_step_batch(w, &mut active, &toks);
        for (&i, c) in live.iter().zip(active) {
            caches[i] = c;
        }
        for (&i, l) in live.iter().zip(logits?) {
            outputs[i].push(argmax(&l));
        }
    }
    let tokens = outputs.iter().map(Vec::len).sum();
    Ok(RunOut {
        outputs,
        bytes: 0,
        tokens,
    })
}

fn full_isolation(instances: &[Weights], prompts: &[Vec<u32>], out_tokens: usize) -> Result<RunOut> {
    let outputs: Vec<Vec<u32>> = thread::scope(|s| {
        let handles: Vec<_> = instances
            .iter()
            .zip(prompts)
            .map(|(w, p)| s.spawn(move || greedy_generate(w, p, out_tokens - 1)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("instance panicked".into()))))
            .collect::<Result<_>>()
    })?;
    let tokens = outputs.iter().map(Vec::len).sum();
    Ok(RunOut {
        outputs,
        bytes: 0,
        tokens,
    })
}

/// A request whose last prompt token is replaced by `lambda` other ids in
/// the fake prompts.
fn spd_request(session: u64, prompt: &[u32], lambda: usize, vocab: usize) -> Result<UserRequest> {
    if lambda == 0 {
        return Ok(UserRequest::plain(session, prompt.to_vec()));
    }
    let last = prompt.len() - 1;
    let a = prompt[last];
    let span = Span::new(last, 1);
    let fakes = (1..=lambda as u32).map(|j| vec![(a + j) % (vocab as u32 - 1)]).collect();
    let set = FakeNgramSet::new(0, f64::INFINITY, vec![a], fakes)?;
    Ok(UserRequest {
        session_id: session,
        prompt: TaggedPrompt::new(prompt.to_vec(), vec![span])?,
        fake_sets: vec![set],
        obfuscation: ObfuscationConfig {
            lambda_max: lambda,
            lambda_min: 0,
            ..Default::default()
        },
        tamper: None,
    })
}

fn spd(w: Arc<Weights>, prompts: &[Vec<u32>], out_tokens: usize, lambda: usize) -> Result<RunOut> {
    let vocab = w.config().vocab_size;
    let requests = prompts
        .iter()
        .enumerate()
        .map(|(u, p)| spd_request(u as u64 + 1, p, lambda, vocab))
        .collect::<Result<Vec<_>>>()?;
    let opts = RunOptions {
        max_tokens: out_tokens - 1,
        ..Default::default()
    };
    let report = run_sessions(w, requests, opts)?;
    if let Some(r) = report.users.iter().find_map(|u| u.aborted.clone()) {
        return Err(Error::Protocol(format!("session aborted: {r}")));
    }
    let comm = comm_accounting(&report.transcript.entries());
    let bytes = comm.bytes_by_dir.values().sum();
    let tokens = report.users.iter().flat_map(|u| &u.delivered).map(Vec::len).sum();
    Ok(RunOut {
        outputs: report.users.into_iter().map(|u| u.authentic).collect(),
        bytes,
        tokens,
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Run one mode `repetitions` times from a fixed weight image.
pub fn run_mode_with(master: &Weights, config: &BenchConfig) -> Result<BenchRecord> {
    config.validate()?;
    if master.config() != &config.model {
        return Err(Error::Config("weights do not match the bench model config".into()));
    }
    let prompts: Vec<Vec<u32>> = (0..config.users)
        .map(|u| bench_prompt(config.seed, u, config.in_tokens, config.model.vocab_size))
        .collect();
    let tracker = CopyTracker::new();
    let mut times = Vec::with_capacity(config.repetitions);
    let mut first: Option<RunOut> = None;
    for _ in 0..config.repetitions {
        let (run, elapsed) = match config.mode {
            Mode::NoProtection => {
                let w = master.clone().tracked(&tracker);
                let t = Instant::now();
                let r = no_protection(&w, &prompts, config.out_tokens)?;
                (r, t.elapsed())
            }
            Mode::FullIsolation => {
                let instances: Vec<Weights> = (0..config.users).map(|_| master.clone().tracked(&tracker)).collect();
                let t = Instant::now();
                let r = full_isolation(&instances, &prompts, config.out_tokens)?;
                (r, t.elapsed())
            }
            Mode::Spd => {
                let w = Arc::new(master.clone().tracked(&tracker));
                let t = Instant::now();
                let r = spd(w, &prompts, config.out_tokens, config.lambda)?;
                (r, t.elapsed())
            }
        };
        let longest = run.outputs.iter().map(Vec::len).max().unwrap_or(1).max(1);
        times.push(elapsed.as_secs_f64() * 1e3 / longest as f64);
        match &first {
            Some(f) if f.outputs != run.outputs => {
                return Err(Error::Protocol("outputs changed between repetitions".into()));
            }
            Some(_) => {}
            None => first = Some(run),
        }
    }
    let run = first.expect("at least three repetitions");
    times.sort_by(f64::total_cmp);
    Ok(BenchRecord {
        mode: config.mode,
        users: config.users,
        lambda: config.lambda,
        in_tokens: config.in_tokens,
        out_tokens: config.out_tokens,
        ms_per_token_med: percentile(&times, 0.5),
        ms_per_token_p95: percentile(&times, 0.95),
        weight_copies: tracker.peak(),
        bytes_per_token: run.bytes as f64 / run.tokens.max(1) as f64,
        outputs: run.outputs,
    })
}

pub fn run_mode(config: &BenchConfig) -> Result<BenchRecord> {
    let master = init_model(config.model)?;
    run_mode_with(&master, config)
}

fn sort_key(c: &BenchConfig) -> (Mode, usize, usize, usize, usize) {
    (c.mode, c.users, c.lambda, c.in_tokens, c.out_tokens)
}

/// Run every config, sharing one weight image per model config. Rows come
/// back sorted by mode, users, lambda, then token counts.
pub fn sweep(configs: &[BenchConfig]) -> Result<Vec<BenchRecord>> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("empty sweep".into()));
    }
    let mut order: Vec<&BenchConfig> = configs.iter().collect();
    order.sort_by_key(|c| sort_key(c));
    let mut cached: Option<Weights> = None;
    let mut out = Vec::with_capacity(order.len());
    for c in order {
        if cached.as_ref().map(|w| w.config()) != Some(&c.model) {
            cached = Some(init_model(c.model)?);
        }
        out.push(run_mode_with(cached.as_ref().expect("just set"), c)?);
    }
    Ok(out)
}

/// The three modes at m in {1, 2, 4, 8}, plus spd at lambda 7 and 15 for m = 1.
pub fn default_sweep(seed: u64) -> Vec<BenchConfig> {
    let base = BenchConfig {
        mode: Mode::Spd,
        users: 1,
        in_tokens: 32,
        out_tokens: 16,
        lambda: 0,
        model: bench_model(),
        repetitions: 3,
        seed,
    };
    let mut out = Vec::new();
    for mode in Mode::ALL {
        for users in [1, 2, 4, 8] {
            out.push(BenchConfig {
                mode,
                users,
                ..base.clone()
            });
        }
    }
    for lambda in [7, 15] {
        out.push(BenchConfig { lambda, ..base.clone() });
    }
    out
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Least-squares slope of `y` against `x`.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: Mode, users: usize) -> BenchConfig {
        BenchConfig {
            mode,
            users,
            in_tokens: 6,
            out_tokens: 5,
            lambda: 0,
            model: ModelConfig::default(),
            repetitions: 3,
            seed: 4,
        }
    }

    #[test]
    fn single_user_modes_agree() {
        let recs: Vec<_> = Mode::ALL.iter().map(|m| run_mode(&small(*m, 1)).unwrap()).collect();
        assert_eq!(recs[0].outputs, recs[1].outputs);
        assert_eq!(recs[0].outputs, recs[2].outputs);
    }

    #[test]
    fn copies_follow_mode() {
        for m in [1, 3] {
            assert_eq!(run_mode(&small(Mode::NoProtection, m)).unwrap().weight_copies, 1);
            assert_eq!(run_mode(&small(Mode::FullIsolation, m)).unwrap().weight_copies, m);
            let spd = run_mode(&small(Mode::Spd, m)).unwrap();
            assert_eq!(spd.weight_copies, 1);
            assert!(spd.bytes_per_token > 0.0);
        }
    }

    #[test]
    fn lambda_keeps_authentic_output() {
        let plain = run_mode(&small(Mode::Spd, 2)).unwrap();
        let po = run_mode(&BenchConfig {
            lambda: 3,
            ..small(Mode::Spd, 2)
        })
        .unwrap();
        assert_eq!(plain.outputs, po.outputs);
    }

    #[test]
    fn invalid_configs() {
        assert!(run_mode(&small(Mode::Spd, 0)).is_err());
        assert!(run_mode(&BenchConfig {
            repetitions: 2,
            ..small(Mode::Spd, 1)
        })
        .is_err());
        assert!(run_mode(&BenchConfig {
            in_tokens: 200,
            ..small(Mode::Spd, 1)
        })
        .is_err());
        assert!(run_mode(&BenchConfig {
            lambda: 2,
            ..small(Mode::FullIsolation, 1)
        })
        .is_err());
    }

    #[test]
    fn sweep_sorts_rows() {
        let cfgs = vec![small(Mode::Spd, 2), small(Mode::NoProtection, 2), small(Mode::Spd, 1)];
        let recs = sweep(&cfgs).unwrap();
        let keys: Vec<_> = recs.iter().map(|r| (r.mode, r.users)).collect();
        assert_eq!(keys, vec![(Mode::NoProtection, 2), (Mode::Spd, 1), (Mode::Spd, 2)]);
        let csv = to_csv(&recs);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 4);
        assert!(sweep(&[]).is_err());
    }

    #[test]
    fn default_sweep_shape() {
        let s = default_sweep(0);
        assert!(s.len() >= 12);
        assert!(s.iter().all(|c| c.validate().is_ok()));
    }

    #[test]
    fn slope_of_line() {
        assert!((slope(&[(1.0, 3.0), (2.0, 5.0), (4.0, 9.0)]) - 2.0).abs() < 1e-12);
        assert_eq!("spd".parse::<Mode>().unwrap(), Mode::Spd);
        assert!("gpu".parse::<Mode>().is_err());
    }
}
