//! Command implementations behind the `ospd` binary. Each command writes its
//! report to the given writer and returns a process exit code.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::bench::{self, BenchConfig, Mode};
use crate::error::{Error, Result};
use crate::langmodel::corpus::{clinical_corpus, clinical_tag_rules, CLINICAL_PROMPT};
use crate::langmodel::{encode_lines, train_ngram, Vocab, DEFAULT_SMOOTHING};
use crate::model::{greedy_generate, init_model, ModelConfig};
use crate::obfuscation::{build_virtual_prompts, multi_segment_gqs, tag_sensitive, ObfuscationConfig, TagRules};
use crate::protocol::accounting::{overhead_explanation, Entry};
use crate::protocol::{comm_accounting, run_decode_session, RunOptions, TransportKind, UserRequest};
use crate::verify::{run_suite, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_OBFUSCATION: i32 = 3;
pub const EXIT_PROTOCOL: i32 = 4;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub prompt: String,
    /// Decode steps after the first token.
    pub max_tokens: usize,
    pub transport: String,
    pub ngram_order: usize,
    pub smoothing: f64,
    /// Training text, one sentence per line. Defaults to the built-in clinical notes.
    pub corpus: Option<PathBuf>,
    pub rules: Option<PathBuf>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            prompt: CLINICAL_PROMPT.into(),
            max_tokens: 16,
            transport: "channel".into(),
            ngram_order: 3,
            smoothing: DEFAULT_SMOOTHING,
            corpus: None,
            rules: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub modes: Vec<Mode>,
    pub users: Vec<usize>,
    /// spd only; other modes always run at 0.
    pub lambdas: Vec<usize>,
    pub in_tokens: usize,
    pub out_tokens: usize,
    pub repetitions: usize,
    pub model: ModelConfig,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            modes: Mode::ALL.to_vec(),
            users: vec![1, 2, 4, 8],
            lambdas: vec![0],
            in_tokens: 32,
            out_tokens: 16,
            repetitions: 3,
            model: bench::bench_model(),
        }
    }
}

impl BenchSection {
    pub fn configs(&self, seed: u64) -> Vec<BenchConfig> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            let lambdas: &[usize] = if mode == Mode::Spd { &self.lambdas } else { &[0] };
            for &users in &self.users {
                for &lambda in lambdas {
                    out.push(BenchConfig {
                        mode,
                        users,
                        in_tokens: self.in_tokens,
                        out_tokens: self.out_tokens,
                        lambda,
                        model: self.model,
                        repetitions: self.repetitions,
                        seed,
                    });
                }
            }
        }
        out
    }
}

/// Contents of a `--config` file. Every section and key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub obfuscation: ObfuscationConfig,
    pub demo: DemoConfig,
    pub bench: Option<BenchSection>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InsufficientObfuscation { .. } => EXIT_OBFUSCATION,
        Error::Protocol(_) | Error::Frame(_) | Error::SessionKilled(_) => EXIT_PROTOCOL,
        _ => EXIT_ERROR,
    }
}

fn word(vocab: &Vocab, t: u32) -> String {
    vocab.word(t).map_or_else(|| "<eos>".to_string(), str::to_string)
}

/// Transcript lines grouped by stream and direction, which fixes their order
/// regardless of thread interleaving.
pub fn canonical_transcript(entries: &[Entry]) -> String {
    let mut sorted: Vec<&Entry> = entries.iter().collect();
    sorted.sort_by_key(|e| (e.session, e.dir.label()));
    sorted.iter().map(|e| format!("{e}\n")).collect()
}

pub fn cmd_demo<W: Write>(cfg: &FileConfig, seed: Option<u64>, out_path: Option<&Path>, verbose: bool, out: &mut W) -> Result<i32> {
    let d = &cfg.demo;
    let text = match &d.corpus {
        Some(p) => std::fs::read_to_string(p)?,
        None => clinical_corpus(),
    };
    let rules = match &d.rules {
        Some(p) => TagRules::load(p)?,
        None => TagRules::parse(&clinical_tag_rules())?,
    };
    let (vocab, seqs) = encode_lines(&text);
    let lm = train_ngram(&seqs, d.ngram_order, d.smoothing, vocab.len())?;
    let seed = seed.or(cfg.seed);
    let session = seed.unwrap_or(1);
    let mut model = cfg.model;
    model.vocab_size = vocab.len() + 1;
    if let Some(s) = seed {
        model.seed = s as u32;
    }
    let transport = match d.transport.as_str() {
        "channel" => TransportKind::Channel,
        "tcp" => TransportKind::Tcp,
        t => return Err(Error::InvalidArgument(format!("unknown transport {t:?}"))),
    };
    cfg.obfuscation.validate()?;

    let tokens = vocab.encode(&d.prompt)?;
    let tagged = tag_sensitive(&tokens, &vocab, &rules)?;
    writeln!(out, "prompt: {}", d.prompt)?;
    for s in tagged.spans() {
        let words: Vec<String> = tagged.segment(s).iter().map(|t| word(&vocab, *t)).collect();
        writeln!(out, "tagged [{}] {}", s.category, words.join(" "))?;
    }
    let fake_sets = if tagged.spans().is_empty() {
        Vec::new()
    } else {
        multi_segment_gqs(&tagged, &cfg.obfuscation, &lm)?
    };
    let vps = match build_virtual_prompts(&tagged, &fake_sets, &cfg.obfuscation, session) {
        Ok(v) => v,
        Err(e @ Error::InsufficientObfuscation { .. }) => {
            writeln!(out, "obfuscation abort: {e}")?;
            return Ok(EXIT_OBFUSCATION);
        }
        Err(e) => return Err(e),
    };
    writeln!(out, "lambda: {} (streams {})", vps.lambda(), vps.prompts().len())?;
    if verbose {
        write!(out, "{}", vps.dump(Some(&vocab)))?;
    }

    let weights = Arc::new(init_model(model)?);
    let request = UserRequest {
        session_id: session,
        prompt: tagged,
        fake_sets,
        obfuscation: cfg.obfuscation.clone(),
        tamper: None,
    };
    let opts = RunOptions {
        max_tokens: d.max_tokens,
        transport,
        ..Default::default()
    };
    let report = run_decode_session(weights.clone(), request, opts)?;
    let user = &report.users[0];
    if let Some(r) = &user.aborted {
        writeln!(out, "session aborted: {r}")?;
        return Ok(EXIT_OBFUSCATION);
    }
    if !report.killed.is_empty() {
        writeln!(out, "controller killed streams {:?}", report.killed)?;
        return Ok(EXIT_PROTOCOL);
    }

    let mut invariant = true;
    for (prompt, got) in vps.prompts().iter().zip(&user.delivered) {
        let want = greedy_generate(&weights, prompt, d.max_tokens)?;
        if &want != got {
            invariant = false;
            writeln!(out, "mismatch: protocol {got:?} monolithic {want:?}")?;
        }
    }
    let response: Vec<String> = user.authentic.iter().map(|t| word(&vocab, *t)).collect();
    writeln!(out, "response: {}", response.join(" "))?;

    let entries = report.transcript.entries();
    let comm = comm_accounting(&entries);
    writeln!(out, "transcript: {} frames, {} rounds", entries.len(), comm.total_rounds())?;
    for (dir, bytes) in &comm.bytes_by_dir {
        writeln!(out, "  {} bytes={} scalars={}", dir.label(), bytes, comm.scalars_by_dir.get(dir).copied().unwrap_or(0))?;
    }
    for (tag, n) in &comm.msgs_by_tag {
        writeln!(out, "  {} x{}", tag.name(), n)?;
    }
    writeln!(out, "  {}", overhead_explanation(weights.config()))?;
    if let Some(p) = out_path {
        std::fs::write(p, canonical_transcript(&entries))?;
    }
    writeln!(out, "invariance: {}", if invariant { "pass" } else { "FAIL" })?;
    Ok(if invariant { EXIT_OK } else { EXIT_INVARIANT })
}

pub fn cmd_verify<W: Write>(suite: Suite, seed: u64, out_path: Option<&Path>, out: &mut W) -> Result<i32> {
    let checks = run_suite(suite, seed)?;
    let failed = checks.iter().filter(|c| !c.pass).count();
    let mut text = String::new();
    for c in &checks {
        text.push_str(&format!("{c}\n"));
    }
    text.push_str(&format!("summary passed={} failed={failed}\n", checks.len() - failed));
    out.write_all(text.as_bytes())?;
    if let Some(p) = out_path {
        std::fs::write(p, &text)?;
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_INVARIANT })
}

pub fn cmd_bench<W: Write>(cfg: &FileConfig, seed: Option<u64>, out_path: Option<&Path>, out: &mut W) -> Result<i32> {
    let seed = seed.or(cfg.seed).unwrap_or(0);
    let configs = match &cfg.bench {
        Some(b) => b.configs(seed),
        None => bench::default_sweep(seed),
    };
    let records = bench::sweep(&configs)?;
    let csv = bench::to_csv(&records);
    let path = out_path.map_or_else(|| PathBuf::from("bench.csv"), Path::to_path_buf);
    std::fs::write(&path, &csv)?;
    out.write_all(csv.as_bytes())?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(EXIT_OK)
}
