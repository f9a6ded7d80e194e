//! Python bindings: the toy model, split attention, prompt obfuscation, the
//! two-party decode session, security bounds and the serving benchmark.

use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use ospd_core::bench::{self, BenchConfig, Mode};
use ospd_core::langmodel::corpus::{clinical_corpus, clinical_tag_rules};
use ospd_core::langmodel::{encode_lines, train_ngram, NgramModel, Vocab, DEFAULT_SMOOTHING};
use ospd_core::model::{greedy_generate, init_model, prefill, HeadKv, ModelConfig, Weights};
use ospd_core::obfuscation::{build_virtual_prompts, multi_segment_gqs, tag_sensitive, ObfuscationConfig, TagRules};
use ospd_core::partition::{head_partial, merge_partials};
use ospd_core::protocol::{comm_accounting, run_sessions, RunOptions, UserRequest};
use ospd_core::security;

create_exception!(ospd, OspdError, PyException);

fn err(e: ospd_core::Error) -> PyErr {
    OspdError::new_err(e.to_string())
}

#[pyclass(frozen)]
struct Model {
    weights: Arc<Weights>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (n_layers=2, n_heads=4, head_dim=8, vocab_size=64, max_seq=128, seed=7))]
    fn new(n_layers: usize, n_heads: usize, head_dim: usize, vocab_size: usize, max_seq: usize, seed: u32) -> PyResult<Self> {
        let cfg = ModelConfig {
            n_layers,
            n_heads,
            d_model: n_heads * head_dim,
            head_dim,
            vocab_size,
            max_seq,
            seed,
        };
        Ok(Self {
            weights: Arc::new(init_model(cfg).map_err(err)?),
        })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.weights.config().vocab_size
    }

    #[getter]
    fn eos(&self) -> u32 {
        self.weights.config().eos()
    }

    /// Next-token logits after the prompt.
    fn logits(&self, prompt: Vec<u32>) -> PyResult<Vec<f64>> {
        Ok(prefill(&self.weights, &prompt).map_err(err)?.1)
    }

    fn generate(&self, prompt: Vec<u32>, max_new: usize) -> PyResult<Vec<u32>> {
        greedy_generate(&self.weights, &prompt, max_new).map_err(err)
    }

    /// Decode every prompt through the two-party protocol. Returns one dict
    /// per prompt with the delivered tokens and traffic totals.
    #[pyo3(signature = (prompts, max_tokens=16))]
    fn serve(&self, py: Python<'_>, prompts: Vec<Vec<u32>>, max_tokens: usize) -> PyResult<Vec<Py<PyAny>>> {
        let reqs = prompts
            .into_iter()
            .enumerate()
            .map(|(i, p)| UserRequest::plain(i as u64 + 1, p))
            .collect();
        let opts = RunOptions {
            max_tokens,
            ..Default::default()
        };
        let report = run_sessions(self.weights.clone(), reqs, opts).map_err(err)?;
        let comm = comm_accounting(&report.transcript.entries());
        let bytes: usize = comm.bytes_by_dir.values().sum();
        report
            .users
            .iter()
            .map(|u| {
                let d = pyo3::types::PyDict::new(py);
                d.set_item("tokens", u.authentic.clone())?;
                d.set_item("lambda", u.lambda)?;
                d.set_item("resident_weight_matrices", u.resident_weight_matrices)?;
                d.set_item("total_bytes", bytes)?;
                d.set_item("rounds", comm.total_rounds())?;
                Ok(d.into_any().unbind())
            })
            .collect()
    }
}

/// Split attention for one query: rows `[0, split)` on one side, the rest on
/// the other. Returns the merged output.
#[pyfunction]
fn split_attention(q: Vec<f64>, keys: Vec<Vec<f64>>, values: Vec<Vec<f64>>, split: usize) -> PyResult<Vec<f64>> {
    let d = q.len();
    if split > keys.len() {
        return Err(OspdError::new_err("split beyond the number of rows"));
    }
    let a = HeadKv::from_rows(d, &keys[..split], &values[..split]).map_err(err)?;
    let b = HeadKv::from_rows(d, &keys[split..], &values[split..]).map_err(err)?;
    let pa = head_partial(&q, &a).map_err(err)?;
    let pb = head_partial(&q, &b).map_err(err)?;
    merge_partials(&pa, &pb).map_err(err)
}

/// An n-gram model with its vocabulary and tag rules.
#[pyclass(frozen)]
struct Obfuscator {
    vocab: Vocab,
    lm: NgramModel,
    rules: TagRules,
}

#[pymethods]
impl Obfuscator {
    #[new]
    #[pyo3(signature = (corpus=None, rules=None, order=3, smoothing=DEFAULT_SMOOTHING))]
    fn new(corpus: Option<String>, rules: Option<String>, order: usize, smoothing: f64) -> PyResult<Self> {
        let text = corpus.unwrap_or_else(clinical_corpus);
        let (vocab, seqs) = encode_lines(&text);
        let lm = train_ngram(&seqs, order, smoothing, vocab.len()).map_err(err)?;
        let rules = TagRules::parse(&rules.unwrap_or_else(clinical_tag_rules)).map_err(err)?;
        Ok(Self { vocab, lm, rules })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn encode(&self, text: &str) -> PyResult<Vec<u32>> {
        self.vocab.encode(text).map_err(err)
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        self.vocab.decode(&ids)
    }

    /// Tagged spans as `(category, start, len)`.
    fn tag(&self, text: &str) -> PyResult<Vec<(String, usize, usize)>> {
        let tokens = self.vocab.encode(text).map_err(err)?;
        let tagged = tag_sensitive(&tokens, &self.vocab, &self.rules).map_err(err)?;
        Ok(tagged.spans().iter().map(|s| (s.category.clone(), s.start, s.len)).collect())
    }

    /// Virtual prompts for `text`: `(prompts, idx)` with the authentic prompt
    /// at `prompts[idx]`.
    #[pyo3(signature = (text, epsilon=0.5, lambda_max=8, lambda_min=0, temperature=1.0, key=b"ospd-demo-key".to_vec(), session=1))]
    #[allow(clippy::too_many_arguments)]
    fn obfuscate(
        &self,
        text: &str,
        epsilon: f64,
        lambda_max: usize,
        lambda_min: usize,
        temperature: f64,
        key: Vec<u8>,
        session: u64,
    ) -> PyResult<(Vec<String>, usize)> {
        let cfg = ObfuscationConfig {
            epsilon,
            lambda_max,
            lambda_min,
            temperature,
            prf_key: key,
        };
        cfg.validate().map_err(err)?;
        let tokens = self.vocab.encode(text).map_err(err)?;
        let tagged = tag_sensitive(&tokens, &self.vocab, &self.rules).map_err(err)?;
        let sets = if tagged.spans().is_empty() {
            Vec::new()
        } else {
            multi_segment_gqs(&tagged, &cfg, &self.lm).map_err(err)?
        };
        let vps = build_virtual_prompts(&tagged, &sets, &cfg, session).map_err(err)?;
        Ok((vps.prompts().iter().map(|p| self.vocab.decode(p)).collect(), vps.idx()))
    }
}

/// `(lower, upper)` on the chance of picking the authentic prompt.
#[pyfunction]
fn success_bounds(eta: usize, lambda_: usize, epsilon: f64, delta: f64) -> PyResult<(f64, f64)> {
    security::success_bounds(eta, lambda_, epsilon, delta).map_err(err)
}

/// One benchmark row as a dict.
#[pyfunction]
#[pyo3(signature = (mode, users=1, in_tokens=8, out_tokens=4, lambda_=0, repetitions=3, seed=0))]
#[allow(clippy::too_many_arguments)]
fn bench_mode(
    py: Python<'_>,
    mode: &str,
    users: usize,
    in_tokens: usize,
    out_tokens: usize,
    lambda_: usize,
    repetitions: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let cfg = BenchConfig {
        mode: mode.parse::<Mode>().map_err(err)?,
        users,
        in_tokens,
        out_tokens,
        lambda: lambda_,
        model: ModelConfig::default(),
        repetitions,
        seed,
    };
    let r = bench::run_mode(&cfg).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("mode", r.mode.name())?;
    d.set_item("users", r.users)?;
    d.set_item("ms_per_token_med", r.ms_per_token_med)?;
    d.set_item("weight_copies", r.weight_copies)?;
    d.set_item("bytes_per_token", r.bytes_per_token)?;
    d.set_item("outputs", r.outputs)?;
    Ok(d.into_any().unbind())
}

#[pymodule]
fn ospd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OspdError", m.py().get_type::<OspdError>())?;
    m.add_class::<Model>()?;
    m.add_class::<Obfuscator>()?;
    m.add_function(wrap_pyfunction!(split_attention, m)?)?;
    m.add_function(wrap_pyfunction!(success_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(bench_mode, m)?)?;
    Ok(())
}
