use std::fmt::Write as _;

use hmac::{Hmac, Mac};
use sha2::Sha256;

use super::{FakeNgramSet, ObfuscationConfig, TaggedPrompt};
use crate::error::{Error, Result};
use crate::langmodel::Vocab;

const PRF_LABEL: &[u8] = b"ospd/prf-index/v1";

/// Keyed uniform index in `[0, lambda]` for a session. HMAC-SHA256 over the
/// session id and a counter, reduced by rejection sampling.
pub fn prf_index(key: &[u8], session_id: u64, lambda: usize) -> usize {
    if lambda == 0 {
        return 0;
    }
    let range = lambda as u64 + 1;
    let zone = (u64::MAX / range) * range;
    for counter in 0u64.. {
        let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
        mac.update(PRF_LABEL);
        mac.update(&session_id.to_le_bytes());
        mac.update(&counter.to_le_bytes());
        let out = mac.finalize().into_bytes();
        let v = u64::from_le_bytes(out[..8].try_into().expect("8 bytes"));
        if v < zone {
            return (v % range) as usize;
        }
    }
    unreachable!()
}

/// The authentic prompt hidden among `lambda` virtual prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualPromptSet {
    prompts: Vec<Vec<u32>>,
    idx: usize,
    lambda: usize,
}

impl VirtualPromptSet {
    pub fn prompts(&self) -> &[Vec<u32>] {
        &self.prompts
    }

    pub fn idx(&self) -> usize {
        self.idx
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn authentic(&self) -> &[u32] {
        &self.prompts[self.idx]
    }

    /// Debug listing. Never sent anywhere.
    pub fn dump(&self, vocab: Option<&Vocab>) -> String {
        let mut out = format!("lambda {}\nidx {}\n", self.lambda, self.idx);
        for (i, p) in self.prompts.iter().enumerate() {
            let text = match vocab {
                Some(v) => v.decode(p),
                None => p.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
            };
            let mark = if i == self.idx { "*" } else { " " };
            let _ = writeln!(out, "{mark}{i:>4}  {text}");
        }
        out
    }
}

/// Replace the tagged spans with fake combinations. Combinations are taken in
/// mixed-radix order over the candidate lists, skipping the all-authentic
/// one, until `lambda_max` are chosen. Fewer than `lambda_min` is an error.
pub fn build_virtual_prompts(
    prompt: &TaggedPrompt,
    fake_sets: &[FakeNgramSet],
    config: &ObfuscationConfig,
    session_id: u64,
) -> Result<VirtualPromptSet> {
    config.validate()?;
    let spans = prompt.spans();
    if fake_sets.len() != spans.len() {
        return Err(Error::InvalidArgument(format!(
            "{} fake sets for {} spans",
            fake_sets.len(),
            spans.len()
        )));
    }
    for (j, (set, span)) in fake_sets.iter().zip(spans).enumerate() {
        if set.segment() != j || set.authentic() != prompt.segment(span) {
            return Err(Error::InvalidArgument(format!("fake set {j} does not match its span")));
        }
    }
    let available = fake_sets
        .iter()
        .fold(1usize, |acc, s| acc.saturating_mul(s.len()))
        - 1;
    let lambda = available.min(config.lambda_max);
    if lambda < config.lambda_min {
        return Err(Error::InsufficientObfuscation {
            available: lambda,
            required: config.lambda_min,
        });
    }

    let mut fakes = Vec::with_capacity(lambda);
    let mut digits = vec![0usize; fake_sets.len()];
    while fakes.len() < lambda {
        // increment, first segment fastest
        for (d, s) in digits.iter_mut().zip(fake_sets) {
            *d += 1;
            if *d < s.len() {
                break;
            }
            *d = 0;
        }
        let mut p = prompt.tokens().to_vec();
        for ((d, s), span) in digits.iter().zip(fake_sets).zip(spans) {
            p[span.start..span.end()].copy_from_slice(&s.candidates()[*d]);
        }
        fakes.push(p);
    }

    let idx = prf_index(&config.prf_key, session_id, lambda);
    let mut prompts = fakes;
    prompts.insert(idx, prompt.tokens().to_vec());
    Ok(VirtualPromptSet { prompts, idx, lambda })
}

/// Pick the authentic response out of the `lambda + 1` responses.
pub fn winnow<T: Clone>(responses: &[T], idx: usize) -> Result<T> {
    responses.get(idx).cloned().ok_or(Error::IndexOutOfRange {
        index: idx,
        len: responses.len(),
    })
}
