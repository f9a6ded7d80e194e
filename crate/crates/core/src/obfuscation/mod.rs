//! Prompt obfuscation: tag sensitive spans, sample same-likelihood fake
//! n-grams for them, hide the authentic prompt among the fakes at a keyed
//! pseudorandom index, and pick the authentic response back out.

mod gqs;
mod prompts;
mod tagging;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gqs::{bin_index, gqs, multi_segment_gqs, verify_bound, FakeNgramSet};
pub use prompts::{build_virtual_prompts, prf_index, winnow, VirtualPromptSet};
pub use tagging::{tag_sensitive, Span, TagRule, TagRules, TaggedPrompt, MAX_REGEX_WINDOW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObfuscationConfig {
    /// Total log-likelihood error bound.
    pub epsilon: f64,
    pub lambda_max: usize,
    pub lambda_min: usize,
    pub temperature: f64,
    /// Key shared by the user and its party; selects the authentic index.
    #[serde(with = "hex_bytes")]
    pub prf_key: Vec<u8>,
}

impl Default for ObfuscationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            lambda_max: 8,
            lambda_min: 2,
            temperature: 1.0,
            prf_key: b"ospd-demo-key".to_vec(),
        }
    }
}

impl ObfuscationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument("epsilon must be finite and >= 0".into()));
        }
        if self.lambda_min > self.lambda_max {
            return Err(Error::InvalidArgument("lambda_min exceeds lambda_max".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        Ok(())
    }
}

mod hex_bytes {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(D::Error::custom)
    }
}
