use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::wire::{ControlOp, Message, Tag};
use crate::error::{Error, Result};
use crate::model::{prefill_batch, sample_token, ModelConfig, Sampling, Weights};
use crate::obfuscation::{build_virtual_prompts, winnow, FakeNgramSet, ObfuscationConfig, TaggedPrompt, VirtualPromptSet};
use crate::partition::{private_partial, KvPartition, Private};

/// Weights the user party may use for prefill only. After [`release`]
/// every access fails and is counted.
///
/// [`release`]: WeightsHandle::release
#[derive(Debug)]
pub struct WeightsHandle {
    weights: Option<Arc<Weights>>,
    denied: AtomicUsize,
}

impl WeightsHandle {
    pub fn new(weights: Arc<Weights>) -> Self {
        Self {
            weights: Some(weights),
            denied: AtomicUsize::new(0),
        }
    }

    pub fn get(&self) -> Result<&Weights> {
        match &self.weights {
            Some(w) => Ok(w),
            None => {
                self.denied.fetch_add(1, Ordering::Relaxed);
                Err(Error::WeightsReleased)
            }
        }
    }

    pub fn release(&mut self) {
        self.weights = None;
    }

    pub fn is_released(&self) -> bool {
        self.weights.is_none()
    }

    /// Access attempts made after release.
    pub fn denied_accesses(&self) -> usize {
        self.denied.load(Ordering::Relaxed)
    }

    pub fn resident_matrices(&self) -> usize {
        self.weights.as_ref().map_or(0, |w| w.matrix_count())
    }
}

/// Flip the low bit of the controller-bound copy of one token: stream
/// `stream`, token number `step` (0 is the prefill token).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tamper {
    pub stream: usize,
    pub step: usize,
}

/// Messages produced in reply to one input.
#[derive(Debug, Default)]
pub struct Outbound {
    pub to_model: Vec<Message>,
    pub to_controller: Vec<Message>,
}

#[derive(Debug)]
struct UserStream {
    wire_id: u32,
    private: KvPartition<Private>,
    tokens: Vec<u32>,
    next_query: usize,
    open: bool,
    abort: Option<String>,
}

/// The prompt owner. Holds the private KV rows of every virtual prompt and
/// answers attention queries against them; samples tokens from the logits
/// the model party sends back.
#[derive(Debug)]
pub struct UserParty {
    session_id: u64,
    base_stream: u32,
    model: ModelConfig,
    obfuscation: ObfuscationConfig,
    sampling: Sampling,
    weights: WeightsHandle,
    prompts: Option<VirtualPromptSet>,
    streams: Vec<UserStream>,
    tamper: Option<Tamper>,
}

/// Wire id of stream `index` of user `user`.
pub fn stream_id(user: usize, index: usize) -> u32 {
    ((user as u32) << 16) | index as u32
}

impl UserParty {
    pub fn new(
        session_id: u64,
        base_stream: u32,
        weights: Arc<Weights>,
        obfuscation: ObfuscationConfig,
        sampling: Sampling,
    ) -> Self {
        Self {
            session_id,
            base_stream,
            model: *weights.config(),
            obfuscation,
            sampling,
            weights: WeightsHandle::new(weights),
            prompts: None,
            streams: Vec::new(),
            tamper: None,
        }
    }

    pub fn with_tamper(mut self, tamper: Tamper) -> Self {
        self.tamper = Some(tamper);
        self
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn base_stream(&self) -> u32 {
        self.base_stream
    }

    pub fn weights(&self) -> &WeightsHandle {
        &self.weights
    }

    pub fn virtual_prompts(&self) -> Option<&VirtualPromptSet> {
        self.prompts.as_ref()
    }

    pub fn stream_ids(&self) -> Vec<u32> {
        self.streams.iter().map(|s| s.wire_id).collect()
    }

    /// Build the virtual prompts, prefill all of them in one batch, drop the
    /// weights, and emit OPEN plus the first token for each stream.
    pub fn prefill(&mut self, prompt: &TaggedPrompt, fake_sets: &[FakeNgramSet]) -> Result<Outbound> {
        if self.prompts.is_some() {
            return Err(Error::Protocol("prefill already done".into()));
        }
        let vps = build_virtual_prompts(prompt, fake_sets, &self.obfuscation, self.session_id)?;
        if vps.prompts().len() > 1 << 16 {
            return Err(Error::InvalidArgument("too many virtual prompts".into()));
        }
        let refs: Vec<&[u32]> = vps.prompts().iter().map(Vec::as_slice).collect();
        let results = prefill_batch(self.weights.get()?, &refs)?;
        self.weights.release();

        let n = results.len() as u32;
        let prompt_len = prompt.tokens().len() as u32;
        let mut out = Outbound::default();
        for (i, (cache, logits)) in results.into_iter().enumerate() {
            let wire_id = self.base_stream + i as u32;
            let first = self.sample(i, 0, &logits);
            self.streams.push(UserStream {
                wire_id,
                private: KvPartition::from_prompt_cache(cache),
                tokens: vec![first],
                next_query: 0,
                open: true,
                abort: None,
            });
            out.to_model.push(Message::control(
                wire_id,
                ControlOp::Open {
                    prompt_len,
                    streams: n,
                },
            ));
            out.to_model.push(Message::token(wire_id, first));
            out.to_controller.push(self.controller_copy(i, 0, first));
        }
        self.prompts = Some(vps);
        Ok(out)
    }

    fn sample(&self, stream: usize, step: usize, logits: &[f64]) -> u32 {
        let strategy = match self.sampling {
            Sampling::Greedy => Sampling::Greedy,
            Sampling::Temperature { tau, seed } => Sampling::Temperature {
                tau,
                seed: seed
                    ^ self.session_id.rotate_left(17)
                    ^ ((stream as u64) << 40)
                    ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            },
        };
        sample_token(logits, strategy)
    }

    fn controller_copy(&self, stream: usize, step: usize, token: u32) -> Message {
        let wire_id = self.streams.get(stream).map_or(self.base_stream + stream as u32, |s| s.wire_id);
        let t = match self.tamper {
            Some(tp) if tp.stream == stream && tp.step == step => token ^ 1,
            _ => token,
        };
        Message::token(wire_id, t)
    }

    fn stream_index(&self, wire_id: u32) -> Result<usize> {
        let i = wire_id.wrapping_sub(self.base_stream) as usize;
        if i < self.streams.len() {
            Ok(i)
        } else {
            Err(Error::Protocol(format!("unknown stream {wire_id}")))
        }
    }

    /// Process one message from the model party.
    pub fn handle(&mut self, msg: &Message) -> Result<Outbound> {
        let i = self.stream_index(msg.session)?;
        let (layers, heads, hd) = (self.model.n_layers, self.model.n_heads, self.model.head_dim);
        let mut out = Outbound::default();
        if !self.streams[i].open {
            return Err(Error::Protocol(format!("message for closed stream {}", msg.session)));
        }
        match msg.tag {
            Tag::Query => {
                let s = &mut self.streams[i];
                let (layer, head) = (msg.layer as usize, msg.head as usize);
                if s.next_query >= layers * heads || (layer, head) != (s.next_query / heads, s.next_query % heads) {
                    return Err(Error::Protocol(format!(
                        "out-of-order QUERY layer {layer} head {head} on stream {}",
                        msg.session
                    )));
                }
                let q = msg.scalars()?;
                if q.len() != hd {
                    return Err(Error::Frame(format!("query of {} scalars, expected {hd}", q.len())));
                }
                let p = private_partial(&q, &s.private, layer, head)?;
                s.next_query += 1;
                out.to_model.push(Message::partial(msg.session, msg.layer, msg.head, &p));
            }
            Tag::FinalY => {
                if self.streams[i].next_query != layers * heads {
                    return Err(Error::Protocol(format!("FINAL_Y before all queries on stream {}", msg.session)));
                }
                let logits = msg.scalars()?;
                if logits.len() != self.model.vocab_size {
                    return Err(Error::Frame("logits length differs from vocabulary".into()));
                }
                let step = self.streams[i].tokens.len();
                let t = self.sample(i, step, &logits);
                let s = &mut self.streams[i];
                s.next_query = 0;
                s.tokens.push(t);
                out.to_model.push(Message::token(msg.session, t));
                out.to_controller.push(self.controller_copy(i, step, t));
            }
            Tag::Control => match msg.as_control()? {
                ControlOp::Close => self.streams[i].open = false,
                op => return Err(Error::Protocol(format!("unexpected control {op:?}"))),
            },
            Tag::Abort => {
                let s = &mut self.streams[i];
                s.open = false;
                s.abort = Some(msg.abort_reason()?);
            }
            Tag::Partial | Tag::Token => {
                return Err(Error::Protocol(format!("{} is not user-bound", msg.tag.name())));
            }
        }
        Ok(out)
    }

    pub fn is_finished(&self) -> bool {
        self.prompts.is_some() && self.streams.iter().all(|s| !s.open)
    }

    /// Tokens this party sampled, per stream.
    pub fn generated(&self) -> Vec<Vec<u32>> {
        self.streams.iter().map(|s| s.tokens.clone()).collect()
    }

    pub fn aborted_streams(&self) -> Vec<(u32, String)> {
        self.streams
            .iter()
            .filter_map(|s| s.abort.clone().map(|r| (s.wire_id, r)))
            .collect()
    }

    /// Pick the authentic stream out of per-stream responses.
    pub fn winnow<T: Clone>(&self, responses: &[T]) -> Result<T> {
        let idx = self
            .prompts
            .as_ref()
            .ok_or_else(|| Error::Protocol("no prompts yet".into()))?
            .idx();
        winnow(responses, idx)
    }

    /// Total private scalars held; these never leave this party.
    pub fn private_scalar_count(&self) -> usize {
        self.streams.iter().map(|s| s.private.scalar_count()).sum()
    }
}
