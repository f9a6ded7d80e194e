use std::collections::BTreeMap;
use std::sync::Arc;

use super::wire::{Message, Tag};
use crate::error::{Error, Result};
use crate::model::Weights;
use crate::numerics::Matrix;
use crate::partition::{batched_public_partials, merge_partials, KvPartition, PartialAttention, Public};

#[derive(Debug)]
struct ModelStream {
    prompt_len: usize,
    public: KvPartition<Public>,
}

impl ModelStream {
    fn position(&self) -> usize {
        self.prompt_len + self.public.len()
    }
}

#[derive(Debug)]
struct Step {
    sessions: Vec<u32>,
    positions: Vec<usize>,
    x: Matrix,
    layer: usize,
    q: Option<Matrix>,
}

/// The weight holder. Keeps only public KV rows (tokens generated after the
/// prompt) and advances a batch of streams one token at a time, layer by
/// layer, asking the user side for the private half of each attention.
#[derive(Debug)]
pub struct ModelParty {
    weights: Arc<Weights>,
    streams: BTreeMap<u32, ModelStream>,
    step: Option<Step>,
}

impl ModelParty {
    pub fn new(weights: Arc<Weights>) -> Self {
        Self {
            weights,
            streams: BTreeMap::new(),
            step: None,
        }
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn open(&mut self, session: u32, prompt_len: usize) -> Result<()> {
        if prompt_len == 0 {
            return Err(Error::EmptyPrompt);
        }
        if self.streams.contains_key(&session) {
            return Err(Error::Protocol(format!("stream {session} already open")));
        }
        let c = self.weights.config();
        self.streams.insert(
            session,
            ModelStream {
                prompt_len,
                public: KvPartition::new(c.n_layers, c.n_heads, c.head_dim),
            },
        );
        Ok(())
    }

    pub fn close(&mut self, session: u32) {
        self.streams.remove(&session);
    }

    pub fn is_open(&self, session: u32) -> bool {
        self.streams.contains_key(&session)
    }

    /// Sequence position the next token of `session` would occupy.
    pub fn position(&self, session: u32) -> Option<usize> {
        self.streams.get(&session).map(ModelStream::position)
    }

    pub fn public_len(&self, session: u32) -> Option<usize> {
        self.streams.get(&session).map(|s| s.public.len())
    }

    pub fn public_scalar_count(&self) -> usize {
        self.streams.values().map(|s| s.public.scalar_count()).sum()
    }

    /// Begin a token step for `(session, token)` pairs.
    pub fn start_step(&mut self, batch: &[(u32, u32)]) -> Result<()> {
        if self.step.is_some() {
            return Err(Error::Protocol("previous step unfinished".into()));
        }
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let max_seq = self.weights.config().max_seq;
        for (s, _) in batch {
            let pos = self
                .position(*s)
                .ok_or_else(|| Error::Protocol(format!("unknown stream {s}")))?;
            if pos >= max_seq {
                return Err(Error::CacheFull(pos));
            }
        }
        let tokens: Vec<u32> = batch.iter().map(|b| b.1).collect();
        self.step = Some(Step {
            sessions: batch.iter().map(|b| b.0).collect(),
            positions: batch.iter().map(|b| self.streams[&b.0].position()).collect(),
            x: self.weights.embed(&tokens)?,
            layer: 0,
            q: None,
        });
        Ok(())
    }

    /// Project the current layer, append the new K/V rows to the public
    /// partitions, and emit one QUERY per (stream, head), stream-major.
    pub fn layer_queries(&mut self) -> Result<Vec<Message>> {
        let step = self.step.as_mut().ok_or_else(|| Error::Protocol("no step in progress".into()))?;
        if step.q.is_some() {
            return Err(Error::Protocol("queries already issued for this layer".into()));
        }
        let c = *self.weights.config();
        let qkv = self.weights.qkv(step.layer, &step.x, &step.positions)?;
        let mut out = Vec::with_capacity(step.sessions.len() * c.n_heads);
        for (b, s) in step.sessions.iter().enumerate() {
            let stream = self.streams.get_mut(s).expect("checked at start");
            for head in 0..c.n_heads {
                let span = head * c.head_dim..(head + 1) * c.head_dim;
                stream
                    .public
                    .append(step.layer, head, &qkv.k.row(b)[span.clone()], &qkv.v.row(b)[span.clone()])?;
                out.push(Message::query(*s, step.layer as u16, head as u16, &qkv.q.row(b)[span]));
            }
        }
        step.q = Some(qkv.q);
        Ok(out)
    }

    /// Take the private partials, in the same order as the queries, merge
    /// them with the batched public partials, and finish the layer.
    pub fn layer_partials(&mut self, partials: &[Message]) -> Result<()> {
        let step = self.step.as_mut().ok_or_else(|| Error::Protocol("no step in progress".into()))?;
        let q = step
            .q
            .take()
            .ok_or_else(|| Error::Protocol("PARTIAL before QUERY".into()))?;
        let c = *self.weights.config();
        let hd = c.head_dim;
        if partials.len() != step.sessions.len() * c.n_heads {
            return Err(Error::Protocol(format!(
                "{} partials for {} queries",
                partials.len(),
                step.sessions.len() * c.n_heads
            )));
        }
        let mut private: Vec<PartialAttention> = Vec::with_capacity(partials.len());
        for (i, m) in partials.iter().enumerate() {
            let (b, head) = (i / c.n_heads, i % c.n_heads);
            if m.tag != Tag::Partial
                || m.session != step.sessions[b]
                || m.layer as usize != step.layer
                || m.head as usize != head
            {
                return Err(Error::Protocol(format!(
                    "out-of-order {} session {} layer {} head {}; expected PARTIAL session {} layer {} head {}",
                    m.tag.name(),
                    m.session,
                    m.layer,
                    m.head,
                    step.sessions[b],
                    step.layer,
                    head
                )));
            }
            let p = m.as_partial()?;
            if p.a.len() != hd {
                return Err(Error::Frame("partial width differs from head_dim".into()));
            }
            private.push(p);
        }

        let qs: Vec<&[f64]> = (0..partials.len())
            .map(|i| {
                let (b, head) = (i / c.n_heads, i % c.n_heads);
                &q.row(b)[head * hd..(head + 1) * hd]
            })
            .collect();
        let parts: Vec<_> = (0..partials.len())
            .map(|i| self.streams[&step.sessions[i / c.n_heads]].public.head(step.layer, i % c.n_heads))
            .collect();
        let public = batched_public_partials(&qs, &parts)?;

        let mut attn = Matrix::zeros(step.sessions.len(), c.d_model);
        for (i, (pv, pb)) in private.iter().zip(&public).enumerate() {
            let (b, head) = (i / c.n_heads, i % c.n_heads);
            let y = merge_partials(pv, pb)?;
            attn.row_mut(b)[head * hd..(head + 1) * hd].copy_from_slice(&y);
        }
        step.x = self.weights.finish_layer(step.layer, &step.x, &attn)?;
        step.layer += 1;
        Ok(())
    }

    pub fn layers_remaining(&self) -> usize {
        self.step
            .as_ref()
            .map_or(0, |s| self.weights.config().n_layers - s.layer)
    }

    /// Logits for every stream in the step, in batch order.
    pub fn finish_step(&mut self) -> Result<Vec<(u32, Vec<f64>)>> {
        if self.layers_remaining() != 0 {
            return Err(Error::Protocol("step finished before all layers".into()));
        }
        let step = self.step.take().ok_or_else(|| Error::Protocol("no step in progress".into()))?;
        let logits = self.weights.logits(&step.x)?;
        Ok(step
            .sessions
            .iter()
            .enumerate()
            .map(|(b, s)| (*s, logits.row(b).to_vec()))
            .collect())
    }
}
