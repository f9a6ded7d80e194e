//! Threaded driver: one thread per user party, one for the controller, the
//! model party on the calling thread.

use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread;

use super::accounting::{Direction, Transcript};
use super::controller::{Controller, GateMode, Verdict};
use super::model_party::ModelParty;
use super::transport::{link_pair, Link, TransportKind};
use super::user::{stream_id, Tamper, UserParty};
use super::wire::{decode, encode, ControlOp, Message, Tag};
use crate::error::{Error, Result};
use crate::model::{argmax, Sampling, Weights};
use crate::obfuscation::{FakeNgramSet, ObfuscationConfig, TaggedPrompt};

/// One user's input to a run.
#[derive(Debug, Clone)]
pub struct UserRequest {
    pub session_id: u64,
    pub prompt: TaggedPrompt,
    /// One set per tagged span; empty for an untagged prompt.
    pub fake_sets: Vec<FakeNgramSet>,
    pub obfuscation: ObfuscationConfig,
    pub tamper: Option<Tamper>,
}

impl UserRequest {
    /// A prompt with no obfuscation: a single stream.
    pub fn plain(session_id: u64, prompt: Vec<u32>) -> Self {
        Self {
            session_id,
            prompt: TaggedPrompt::untagged(prompt),
            fake_sets: Vec::new(),
            obfuscation: ObfuscationConfig {
                lambda_min: 0,
                ..Default::default()
            },
            tamper: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Decode steps after the prefill token.
    pub max_tokens: usize,
    pub sampling: Sampling,
    pub transport: TransportKind,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            max_tokens: 16,
            sampling: Sampling::Greedy,
            transport: TransportKind::Channel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserOutcome {
    pub session_id: u64,
    pub lambda: usize,
    pub idx: usize,
    pub stream_ids: Vec<u32>,
    /// Tokens that passed the controller, per stream.
    pub delivered: Vec<Vec<u32>>,
    /// Tokens the user party sampled, per stream.
    pub generated: Vec<Vec<u32>>,
    /// The delivered tokens of the authentic stream.
    pub authentic: Vec<u32>,
    pub aborted: Option<String>,
    pub denied_weight_accesses: usize,
    pub resident_weight_matrices: usize,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub users: Vec<UserOutcome>,
    pub transcript: Transcript,
    pub killed: Vec<u32>,
    pub blocked: usize,
}

enum CtrlIn {
    Expect(u32, u32),
    Outbound(Vec<u8>),
}

struct UserResult {
    lambda: usize,
    idx: usize,
    stream_ids: Vec<u32>,
    generated: Vec<Vec<u32>>,
    aborted: Option<String>,
    denied: usize,
    resident: usize,
}

fn user_thread(
    mut party: UserParty,
    request: UserRequest,
    mut link: Box<dyn Link>,
    ctrl: Sender<CtrlIn>,
    transcript: Transcript,
) -> Result<UserResult> {
    let to_ctrl = |m: &Message| {
        transcript.record(Direction::UserToController, m);
        let _ = ctrl.send(CtrlIn::Outbound(encode(m)));
    };
    let first = match party.prefill(&request.prompt, &request.fake_sets) {
        Ok(out) => out,
        Err(e) => {
            let reason = e.to_string();
            let _ = link.send(&Message::abort(party.base_stream(), &reason));
            return Ok(UserResult {
                lambda: 0,
                idx: 0,
                stream_ids: Vec::new(),
                generated: Vec::new(),
                aborted: Some(reason),
                denied: party.weights().denied_accesses(),
                resident: party.weights().resident_matrices(),
            });
        }
    };
    for m in &first.to_model {
        link.send(m)?;
    }
    for m in &first.to_controller {
        to_ctrl(m);
    }
    while !party.is_finished() {
        let msg = link.recv()?;
        let out = party.handle(&msg)?;
        for m in &out.to_model {
            link.send(m)?;
        }
        for m in &out.to_controller {
            to_ctrl(m);
        }
    }
    let vps = party.virtual_prompts().expect("prefilled");
    Ok(UserResult {
        lambda: vps.lambda(),
        idx: vps.idx(),
        stream_ids: party.stream_ids(),
        generated: party.generated(),
        aborted: None,
        denied: party.weights().denied_accesses(),
        resident: party.weights().resident_matrices(),
    })
}

fn controller_thread(
    mut ctrl: Controller,
    rx: Receiver<CtrlIn>,
    verdicts: Sender<(u32, Verdict)>,
) -> Controller {
    let mut pending: BTreeMap<u32, VecDeque<Message>> = BTreeMap::new();
    while let Ok(input) = rx.recv() {
        let session = match input {
            CtrlIn::Expect(s, t) => {
                ctrl.expect(s, t);
                s
            }
            CtrlIn::Outbound(bytes) => match decode(&bytes) {
                Ok(m) if m.tag == Tag::Token => {
                    let s = m.session;
                    pending.entry(s).or_default().push_back(m);
                    s
                }
                Ok(m) => {
                    let _ = verdicts.send((m.session, ctrl.gate(&m)));
                    continue;
                }
                Err(_) => continue,
            },
        };
        let queue = pending.entry(session).or_default();
        while ctrl.has_expectation(session) && !queue.is_empty() {
            let m = queue.pop_front().expect("nonempty");
            let _ = verdicts.send((session, ctrl.gate(&m)));
        }
    }
    ctrl
}

struct StreamState {
    user: usize,
    expected: Option<u32>,
    steps: usize,
    pending: Option<u32>,
}

struct ModelLoop<'a> {
    party: ModelParty,
    links: &'a mut [Box<dyn Link>],
    transcript: &'a Transcript,
    ctrl: &'a Sender<CtrlIn>,
    verdicts: &'a Receiver<(u32, Verdict)>,
    early_verdicts: BTreeMap<u32, VecDeque<Verdict>>,
    streams: BTreeMap<u32, StreamState>,
    max_tokens: usize,
    eos: u32,
}

impl ModelLoop<'_> {
    fn send(&mut self, user: usize, msg: &Message) -> Result<()> {
        self.transcript.record(Direction::ModelToUser, msg);
        self.links[user].send(msg)?;
        Ok(())
    }

    fn recv(&mut self, user: usize) -> Result<Message> {
        let m = self.links[user].recv()?;
        self.transcript.record(Direction::UserToModel, &m);
        Ok(m)
    }

    fn verdict(&mut self, session: u32) -> Result<Verdict> {
        if let Some(v) = self.early_verdicts.get_mut(&session).and_then(VecDeque::pop_front) {
            return Ok(v);
        }
        loop {
            let (s, v) = self
                .verdicts
                .recv()
                .map_err(|_| Error::Protocol("controller gone".into()))?;
            if s == session {
                return Ok(v);
            }
            self.early_verdicts.entry(s).or_default().push_back(v);
        }
    }

    /// A token arrived from the user for `session`: gate check, then either
    /// schedule the next step or close the stream.
    fn accept_token(&mut self, session: u32, token: u32) -> Result<()> {
        let st = self.streams.get_mut(&session).expect("registered");
        let expected = st.expected.take().unwrap_or(token);
        let user = st.user;
        let _ = self.ctrl.send(CtrlIn::Expect(session, expected));
        if self.verdict(session)? == Verdict::Block {
            self.party.close(session);
            self.streams.remove(&session);
            return self.send(user, &Message::abort(session, "controller blocked token"));
        }
        let st = self.streams.get_mut(&session).expect("registered");
        let full = self.party.position(session).expect("open") >= self.party.weights().config().max_seq;
        if token == self.eos || st.steps >= self.max_tokens || full {
            self.party.close(session);
            self.streams.remove(&session);
            return self.send(user, &Message::control(session, ControlOp::Close));
        }
        st.pending = Some(token);
        Ok(())
    }

    fn expect_token(&mut self, user: usize, session: u32) -> Result<u32> {
        let m = self.recv(user)?;
        if m.session != session {
            return Err(Error::Protocol(format!(
                "expected TOKEN on stream {session}, got {} on {}",
                m.tag.name(),
                m.session
            )));
        }
        m.as_token()
    }

    fn handshake(&mut self, user: usize) -> Result<Option<String>> {
        let mut opened = 0;
        let mut total = None;
        loop {
            let m = self.recv(user)?;
            if m.tag == Tag::Abort {
                return Ok(Some(m.abort_reason()?));
            }
            let ControlOp::Open { prompt_len, streams } = m.as_control()? else {
                return Err(Error::Protocol("expected OPEN".into()));
            };
            if m.session >> 16 != user as u32 || total.is_some_and(|t| t != streams) {
                return Err(Error::Protocol(format!("bad OPEN on stream {}", m.session)));
            }
            total = Some(streams);
            self.party.open(m.session, prompt_len as usize)?;
            self.streams.insert(
                m.session,
                StreamState {
                    user,
                    expected: None,
                    steps: 0,
                    pending: None,
                },
            );
            let t = self.expect_token(user, m.session)?;
            self.accept_token(m.session, t)?;
            opened += 1;
            if opened == streams {
                return Ok(None);
            }
        }
    }

    fn step(&mut self) -> Result<bool> {
        let batch: Vec<(u32, u32)> = self
            .streams
            .iter_mut()
            .filter_map(|(s, st)| st.pending.take().map(|t| (*s, t)))
            .collect();
        if batch.is_empty() {
            return Ok(false);
        }
        let users: Vec<usize> = batch.iter().map(|(s, _)| self.streams[s].user).collect();
        let n_heads = self.party.weights().config().n_heads;
        self.party.start_step(&batch)?;
        while self.party.layers_remaining() > 0 {
            let queries = self.party.layer_queries()?;
            for (i, q) in queries.iter().enumerate() {
                self.send(users[i / n_heads], q)?;
            }
            let mut partials = Vec::with_capacity(queries.len());
            for i in 0..queries.len() {
                partials.push(self.recv(users[i / n_heads])?);
            }
            self.party.layer_partials(&partials)?;
        }
        let logits = self.party.finish_step()?;
        for ((s, y), &user) in logits.iter().zip(&users) {
            let st = self.streams.get_mut(s).expect("in batch");
            st.expected = Some(argmax(y));
            st.steps += 1;
            self.send(user, &Message::final_y(*s, y))?;
        }
        for ((s, _), &user) in batch.iter().zip(&users) {
            let t = self.expect_token(user, *s)?;
            self.accept_token(*s, t)?;
        }
        Ok(true)
    }
}

/// Serve every request concurrently until all streams end.
pub fn run_sessions(weights: Arc<Weights>, requests: Vec<UserRequest>, opts: RunOptions) -> Result<RunReport> {
    if requests.len() >= 1 << 16 {
        return Err(Error::InvalidArgument("too many users".into()));
    }
    let cfg = *weights.config();
    let transcript = Transcript::new();
    let mode = match opts.sampling {
        Sampling::Greedy => GateMode::Exact,
        Sampling::Temperature { .. } => GateMode::Support {
            vocab_size: cfg.vocab_size,
        },
    };
    let (ctrl_tx, ctrl_rx) = channel();
    let (verdict_tx, verdict_rx) = channel();
    let ctrl_handle = thread::spawn(move || controller_thread(Controller::new(mode), ctrl_rx, verdict_tx));

    let mut links = Vec::with_capacity(requests.len());
    let mut handles = Vec::with_capacity(requests.len());
    for (u, req) in requests.iter().enumerate() {
        let (model_end, user_end) = link_pair(opts.transport)?;
        links.push(model_end);
        let mut party = UserParty::new(
            req.session_id,
            stream_id(u, 0),
            weights.clone(),
            req.obfuscation.clone(),
            opts.sampling,
        );
        if let Some(t) = req.tamper {
            party = party.with_tamper(t);
        }
        let (req, tx, tr) = (req.clone(), ctrl_tx.clone(), transcript.clone());
        handles.push(thread::spawn(move || user_thread(party, req, user_end, tx, tr)));
    }

    let model_result = {
        let mut ml = ModelLoop {
            party: ModelParty::new(weights.clone()),
            links: &mut links,
            transcript: &transcript,
            ctrl: &ctrl_tx,
            verdicts: &verdict_rx,
            early_verdicts: BTreeMap::new(),
            streams: BTreeMap::new(),
            max_tokens: opts.max_tokens,
            eos: cfg.eos(),
        };
        (|| -> Result<()> {
            for u in 0..requests.len() {
                ml.handshake(u)?;
            }
            while ml.step()? {}
            Ok(())
        })()
    };
    drop(links);
    let user_results: Vec<Result<UserResult>> = handles
        .into_iter()
        .map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("user party panicked".into()))))
        .collect();
    drop(ctrl_tx);
    let ctrl = ctrl_handle.join().map_err(|_| Error::Protocol("controller panicked".into()))?;
    model_result?;

    let mut users = Vec::with_capacity(requests.len());
    for (req, res) in requests.iter().zip(user_results) {
        let r = res?;
        let delivered: Vec<Vec<u32>> = r.stream_ids.iter().map(|s| ctrl.delivered(*s).to_vec()).collect();
        let authentic = delivered.get(r.idx).cloned().unwrap_or_default();
        users.push(UserOutcome {
            session_id: req.session_id,
            lambda: r.lambda,
            idx: r.idx,
            stream_ids: r.stream_ids,
            delivered,
            generated: r.generated,
            authentic,
            aborted: r.aborted,
            denied_weight_accesses: r.denied,
            resident_weight_matrices: r.resident,
        });
    }
    Ok(RunReport {
        users,
        transcript,
        killed: ctrl.killed().iter().copied().collect(),
        blocked: ctrl.blocked(),
    })
}

/// A single user's session.
pub fn run_decode_session(weights: Arc<Weights>, request: UserRequest, opts: RunOptions) -> Result<RunReport> {
    run_sessions(weights, vec![request], opts)
}
