use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use super::wire::{Message, Tag};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    ModelToUser,
    UserToModel,
    UserToController,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::ModelToUser => "m2u",
            Direction::UserToModel => "u2m",
            Direction::UserToController => "u2c",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub dir: Direction,
    pub tag: Tag,
    pub session: u32,
    pub layer: u16,
    pub head: u16,
    pub bytes: usize,
    pub scalars: usize,
}

impl Entry {
    pub fn of(dir: Direction, msg: &Message) -> Self {
        Self {
            dir,
            tag: msg.tag,
            session: msg.session,
            layer: msg.layer,
            head: msg.head,
            bytes: msg.frame_len(),
            scalars: msg.scalar_count(),
        }
    }
}

impl fmt::Display for Entry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {}",
            self.dir.label(),
            self.tag.name(),
            self.session,
            self.layer,
            self.head,
            self.bytes
        )
    }
}

/// Append-only message log shared by the recording parties.
#[derive(Debug, Clone, Default)]
pub struct Transcript(Arc<Mutex<Vec<Entry>>>);

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, dir: Direction, msg: &Message) {
        self.0.lock().expect("transcript lock").push(Entry::of(dir, msg));
    }

    pub fn entries(&self) -> Vec<Entry> {
        self.0.lock().expect("transcript lock").clone()
    }

    /// One line per message: `dir tag session layer head nbytes`.
    pub fn dump(&self) -> String {
        self.entries().iter().map(|e| format!("{e}\n")).collect()
    }
}

/// Traffic for one decode round of one stream: the incoming TOKEN, the
/// QUERYs and PARTIALs of every layer, and the closing FINAL_Y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundStats {
    pub query_msgs: usize,
    pub partial_msgs: usize,
    pub query_scalars: usize,
    pub partial_scalars: usize,
    pub logits_scalars: usize,
    pub m2u_bytes: usize,
    pub u2m_bytes: usize,
}

impl RoundStats {
    /// Attention scalars exchanged: queries out, partials back.
    pub fn attention_scalars(&self) -> usize {
        self.query_scalars + self.partial_scalars
    }

    pub fn messages(&self) -> usize {
        self.query_msgs + self.partial_msgs
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CommReport {
    /// Completed rounds per stream, in order.
    pub rounds: BTreeMap<u32, Vec<RoundStats>>,
    pub bytes_by_dir: BTreeMap<Direction, usize>,
    pub scalars_by_dir: BTreeMap<Direction, usize>,
    pub msgs_by_tag: BTreeMap<Tag, usize>,
}

impl CommReport {
    pub fn all_rounds(&self) -> impl Iterator<Item = &RoundStats> {
        self.rounds.values().flatten()
    }

    pub fn total_rounds(&self) -> usize {
        self.rounds.values().map(Vec::len).sum()
    }

    /// Round bytes in both directions, averaged over all rounds.
    pub fn bytes_per_round(&self) -> f64 {
        let n = self.total_rounds();
        if n == 0 {
            return 0.0;
        }
        self.all_rounds().map(|r| r.m2u_bytes + r.u2m_bytes).sum::<usize>() as f64 / n as f64
    }
}

pub fn comm_accounting(entries: &[Entry]) -> CommReport {
    let mut report = CommReport::default();
    let mut open: BTreeMap<u32, RoundStats> = BTreeMap::new();
    for e in entries {
        *report.bytes_by_dir.entry(e.dir).or_default() += e.bytes;
        *report.scalars_by_dir.entry(e.dir).or_default() += e.scalars;
        *report.msgs_by_tag.entry(e.tag).or_default() += 1;
        if e.dir == Direction::UserToController {
            continue;
        }
        if matches!(e.tag, Tag::Control | Tag::Abort) {
            continue;
        }
        let r = open.entry(e.session).or_default();
        match e.dir {
            Direction::ModelToUser => r.m2u_bytes += e.bytes,
            _ => r.u2m_bytes += e.bytes,
        }
        match e.tag {
            Tag::Query => {
                r.query_msgs += 1;
                r.query_scalars += e.scalars;
            }
            Tag::Partial => {
                r.partial_msgs += 1;
                r.partial_scalars += e.scalars;
            }
            Tag::FinalY => {
                r.logits_scalars += e.scalars;
                let done = std::mem::take(r);
                report.rounds.entry(e.session).or_default().push(done);
            }
            _ => {}
        }
    }
    report
}

/// Predicted per-round attention scalars: `L H hd` query scalars and
/// `L H (hd + 2)` partial scalars, so `L H (2 hd + 2)` in total.
pub fn predicted_round_scalars(c: &ModelConfig) -> (usize, usize) {
    let lh = c.n_layers * c.n_heads;
    (lh * c.head_dim, lh * (c.head_dim + 2))
}

/// Predicted per-round bytes in each direction, excluding the FINAL_Y and
/// TOKEN frames that close the round.
pub fn predicted_round_bytes(c: &ModelConfig) -> (usize, usize) {
    let frame = super::wire::PREFIX_LEN + super::wire::HEADER_LEN;
    let lh = c.n_layers * c.n_heads;
    (lh * (frame + 8 * c.head_dim), lh * (frame + 8 * (c.head_dim + 2)))
}

/// Human-readable comparison with the `2d + 1` per-round figure. Per head
/// and layer we send `hd` query scalars and receive `hd` output scalars plus
/// the denominator and the max score; the max is the extra `+1` relative to
/// that figure.
pub fn overhead_explanation(c: &ModelConfig) -> String {
    let (q, p) = predicted_round_scalars(c);
    let lh = c.n_layers * c.n_heads;
    format!(
        "per round: {q} query + {p} partial = {} scalars over {lh} (layer, head) pairs\n\
         per pair: 2*{hd}+2 = {}; the 2d+1 figure plus m, the max score sent for stable merging\n",
        q + p,
        2 * c.head_dim + 2,
        hd = c.head_dim
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::PartialAttention;
    use crate::protocol::wire::ControlOp;

    #[test]
    fn rounds_split_at_final_y() {
        let t = Transcript::new();
        let p = PartialAttention {
            a: vec![0.0; 4],
            gamma: 1.0,
            m: 0.0,
        };
        t.record(Direction::UserToModel, &Message::control(1, ControlOp::Open { prompt_len: 3, streams: 1 }));
        for _ in 0..2 {
            t.record(Direction::UserToModel, &Message::token(1, 3));
            t.record(Direction::UserToController, &Message::token(1, 3));
            t.record(Direction::ModelToUser, &Message::query(1, 0, 0, &[0.0; 4]));
            t.record(Direction::UserToModel, &Message::partial(1, 0, 0, &p));
            t.record(Direction::ModelToUser, &Message::final_y(1, &[0.0; 10]));
        }
        t.record(Direction::UserToModel, &Message::token(1, 3));
        let r = comm_accounting(&t.entries());
        assert_eq!(r.rounds[&1].len(), 2);
        let round = r.rounds[&1][0];
        assert_eq!(round.query_scalars, 4);
        assert_eq!(round.partial_scalars, 6);
        assert_eq!(round.logits_scalars, 10);
        assert_eq!(round.m2u_bytes, 17 + 32 + 17 + 80);
        assert_eq!(round.u2m_bytes, 21 + 17 + 48);
        assert_eq!(r.rounds[&1][1], round);
        assert_eq!(t.dump().lines().nth(1), Some("u2m TOKEN 1 0 0 21"));
    }

    #[test]
    fn predictions_scale_with_width() {
        let c = ModelConfig::default();
        let (q, p) = predicted_round_scalars(&c);
        assert_eq!(q, 2 * 4 * 8);
        assert_eq!(p, 2 * 4 * 10);
        let wide = ModelConfig {
            d_model: 64,
            head_dim: 16,
            ..c
        };
        assert_eq!(predicted_round_scalars(&wide).0, 2 * q);
        assert!(overhead_explanation(&c).contains("2*8+2 = 18"));
    }
}
