use std::collections::{BTreeMap, BTreeSet, VecDeque};

use super::wire::{Message, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Block,
}

/// What the controller compares outbound tokens against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Token must equal the model party's greedy token.
    Exact,
    /// Sampled decoding: token must be inside the vocabulary.
    Support { vocab_size: usize },
}

/// Sits on the user-bound pipe. Only TOKEN frames that match the model
/// party's ground truth get through; anything else kills the session.
#[derive(Debug, Clone)]
pub struct Controller {
    mode: GateMode,
    expected: BTreeMap<u32, VecDeque<u32>>,
    delivered: BTreeMap<u32, Vec<u32>>,
    killed: BTreeSet<u32>,
    blocked: usize,
}

impl Controller {
    pub fn new(mode: GateMode) -> Self {
        Self {
            mode,
            expected: BTreeMap::new(),
            delivered: BTreeMap::new(),
            killed: BTreeSet::new(),
            blocked: 0,
        }
    }

    /// Ground truth for the next token of `session`, from the model party.
    pub fn expect(&mut self, session: u32, token: u32) {
        self.expected.entry(session).or_default().push_back(token);
    }

    pub fn has_expectation(&self, session: u32) -> bool {
        self.expected.get(&session).is_some_and(|q| !q.is_empty())
    }

    pub fn gate(&mut self, msg: &Message) -> Verdict {
        let verdict = self.check(msg);
        match verdict {
            Verdict::Pass => {
                let t = msg.as_token().expect("checked");
                self.delivered.entry(msg.session).or_default().push(t);
            }
            Verdict::Block => {
                self.blocked += 1;
                self.killed.insert(msg.session);
            }
        }
        verdict
    }

    fn check(&mut self, msg: &Message) -> Verdict {
        if msg.tag != Tag::Token || self.killed.contains(&msg.session) {
            return Verdict::Block;
        }
        let Ok(token) = msg.as_token() else {
            return Verdict::Block;
        };
        let Some(expected) = self.expected.get_mut(&msg.session).and_then(VecDeque::pop_front) else {
            return Verdict::Block;
        };
        let ok = match self.mode {
            GateMode::Exact => token == expected,
            GateMode::Support { vocab_size } => (token as usize) < vocab_size,
        };
        if ok {
            Verdict::Pass
        } else {
            Verdict::Block
        }
    }

    pub fn delivered(&self, session: u32) -> &[u32] {
        self.delivered.get(&session).map_or(&[], Vec::as_slice)
    }

    pub fn is_killed(&self, session: u32) -> bool {
        self.killed.contains(&session)
    }

    pub fn killed(&self) -> &BTreeSet<u32> {
        &self.killed
    }

    pub fn blocked(&self) -> usize {
        self.blocked
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::wire::ControlOp;

    #[test]
    fn control_is_blocked() {
        let mut c = Controller::new(GateMode::Exact);
        c.expect(1, 5);
        assert_eq!(c.gate(&Message::control(1, ControlOp::Close)), Verdict::Block);
        assert!(c.is_killed(1));
    }

    #[test]
    fn matching_token_passes() {
        let mut c = Controller::new(GateMode::Exact);
        c.expect(1, 5);
        c.expect(1, 6);
        assert_eq!(c.gate(&Message::token(1, 5)), Verdict::Pass);
        assert_eq!(c.gate(&Message::token(1, 6)), Verdict::Pass);
        assert_eq!(c.delivered(1), &[5, 6]);
        assert_eq!(c.blocked(), 0);
    }

    #[test]
    fn flipped_bit_kills_session() {
        let mut c = Controller::new(GateMode::Exact);
        c.expect(2, 8);
        c.expect(2, 9);
        assert_eq!(c.gate(&Message::token(2, 8 ^ 1)), Verdict::Block);
        assert!(c.is_killed(2));
        // nothing else gets through once killed
        assert_eq!(c.gate(&Message::token(2, 9)), Verdict::Block);
        assert!(c.delivered(2).is_empty());
    }

    #[test]
    fn unexpected_token_blocked() {
        let mut c = Controller::new(GateMode::Exact);
        assert_eq!(c.gate(&Message::token(3, 1)), Verdict::Block);
    }

    #[test]
    fn support_mode() {
        let mut c = Controller::new(GateMode::Support { vocab_size: 10 });
        c.expect(1, 0);
        c.expect(1, 0);
        assert_eq!(c.gate(&Message::token(1, 7)), Verdict::Pass);
        assert_eq!(c.gate(&Message::token(1, 10)), Verdict::Block);
    }

    #[test]
    fn other_tags_blocked() {
        let mut c = Controller::new(GateMode::Exact);
        for m in [
            Message::query(1, 0, 0, &[1.0]),
            Message::final_y(2, &[1.0]),
            Message::abort(3, "x"),
        ] {
            c.expect(m.session, 0);
            assert_eq!(c.gate(&m), Verdict::Block);
        }
        assert_eq!(c.blocked(), 3);
    }
}
