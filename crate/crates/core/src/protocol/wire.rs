//! Frame layout, all little-endian:
//!
//! ```text
//! u32 frame_len   whole frame, including these 4 bytes
//! u8  tag
//! u32 session
//! u16 layer
//! u16 head
//! u32 payload_len
//! [u8; payload_len]
//! ```
//!
//! Real-valued payloads are packed f64s. TOKEN carries one u32.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::partition::PartialAttention;

pub const PREFIX_LEN: usize = 4;
pub const HEADER_LEN: usize = 1 + 4 + 2 + 2 + 4;
pub const MAX_FRAME_LEN: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Tag {
    Query = 0x01,
    Partial = 0x02,
    Token = 0x03,
    FinalY = 0x04,
    Control = 0x05,
    Abort = 0x06,
}

impl Tag {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0x01 => Tag::Query,
            0x02 => Tag::Partial,
            0x03 => Tag::Token,
            0x04 => Tag::FinalY,
            0x05 => Tag::Control,
            0x06 => Tag::Abort,
            other => return Err(Error::Frame(format!("unknown tag 0x{other:02x}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Query => "QUERY",
            Tag::Partial => "PARTIAL",
            Tag::Token => "TOKEN",
            Tag::FinalY => "FINAL_Y",
            Tag::Control => "CONTROL",
            Tag::Abort => "ABORT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlOp {
    /// A stream starts; `streams` is how many the sender will open in total.
    Open { prompt_len: u32, streams: u32 },
    Close,
}

const OP_OPEN: u8 = 1;
const OP_CLOSE: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub tag: Tag,
    pub session: u32,
    pub layer: u16,
    pub head: u16,
    pub payload: Vec<u8>,
}

fn pack_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Message {
    pub fn new(tag: Tag, session: u32, layer: u16, head: u16, payload: Vec<u8>) -> Self {
        Self {
            tag,
            session,
            layer,
            head,
            payload,
        }
    }

    pub fn query(session: u32, layer: u16, head: u16, q: &[f64]) -> Self {
        Self::new(Tag::Query, session, layer, head, pack_f64(q))
    }

    /// Payload is `a` followed by `gamma` and `m`.
    pub fn partial(session: u32, layer: u16, head: u16, p: &PartialAttention) -> Self {
        let mut payload = pack_f64(&p.a);
        payload.extend(p.gamma.to_le_bytes());
        payload.extend(p.m.to_le_bytes());
        Self::new(Tag::Partial, session, layer, head, payload)
    }

    pub fn token(session: u32, token: u32) -> Self {
        Self::new(Tag::Token, session, 0, 0, token.to_le_bytes().to_vec())
    }

    pub fn final_y(session: u32, logits: &[f64]) -> Self {
        Self::new(Tag::FinalY, session, 0, 0, pack_f64(logits))
    }

    pub fn control(session: u32, op: ControlOp) -> Self {
        let payload = match op {
            ControlOp::Open { prompt_len, streams } => {
                let mut p = vec![OP_OPEN];
                p.extend(prompt_len.to_le_bytes());
                p.extend(streams.to_le_bytes());
                p
            }
            ControlOp::Close => vec![OP_CLOSE],
        };
        Self::new(Tag::Control, session, 0, 0, payload)
    }

    pub fn abort(session: u32, reason: &str) -> Self {
        Self::new(Tag::Abort, session, 0, 0, reason.as_bytes().to_vec())
    }

    pub fn frame_len(&self) -> usize {
        PREFIX_LEN + HEADER_LEN + self.payload.len()
    }

    pub fn scalars(&self) -> Result<Vec<f64>> {
        if !self.payload.len().is_multiple_of(8) {
            return Err(Error::Frame(format!("payload of {} bytes is not f64-aligned", self.payload.len())));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn scalar_count(&self) -> usize {
        match self.tag {
            Tag::Query | Tag::Partial | Tag::FinalY => self.payload.len() / 8,
            _ => 0,
        }
    }

    pub fn as_partial(&self) -> Result<PartialAttention> {
        self.expect_tag(Tag::Partial)?;
        let mut s = self.scalars()?;
        if s.len() < 3 {
            return Err(Error::Frame("partial needs a, gamma and m".into()));
        }
        let m = s.pop().expect("len checked");
        let gamma = s.pop().expect("len checked");
        Ok(PartialAttention { a: s, gamma, m })
    }

    pub fn as_token(&self) -> Result<u32> {
        self.expect_tag(Tag::Token)?;
        let b: [u8; 4] = self
            .payload
            .as_slice()
            .try_into()
            .map_err(|_| Error::Frame("token payload must be 4 bytes".into()))?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn as_control(&self) -> Result<ControlOp> {
        self.expect_tag(Tag::Control)?;
        match self.payload.as_slice() {
            [OP_OPEN, rest @ ..] if rest.len() == 8 => Ok(ControlOp::Open {
                prompt_len: u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")),
                streams: u32::from_le_bytes(rest[4..].try_into().expect("4 bytes")),
            }),
            [OP_CLOSE] => Ok(ControlOp::Close),
            _ => Err(Error::Frame("bad control payload".into())),
        }
    }

    pub fn abort_reason(&self) -> Result<String> {
        self.expect_tag(Tag::Abort)?;
        Ok(String::from_utf8_lossy(&self.payload).into_owned())
    }

    pub fn expect_tag(&self, tag: Tag) -> Result<()> {
        if self.tag != tag {
            return Err(Error::Protocol(format!(
                "expected {} on session {}, got {}",
                tag.name(),
                self.session,
                self.tag.name()
            )));
        }
        Ok(())
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let len = msg.frame_len();
    let mut out = Vec::with_capacity(len);
    out.extend((len as u32).to_le_bytes());
    out.push(msg.tag as u8);
    out.extend(msg.session.to_le_bytes());
    out.extend(msg.layer.to_le_bytes());
    out.extend(msg.head.to_le_bytes());
    out.extend((msg.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&msg.payload);
    out
}

/// Decode exactly one frame; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Message> {
    if bytes.len() < PREFIX_LEN + HEADER_LEN {
        return Err(Error::Frame(format!("truncated frame of {} bytes", bytes.len())));
    }
    let frame_len = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    if frame_len > MAX_FRAME_LEN {
        return Err(Error::Frame(format!("frame length {frame_len} exceeds limit")));
    }
    if frame_len != bytes.len() {
        return Err(Error::Frame(format!(
            "frame says {frame_len} bytes, got {}",
            bytes.len()
        )));
    }
    let tag = Tag::from_byte(bytes[4])?;
    let session = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    let layer = u16::from_le_bytes(bytes[9..11].try_into().expect("2 bytes"));
    let head = u16::from_le_bytes(bytes[11..13].try_into().expect("2 bytes"));
    let payload_len = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
    if PREFIX_LEN + HEADER_LEN + payload_len != frame_len {
        return Err(Error::Frame(format!(
            "payload length {payload_len} disagrees with frame length {frame_len}"
        )));
    }
    Ok(Message {
        tag,
        session,
        layer,
        head,
        payload: bytes[PREFIX_LEN + HEADER_LEN..].to_vec(),
    })
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<usize> {
    let bytes = encode(msg);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Message> {
    let mut prefix = [0u8; PREFIX_LEN];
    r.read_exact(&mut prefix)?;
    let len = u32::from_le_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(Error::Frame(format!("frame length {len} exceeds limit")));
    }
    if len < PREFIX_LEN + HEADER_LEN {
        return Err(Error::Frame(format!("frame length {len} below header size")));
    }
    let mut bytes = vec![0u8; len];
    bytes[..PREFIX_LEN].copy_from_slice(&prefix);
    r.read_exact(&mut bytes[PREFIX_LEN..])?;
    decode(&bytes)
}
