//! Federation messages.
//!
//! Frame: `payload length u32 | kind u8 | payload`. The length counts the
//! payload only, not the kind byte.
//!
//! | kind | message  | payload |
//! |------|----------|---------|
//! | 1    | REGISTER | tag length u32, tag UTF-8, class count u64, class ids u64 (ascending) |
//! | 2    | SETTINGS | round u64, γ f64, l_e u64, known map, new-class map |
//! | 3    | UPLOAD   | round u64, Ŵ block, W̌ block, R block |
//! | 4    | ACK      | status u8 |
//!
//! An encoder map is `count u64` followed by `(class u64, column u64)` pairs
//! sorted by class id.

use std::collections::BTreeSet;

use super::block::{encode_block, read_matrix};
use super::{ByteReader, ProtocolError};
use crate::client::LocalUpdate;
use crate::registry::{ClassId, EncoderMap, SplitResult};

/// Largest payload a decoder accepts.
pub const MAX_PAYLOAD: usize = 1 << 30;

/// Bytes of an UPLOAD frame that are not matrix entries: length prefix,
/// kind, round and three block headers.
pub const UPLOAD_FRAMING_BYTES: usize = 4 + 1 + 8 + 3 * 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Register = 1,
    Settings = 2,
    Upload = 3,
    Ack = 4,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Result<Self, ProtocolError> {
        match b {
            1 => Ok(Self::Register),
            2 => Ok(Self::Settings),
            3 => Ok(Self::Upload),
            4 => Ok(Self::Ack),
            other => Err(ProtocolError::UnknownKind(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Register => "REGISTER",
            Self::Settings => "SETTINGS",
            Self::Upload => "UPLOAD",
            Self::Ack => "ACK",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AckStatus {
    Accepted = 0,
    /// Already received for this round; nothing was changed.
    Duplicate = 1,
    /// Shapes or round did not match the registration.
    Rejected = 2,
    /// The server could not fold the upload in (e.g. singular Gram sum).
    NumericalFailure = 3,
}

impl AckStatus {
    fn from_byte(b: u8) -> Result<Self, ProtocolError> {
        match b {
            0 => Ok(Self::Accepted),
            1 => Ok(Self::Duplicate),
            2 => Ok(Self::Rejected),
            3 => Ok(Self::NumericalFailure),
            other => Err(ProtocolError::Malformed(format!("unknown ack status {other}"))),
        }
    }

    pub fn is_success(self) -> bool {
        matches!(self, Self::Accepted | Self::Duplicate)
    }
}

/// What the server tells a registering client.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub round: u64,
    pub gamma: f64,
    pub embedding_width: u64,
    pub known: EncoderMap,
    pub unknown: EncoderMap,
}

impl Settings {
    pub fn from_split(split: &SplitResult, gamma: f64, embedding_width: usize) -> Self {
        Self {
            round: split.round,
            gamma,
            embedding_width: embedding_width as u64,
            known: split.known_encoder.clone(),
            unknown: split.unknown_encoder.clone(),
        }
    }

    /// Rebuilds the split on the client side. `declared` is the client's
    /// own class set.
    pub fn to_split(&self, declared: &BTreeSet<ClassId>) -> SplitResult {
        SplitResult {
            round: self.round,
            known: declared.iter().copied().filter(|c| self.known.contains(*c)).collect(),
            unknown: self.unknown.classes().to_vec(),
            known_encoder: self.known.clone(),
            unknown_encoder: self.unknown.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register { tag: String, classes: BTreeSet<ClassId> },
    Settings(Settings),
    /// The update's `round_hint` is the round field on the wire.
    Upload(LocalUpdate),
    Ack(AckStatus),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::Register { .. } => MessageKind::Register,
            Message::Settings(_) => MessageKind::Settings,
            Message::Upload(_) => MessageKind::Upload,
            Message::Ack(_) => MessageKind::Ack,
        }
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_map(out: &mut Vec<u8>, map: &EncoderMap) {
    put_u64(out, map.width() as u64);
    for (c, col) in map.sorted_pairs() {
        put_u64(out, c.0);
        put_u64(out, col as u64);
    }
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Register { tag, classes } => {
            out.extend_from_slice(&(tag.len() as u32).to_le_bytes());
            out.extend_from_slice(tag.as_bytes());
            put_u64(&mut out, classes.len() as u64);
            for c in classes {
                put_u64(&mut out, c.0);
            }
        }
        Message::Settings(s) => {
            put_u64(&mut out, s.round);
            out.extend_from_slice(&s.gamma.to_le_bytes());
            put_u64(&mut out, s.embedding_width);
            put_map(&mut out, &s.known);
            put_map(&mut out, &s.unknown);
        }
        Message::Upload(u) => {
            put_u64(&mut out, u.round_hint);
            encode_block(&u.w_known, &mut out);
            encode_block(&u.w_unknown, &mut out);
            encode_block(&u.gram, &mut out);
        }
        Message::Ack(status) => out.push(*status as u8),
    }
    out
}

/// One complete frame.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    let mut out = Vec::with_capacity(5 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.push(msg.kind() as u8);
    out.extend_from_slice(&payload);
    out
}

/// Decodes exactly one frame. Total over arbitrary input: every failure is
/// an error value.
pub fn decode_message(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let mut r = ByteReader::new(bytes);
    let declared = r.u32()? as usize;
    let kind = r.u8()?;
    if declared > MAX_PAYLOAD {
        return Err(ProtocolError::TooLarge(declared));
    }
    if r.remaining() != declared {
        return Err(ProtocolError::LengthMismatch { declared, actual: r.remaining() });
    }
    let kind = MessageKind::from_byte(kind)?;
    decode_payload(kind, &bytes[5..])
}

/// Parses a payload whose kind byte has already been read.
pub(crate) fn decode_payload(kind: MessageKind, payload: &[u8]) -> Result<Message, ProtocolError> {
    let mut r = ByteReader::new(payload);
    let msg = match kind {
        MessageKind::Register => {
            let len = r.u32()? as usize;
            let tag = std::str::from_utf8(r.take(len)?)
                .map_err(|e| ProtocolError::Malformed(format!("client tag is not UTF-8: {e}")))?
                .to_string();
            let n = r.count(8)?;
            let mut classes = BTreeSet::new();
            let mut prev = None;
            for _ in 0..n {
                let c = r.u64()?;
                if prev.is_some_and(|p| p >= c) {
                    return Err(ProtocolError::Malformed("class ids must be strictly ascending".into()));
                }
                prev = Some(c);
                classes.insert(ClassId(c));
            }
            Message::Register { tag, classes }
        }
        MessageKind::Settings => {
            let round = r.u64()?;
            let gamma = r.f64()?;
            if !(gamma.is_finite() && gamma >= 0.0) {
                return Err(ProtocolError::Malformed(format!("invalid regularization {gamma}")));
            }
            let embedding_width = r.u64()?;
            let known = read_map(&mut r)?;
            let unknown = read_map(&mut r)?;
            Message::Settings(Settings { round, gamma, embedding_width, known, unknown })
        }
        MessageKind::Upload => {
            let round = r.u64()?;
            let w_known = read_matrix(&mut r)?;
            let w_unknown = read_matrix(&mut r)?;
            let gram = read_matrix(&mut r)?;
            Message::Upload(LocalUpdate { w_known, w_unknown, gram, round_hint: round })
        }
        MessageKind::Ack => Message::Ack(AckStatus::from_byte(r.u8()?)?),
    };
    r.finish()?;
    Ok(msg)
}

fn read_map(r: &mut ByteReader<'_>) -> Result<EncoderMap, ProtocolError> {
    let n = r.count(16)?;
    let mut pairs = Vec::with_capacity(n);
    let mut prev = None;
    for _ in 0..n {
        let c = r.u64()?;
        let col = r.u64()?;
        if prev.is_some_and(|p| p >= c) {
            return Err(ProtocolError::Malformed("encoder map must be sorted by class id".into()));
        }
        prev = Some(c);
        let col = usize::try_from(col).map_err(|_| ProtocolError::Malformed(format!("column {col}")))?;
        pairs.push((ClassId(c), col));
    }
    EncoderMap::from_pairs(&pairs).map_err(|e| ProtocolError::Malformed(e.to_string()))
}
