//! Fixed 32-byte message header.
//!
//! | bytes  | field                                        |
//! |--------|----------------------------------------------|
//! | 0..4   | magic `LSMG`                                 |
//! | 4      | tag                                          |
//! | 5      | block; bit 7 set for size-only payloads      |
//! | 6, 7   | source role, destination role                |
//! | 8..16  | source index, destination index (u32 LE)     |
//! | 16..20 | iteration (u32 LE)                           |
//! | 20, 21 | stage, lane                                  |
//! | 22..24 | round (u16 LE)                               |
//! | 24..32 | payload bytes, or element count if virtual   |

use super::{Block, Message, NodeId, Payload, PhaseKey, Result, Role, Tag, TransportError, HEADER_BYTES};
use crate::tensor::BYTES_PER_ELEMENT;

pub const MAGIC: [u8; 4] = *b"LSMG";
const VIRTUAL_FLAG: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub src: NodeId,
    pub dst: NodeId,
    pub tag: Tag,
    pub block: Block,
    pub phase: PhaseKey,
    pub is_virtual: bool,
    pub length: u64,
}

fn tag_code(t: Tag) -> u8 {
    Tag::ALL.iter().position(|&x| x == t).unwrap() as u8
}

fn block_code(b: Block) -> u8 {
    match b {
        Block::Conv => 0,
        Block::Fc => 1,
        Block::Other => 2,
    }
}

fn wire_err(s: impl Into<String>) -> TransportError {
    TransportError::Wire(s.into())
}

pub fn header_of(msg: &Message) -> Header {
    let (is_virtual, length) = match &msg.payload {
        Payload::Bytes(b) => (false, b.len() as u64),
        Payload::Virtual => (true, msg.payload_elements),
    };
    Header {
        src: msg.src,
        dst: msg.dst,
        tag: msg.tag,
        block: msg.block,
        phase: msg.phase,
        is_virtual,
        length,
    }
}

pub fn encode_header(h: &Header) -> Result<[u8; HEADER_BYTES]> {
    let iteration = u32::try_from(h.phase.iteration)
        .map_err(|_| wire_err(format!("iteration {} exceeds header range", h.phase.iteration)))?;
    let mut out = [0u8; HEADER_BYTES];
    out[0..4].copy_from_slice(&MAGIC);
    out[4] = tag_code(h.tag);
    out[5] = block_code(h.block) | if h.is_virtual { VIRTUAL_FLAG } else { 0 };
    out[6] = h.src.role.code();
    out[7] = h.dst.role.code();
    out[8..12].copy_from_slice(&h.src.index.to_le_bytes());
    out[12..16].copy_from_slice(&h.dst.index.to_le_bytes());
    out[16..20].copy_from_slice(&iteration.to_le_bytes());
    out[20] = h.phase.stage;
    out[21] = h.phase.lane;
    out[22..24].copy_from_slice(&h.phase.round.to_le_bytes());
    out[24..32].copy_from_slice(&h.length.to_le_bytes());
    Ok(out)
}

pub fn decode_header(b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_BYTES {
        return Err(wire_err(format!("short header: {} bytes", b.len())));
    }
    if b[0..4] != MAGIC {
        return Err(wire_err("bad magic"));
    }
    let tag = *Tag::ALL
        .get(b[4] as usize)
        .ok_or_else(|| wire_err(format!("unknown tag {}", b[4])))?;
    let block = match b[5] & !VIRTUAL_FLAG {
        0 => Block::Conv,
        1 => Block::Fc,
        2 => Block::Other,
        x => return Err(wire_err(format!("unknown block {x}"))),
    };
    let role = |c: u8| Role::from_code(c).ok_or_else(|| wire_err(format!("unknown role {c}")));
    let u32_at = |i: usize| u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]]);
    let mut len = [0u8; 8];
    len.copy_from_slice(&b[24..32]);
    Ok(Header {
        src: NodeId::new(role(b[6])?, u32_at(8)),
        dst: NodeId::new(role(b[7])?, u32_at(12)),
        tag,
        block,
        phase: PhaseKey {
            iteration: u32_at(16) as u64,
            stage: b[20],
            lane: b[21],
            round: u16::from_le_bytes([b[22], b[23]]),
        },
        is_virtual: b[5] & VIRTUAL_FLAG != 0,
        length: u64::from_le_bytes(len),
    })
}

/// Bytes of payload that follow a header on the wire.
pub fn body_len(h: &Header) -> u64 {
    if h.is_virtual {
        0
    } else {
        h.length
    }
}

/// Rebuilds a message from its header and body.
pub fn assemble(h: Header, body: Vec<u8>) -> Result<Message> {
    if body.len() as u64 != body_len(&h) {
        return Err(wire_err(format!("body is {} bytes, header says {}", body.len(), body_len(&h))));
    }
    let (payload, payload_elements) = if h.is_virtual {
        (Payload::Virtual, h.length)
    } else if h.tag.carries_tensor() {
        (Payload::Bytes(body), h.length / BYTES_PER_ELEMENT as u64)
    } else {
        (Payload::Bytes(body), 0)
    };
    let msg = Message {
        src: h.src,
        dst: h.dst,
        tag: h.tag,
        block: h.block,
        phase: h.phase,
        payload,
        payload_elements,
    };
    msg.validate()?;
    Ok(msg)
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let h = header_of(msg);
    let mut out = encode_header(&h)?.to_vec();
    if let Payload::Bytes(b) = &msg.payload {
        out.extend_from_slice(b);
    }
    Ok(out)
}

/// Decodes one message from the front of `buf`; returns it with the bytes consumed.
pub fn decode(buf: &[u8]) -> Result<(Message, usize)> {
    let h = decode_header(buf)?;
    let n = body_len(&h) as usize;
    let end = HEADER_BYTES
        .checked_add(n)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| wire_err("truncated body"))?;
    Ok((assemble(h, buf[HEADER_BYTES..end].to_vec())?, end))
}
