// Licensed under the Apache-2.0 license

//! On-air frames for the reader/token command subset, the Gen2 CRC-16, and
//! firmware chunking.
//!
//! Layout of an encoded frame (all integers big-endian):
//!
//! ```text
//! tag:u8  [handle:u16 if tag & 0x80]  len:u8  payload[len]  crc:u16
//! ```
//!
//! The CRC covers every byte before it.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Block, MacTag};

pub const MAX_PAYLOAD: usize = u8::MAX as usize;
/// Per-frame SecureComm data limit (the index takes two payload bytes).
pub const MAX_CHUNK_DATA: usize = MAX_PAYLOAD - 2;
pub const DEFAULT_CHUNK_PAYLOAD: usize = 2;

const HANDLE_BIT: u8 = 0x80;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("payload of {len} bytes exceeds the {max}-byte limit")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("crc mismatch: frame carries {carried:#06x}, computed {computed:#06x}")]
    CrcMismatch { carried: u16, computed: u16 },
    #[error("malformed frame: {0}")]
    MalformedFrame(&'static str),
    #[error("chunk plan needs {0} packets, more than a 16-bit index can address")]
    TooManyChunks(usize),
    #[error("chunk payload size must be at least one byte")]
    ZeroPayloadSize,
    #[error("nothing to chunk")]
    EmptyCiphertext,
}

/// RN16 handle assigned at singulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Handle(pub u16);

/// 96-bit token identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub [u8; 12]);

impl TokenId {
    pub fn from_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut id = [0u8; 12];
        hex::decode_to_slice(s, &mut id)?;
        Ok(Self(id))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Convenience constructor used by scenarios: index in the low bytes.
    pub fn from_index(prefix: u32, index: u64) -> Self {
        let mut id = [0u8; 12];
        id[..4].copy_from_slice(&prefix.to_be_bytes());
        id[4..].copy_from_slice(&index.to_be_bytes());
        Self(id)
    }
}

impl fmt::Debug for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TokenId({})", self.to_hex())
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for TokenId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for TokenId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        TokenId::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttestMode {
    Fast,
    Elaborate,
}

/// Byte range of the application region covered by an attestation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub offset: u16,
    pub len: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommandKind {
    Inventory,
    /// `vt_mv` is the last SNIFF reading in millivolts, 0 when none was taken.
    InventoryReply {
        id: TokenId,
        ver: u32,
        vt_mv: u16,
    },
    EnterWisecr,
    /// `t_active_ms == None` means unbounded (continuous execution).
    /// `pilot` assigns the broadcast role.
    Authenticate {
        wrapped_sk: Block,
        s: MacTag,
        nver: u32,
        t_lpm_ms: u16,
        t_active_ms: Option<u16>,
        iv: Block,
        pilot: bool,
    },
    SecureComm {
        index: u16,
        data: Vec<u8>,
    },
    Eob,
    AttestRequest {
        wrapped_sk: Block,
        challenge: Block,
        mode: AttestMode,
        segment: Segment,
    },
    AttestReply {
        r: MacTag,
    },
    /// `crc_error` reports a corrupted command back to the reader.
    Ack {
        crc_error: bool,
    },
}

mod tag {
    pub const INVENTORY: u8 = 0x01;
    pub const INVENTORY_REPLY: u8 = 0x02;
    pub const ENTER_WISECR: u8 = 0x03;
    pub const AUTHENTICATE: u8 = 0x04;
    pub const SECURE_COMM: u8 = 0x05;
    pub const EOB: u8 = 0x06;
    pub const ATTEST_REQUEST: u8 = 0x07;
    pub const ATTEST_REPLY: u8 = 0x08;
    pub const ACK: u8 = 0x09;
    pub const ACK_CRC_ERROR: u8 = 0x0A;
}

/// Unbounded t_active on the wire.
const T_ACTIVE_UNBOUNDED: u16 = u16::MAX;

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Inventory => "Inventory",
            Self::InventoryReply { .. } => "InventoryReply",
            Self::EnterWisecr => "EnterWisecr",
            Self::Authenticate { .. } => "Authenticate",
            Self::SecureComm { .. } => "SecureComm",
            Self::Eob => "Eob",
            Self::AttestRequest { .. } => "AttestRequest",
            Self::AttestReply { .. } => "AttestReply",
            Self::Ack { .. } => "Ack",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Self::Inventory => tag::INVENTORY,
            Self::InventoryReply { .. } => tag::INVENTORY_REPLY,
            Self::EnterWisecr => tag::ENTER_WISECR,
            Self::Authenticate { .. } => tag::AUTHENTICATE,
            Self::SecureComm { .. } => tag::SECURE_COMM,
            Self::Eob => tag::EOB,
            Self::AttestRequest { .. } => tag::ATTEST_REQUEST,
            Self::AttestReply { .. } => tag::ATTEST_REPLY,
            Self::Ack { crc_error: false } => tag::ACK,
            Self::Ack { crc_error: true } => tag::ACK_CRC_ERROR,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            Self::Inventory | Self::EnterWisecr | Self::Eob | Self::Ack { .. } => {}
            Self::InventoryReply { id, ver, vt_mv } => {
                p.extend_from_slice(&id.0);
                p.extend_from_slice(&ver.to_be_bytes());
                p.extend_from_slice(&vt_mv.to_be_bytes());
            }
            Self::Authenticate {
                wrapped_sk,
                s,
                nver,
                t_lpm_ms,
                t_active_ms,
                iv,
                pilot,
            } => {
                p.extend_from_slice(wrapped_sk);
                p.extend_from_slice(&s.0);
                p.extend_from_slice(&nver.to_be_bytes());
                p.extend_from_slice(&t_lpm_ms.to_be_bytes());
                p.extend_from_slice(&t_active_ms.unwrap_or(T_ACTIVE_UNBOUNDED).to_be_bytes());
                p.extend_from_slice(iv);
                p.push(u8::from(*pilot));
            }
            Self::SecureComm { index, data } => {
                p.extend_from_slice(&index.to_be_bytes());
                p.extend_from_slice(data);
            }
            Self::AttestRequest {
                wrapped_sk,
                challenge,
                mode,
                segment,
            } => {
                p.extend_from_slice(wrapped_sk);
                p.extend_from_slice(challenge);
                p.push(match mode {
                    AttestMode::Fast => 0,
                    AttestMode::Elaborate => 1,
                });
                p.extend_from_slice(&segment.offset.to_be_bytes());
                p.extend_from_slice(&segment.len.to_be_bytes());
            }
            Self::AttestReply { r } => p.extend_from_slice(&r.0),
        }
        p
    }

    fn parse(tag: u8, p: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader(p);
        let kind = match tag {
            tag::INVENTORY => Self::Inventory,
            tag::ENTER_WISECR => Self::EnterWisecr,
            tag::EOB => Self::Eob,
            tag::ACK => Self::Ack { crc_error: false },
            tag::ACK_CRC_ERROR => Self::Ack { crc_error: true },
            tag::INVENTORY_REPLY => Self::InventoryReply {
                id: TokenId(r.array()?),
                ver: r.u32()?,
                vt_mv: r.u16()?,
            },
            tag::AUTHENTICATE => Self::Authenticate {
                wrapped_sk: r.array()?,
                s: MacTag(r.array()?),
                nver: r.u32()?,
                t_lpm_ms: r.u16()?,
                t_active_ms: Some(r.u16()?).filter(|&t| t != T_ACTIVE_UNBOUNDED),
                iv: r.array()?,
                pilot: match r.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(WireError::MalformedFrame("bad role flag")),
                },
            },
            tag::SECURE_COMM => {
                let index = r.u16()?;
                let data = std::mem::take(&mut r.0).to_vec();
                if data.is_empty() {
                    return Err(WireError::MalformedFrame("SecureComm without data"));
                }
                Self::SecureComm { index, data }
            }
            tag::ATTEST_REQUEST => Self::AttestRequest {
                wrapped_sk: r.array()?,
                challenge: r.array()?,
                mode: match r.u8()? {
                    0 => AttestMode::Fast,
                    1 => AttestMode::Elaborate,
                    _ => return Err(WireError::MalformedFrame("unknown attestation mode")),
                },
                segment: Segment {
                    offset: r.u16()?,
                    len: r.u16()?,
                },
            },
            tag::ATTEST_REPLY => Self::AttestReply {
                r: MacTag(r.array()?),
            },
            _ => return Err(WireError::MalformedFrame("unknown command tag")),
        };
        if !r.0.is_empty() {
            return Err(WireError::MalformedFrame("trailing payload bytes"));
        }
        Ok(kind)
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], WireError> {
        if self.0.len() < n {
            return Err(WireError::MalformedFrame("payload too short for command"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.array()?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: CommandKind,
    pub handle: Option<Handle>,
}

impl Frame {
    pub fn new(kind: CommandKind, handle: Option<Handle>) -> Self {
        Self { kind, handle }
    }

    pub fn broadcast(kind: CommandKind) -> Self {
        Self { kind, handle: None }
    }

    pub fn to(handle: Handle, kind: CommandKind) -> Self {
        Self {
            kind,
            handle: Some(handle),
        }
    }

    /// CRC over tag, handle and payload.
    pub fn crc(&self) -> u16 {
        let bytes = self.header_and_payload();
        crc16(&bytes)
    }

    fn header_and_payload(&self) -> Vec<u8> {
        let payload = self.kind.payload();
        let mut out = Vec::with_capacity(payload.len() + 6);
        let mut t = self.kind.tag();
        if self.handle.is_some() {
            t |= HANDLE_BIT;
        }
        out.push(t);
        if let Some(h) = self.handle {
            out.extend_from_slice(&h.0.to_be_bytes());
        }
        out.push(payload.len().min(MAX_PAYLOAD) as u8);
        out.extend_from_slice(&payload);
        out
    }

    /// Size of the encoded frame in bits.
    pub fn bit_len(&self) -> usize {
        (self.kind.payload().len() + 4 + if self.handle.is_some() { 2 } else { 0 }) * 8
    }
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>, WireError> {
    if matches!(&frame.kind, CommandKind::SecureComm { data, .. } if data.is_empty()) {
        return Err(WireError::MalformedFrame("SecureComm without data"));
    }
    let payload_len = frame.kind.payload().len();
    if payload_len > MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge {
            len: payload_len,
            max: MAX_PAYLOAD,
        });
    }
    let mut out = frame.header_and_payload();
    let crc = crc16(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
    if bytes.len() < 4 {
        return Err(WireError::MalformedFrame("shorter than the minimal frame"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 2);
    let carried = u16::from_be_bytes([crc_bytes[0], crc_bytes[1]]);
    let computed = crc16(body);
    if carried != computed {
        return Err(WireError::CrcMismatch { carried, computed });
    }
    let t = body[0];
    let (handle, rest) = if t & HANDLE_BIT != 0 {
        if body.len() < 4 {
            return Err(WireError::MalformedFrame("truncated handle"));
        }
        (Some(Handle(u16::from_be_bytes([body[1], body[2]]))), &body[3..])
    } else {
        (None, &body[1..])
    };
    let (&len, payload) = rest
        .split_first()
        .ok_or(WireError::MalformedFrame("missing length"))?;
    if payload.len() != len as usize {
        return Err(WireError::MalformedFrame("length field disagrees with frame size"));
    }
    let kind = CommandKind::parse(t & !HANDLE_BIT, payload)?;
    Ok(Frame { kind, handle })
}

const fn crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = (i as u16) << 8;
        let mut b = 0;
        while b < 8 {
            c = if c & 0x8000 != 0 { (c << 1) ^ 0x1021 } else { c << 1 };
            b += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u16; 256] = crc_table();

/// CRC-16 as used by EPC Gen2: poly 0x1021, init 0xFFFF, output inverted,
/// MSB-first.
pub fn crc16(data: &[u8]) -> u16 {
    !data.iter().fold(0xFFFFu16, |crc, &b| {
        (crc << 8) ^ CRC_TABLE[((crc >> 8) as u8 ^ b) as usize]
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub index: u16,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub payload_size: usize,
    pub packets: Vec<Chunk>,
}

impl ChunkPlan {
    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn reassemble(&self) -> Vec<u8> {
        self.packets.iter().flat_map(|c| c.data.iter().copied()).collect()
    }

    pub fn total_bytes(&self) -> usize {
        self.packets.iter().map(|c| c.data.len()).sum()
    }
}

/// ceil(len / payload_size).
pub const fn packet_count(len: usize, payload_size: usize) -> usize {
    len.div_ceil(payload_size)
}

pub fn chunk_firmware(ciphertext: &[u8], payload_size: usize) -> Result<ChunkPlan, WireError> {
    if payload_size == 0 {
        return Err(WireError::ZeroPayloadSize);
    }
    if ciphertext.is_empty() {
        return Err(WireError::EmptyCiphertext);
    }
    let n = packet_count(ciphertext.len(), payload_size);
    if n > usize::from(u16::MAX) + 1 {
        return Err(WireError::TooManyChunks(n));
    }
    let packets = ciphertext
        .chunks(payload_size)
        .enumerate()
        .map(|(i, c)| Chunk {
            index: i as u16,
            data: c.to_vec(),
        })
        .collect();
    Ok(ChunkPlan {
        payload_size,
        packets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn handle_bit_marks_addressed_frames() {
        let f = Frame::to(Handle(0xBEEF), CommandKind::Eob);
        let bytes = encode(&f).unwrap();
        assert_eq!(bytes[0], tag::EOB | HANDLE_BIT);
        assert_eq!(&bytes[1..3], &[0xBE, 0xEF]);
    }

    #[test]
    fn unbounded_active_time_survives_the_wire() {
        let f = Frame::to(
            Handle(1),
            CommandKind::Authenticate {
                wrapped_sk: [1; 16],
                s: MacTag([2; 16]),
                nver: 3,
                t_lpm_ms: 0,
                t_active_ms: None,
                iv: [4; 16],
                pilot: true,
            },
        );
        assert_eq!(decode(&encode(&f).unwrap()).unwrap(), f);
    }

    #[test]
    fn bit_len_matches_encoding() {
        let f = Frame::to(
            Handle(7),
            CommandKind::SecureComm {
                index: 3,
                data: vec![1, 2],
            },
        );
        assert_eq!(f.bit_len(), encode(&f).unwrap().len() * 8);
        assert_eq!(f.bit_len(), 80);
    }

    #[test]
    fn oversize_payload_rejected() {
        let f = Frame::broadcast(CommandKind::SecureComm {
            index: 0,
            data: vec![0; MAX_PAYLOAD],
        });
        assert!(matches!(encode(&f), Err(WireError::PayloadTooLarge { .. })));
    }
}
