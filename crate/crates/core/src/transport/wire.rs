//! Frame format for rank-to-rank traffic.
//!
//! Every frame starts with a fixed 40-byte little-endian header:
//!
//! | bytes  | field    |
//! |--------|----------|
//! | 0..4   | magic `DOMP` |
//! | 4      | version (1) |
//! | 5      | opcode   |
//! | 6..14  | msg_id   |
//! | 14..18 | src_rank |
//! | 18..22 | dst_rank |
//! | 22..24 | device   |
//! | 24..32 | offset   |
//! | 32..40 | length   |
//!
//! `PUT`, `GET_RESP` and `BOOTSTRAP` are followed by `length` payload bytes.
//! `GET_REQ` and `CELL_FETCH` carry the requested length but no payload.
//! Replies (`ACK`, `GET_RESP`) reuse the request's `msg_id` and carry a
//! [`Status`] code in the `offset` field. `BARRIER` and `BOOTSTRAP` carry a
//! mailbox tag in `offset`. A `PUT` addressed to [`STAGING_DEVICE`] is
//! delivered to the target's mailbox under tag `offset` instead of a segment.

use crate::config::MAX_FRAGMENT_BYTES;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DOMP";
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 40;
/// Device id that routes a `PUT` into the target's mailbox.
pub const STAGING_DEVICE: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Put = 1,
    GetReq = 2,
    GetResp = 3,
    CellFetch = 4,
    Barrier = 5,
    Bootstrap = 6,
    Ack = 7,
}

impl Opcode {
    pub const ALL: [Opcode; 7] = [
        Opcode::Put,
        Opcode::GetReq,
        Opcode::GetResp,
        Opcode::CellFetch,
        Opcode::Barrier,
        Opcode::Bootstrap,
        Opcode::Ack,
    ];

    pub fn from_u8(v: u8) -> Result<Self> {
        Opcode::ALL
            .into_iter()
            .find(|op| *op as u8 == v)
            .ok_or(Error::BadOpcode(v))
    }

    pub fn carries_payload(self) -> bool {
        matches!(self, Opcode::Put | Opcode::GetResp | Opcode::Bootstrap)
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }
}

/// Reply status carried in the `offset` field of `ACK` and `GET_RESP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Status {
    Ok = 0,
    InvalidAddress = 1,
    StaleCell = 2,
}

impl Status {
    pub fn from_u64(v: u64) -> Self {
        match v {
            0 => Status::Ok,
            2 => Status::StaleCell,
            _ => Status::InvalidAddress,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub opcode: Opcode,
    pub msg_id: u64,
    pub src_rank: u32,
    pub dst_rank: u32,
    pub device: u16,
    pub offset: u64,
    pub length: u64,
}

impl Header {
    pub fn encode(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = WIRE_VERSION;
        out[5] = self.opcode as u8;
        out[6..14].copy_from_slice(&self.msg_id.to_le_bytes());
        out[14..18].copy_from_slice(&self.src_rank.to_le_bytes());
        out[18..22].copy_from_slice(&self.dst_rank.to_le_bytes());
        out[22..24].copy_from_slice(&self.device.to_le_bytes());
        out[24..32].copy_from_slice(&self.offset.to_le_bytes());
        out[32..40].copy_from_slice(&self.length.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::TruncatedFrame {
                needed: HEADER_BYTES as u64,
                available: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes[4] != WIRE_VERSION {
            return Err(Error::BadVersion(bytes[4]));
        }
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let header = Header {
            opcode: Opcode::from_u8(bytes[5])?,
            msg_id: u64_at(6),
            src_rank: u32_at(14),
            dst_rank: u32_at(18),
            device: u16::from_le_bytes(bytes[22..24].try_into().unwrap()),
            offset: u64_at(24),
            length: u64_at(32),
        };
        if header.length > MAX_FRAGMENT_BYTES {
            return Err(Error::OversizedFrame(header.length));
        }
        Ok(header)
    }

    /// Number of payload bytes that follow this header on the wire.
    pub fn payload_len(&self) -> u64 {
        if self.opcode.carries_payload() {
            self.length
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl WireMessage {
    /// Builds a message; payload-carrying opcodes take `length` from the payload.
    pub fn new(header: Header, payload: Vec<u8>) -> Self {
        let mut header = header;
        if header.opcode.carries_payload() {
            header.length = payload.len() as u64;
        } else {
            debug_assert!(payload.is_empty());
        }
        WireMessage { header, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload.len());
        out.extend_from_slice(&self.header.encode());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = Header::decode(bytes)?;
        let need = HEADER_BYTES as u64 + header.payload_len();
        if (bytes.len() as u64) < need {
            return Err(Error::TruncatedFrame {
                needed: need,
                available: bytes.len() as u64,
            });
        }
        Ok(WireMessage {
            header,
            payload: bytes[HEADER_BYTES..need as usize].to_vec(),
        })
    }

    pub fn wire_len(&self) -> u64 {
        HEADER_BYTES as u64 + self.payload.len() as u64
    }
}
