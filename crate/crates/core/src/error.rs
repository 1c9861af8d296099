use std::io;

use thiserror::Error;

use crate::memory::GlobalAddress;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the runtime can surface.
///
/// Errors are cloneable so a single transport failure can be fanned out to
/// every pending operation it affects.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("cannot reserve a {bytes}-byte device segment")]
    AllocationFailure { bytes: u64 },
    #[error("configuration mismatch across ranks: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("segment exhausted on device {device}: cannot place {requested} bytes")]
    OutOfSegment { device: u16, requested: u64 },
    #[error("collective mismatch: {0}")]
    CollectiveMismatch(String),
    #[error("double free of offset {offset:#x} on device {device}")]
    DoubleFree { device: u16, offset: u64 },
    #[error("invalid address {addr} (+{len} bytes)")]
    InvalidAddress { addr: GlobalAddress, len: u64 },
    #[error("{0} does not belong to a symmetric allocation")]
    NotSymmetric(GlobalAddress),
    #[error("indirection cell {0} is stale")]
    StaleCell(GlobalAddress),
    #[error("indirection cell {0} references an empty payload")]
    NullPayload(GlobalAddress),
    #[error("unknown endpoint r{rank}d{device}")]
    UnknownEndpoint { rank: u32, device: u16 },
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("transfer kind mismatch: {0}")]
    KindMismatch(String),
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("unknown opcode {0}")]
    BadOpcode(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    TruncatedFrame { needed: u64, available: u64 },
    #[error("frame payload of {0} bytes exceeds the fragment limit")]
    OversizedFrame(u64),
    #[error("handshake timed out: {0}")]
    HandshakeTimeout(String),
    #[error("stream {0} is not active for this lease")]
    StreamClosed(u64),
    #[error(
        "allocation {addr} is bound to stream {bound}, transfer submitted on stream {submitted}"
    )]
    StreamMismatch {
        addr: GlobalAddress,
        bound: u64,
        submitted: u64,
    },
    #[error("group {0:#x} is not live")]
    StaleGroup(u64),
    #[error("rank {rank} does not own an endpoint of group {group:#x}")]
    NotMember { rank: u32, group: u64 },
    #[error("peer failure: {0}")]
    PeerFailure(String),
    #[error("root {root} out of range for communicator of size {size}")]
    RootOutOfRange { root: usize, size: usize },
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("decomposition error: {0}")]
    DecompositionError(String),
    #[error("a runtime handle is already live in this process")]
    AlreadyInitialized,
    #[error("runtime has been finalized")]
    Finalized,
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Io(format!("malformed control payload: {err}"))
    }
}
