//! Path classification and the one-sided message engine.

mod completion;
mod engine;
pub(crate) mod mesh;
mod topology;
pub mod wire;

pub(crate) use completion::Backoff;
pub use completion::{CompletionHandle, CompletionState};
pub(crate) use engine::{Inbound, LinkSpec, TransportOptions};
pub use engine::{Transport, TransportStats};
pub use topology::{classify_path, Endpoint, PathKind, RankInfo, TopologyMap};
pub use wire::{Header, Opcode, Status, WireMessage};
