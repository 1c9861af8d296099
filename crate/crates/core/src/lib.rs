//! One-sided PGAS runtime over simulated device endpoints.
//!
//! Every rank owns one registered segment per device. Symmetric allocations
//! sit at the same offset on every rank; asymmetric ones are reached through
//! 32-byte indirection cells. Put and get are one-sided and are classified
//! by topology into intra-device, peer, host-staged and inter-node paths.
//! Groups, barriers, stream pools and ring collectives sit on top.
//!
//! ```no_run
//! use diomp::{run_local, LaunchConfig, TransferKind, LocalBuf};
//!
//! let sums = run_local(LaunchConfig::new(2, 1), |rt| {
//!     let rec = rt.alloc_symmetric(8, 0)?;
//!     let peer = (rt.rank() + 1) % rt.nranks();
//!     let dst = rt.translate(rec.addr, peer)?;
//!     rt.put(dst, LocalBuf::Host(&(rt.rank() as u64).to_le_bytes()), TransferKind::H2D)?;
//!     rt.fence_all()?;
//!     rt.barrier(&rt.world())?;
//!     let got = rt.read_local(rec.addr, 8)?;
//!     Ok(u64::from_le_bytes(got.try_into().unwrap()))
//! })
//! .unwrap();
//! assert_eq!(sums, vec![1, 0]);
//! ```

pub mod apps;
pub mod collectives;
pub mod config;
pub mod error;
pub mod ids;
pub mod memory;
pub mod runtime;
pub mod selftest;
pub mod stream;
pub mod transport;

pub use collectives::{Communicator, DType, ReduceOp, UniqueId};
pub use config::{AllocatorKind, LaunchConfig, SegmentConfig, TransportKind};
pub use error::{Error, Result};
pub use memory::{AllocMode, AllocRecord, GlobalAddress, IndirectionCell, ResolvedPayload};
pub use runtime::{
    run_local, run_local_with, GetDst, Group, LedgerCounts, LocalBuf, PathStats, Runtime,
    TransferKind, WORLD_GROUP_ID,
};
pub use stream::{Stream, StreamEvent, StreamPool};
pub use transport::{CompletionHandle, CompletionState, Endpoint, PathKind};
