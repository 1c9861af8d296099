//! Communicators over groups and ring collectives between device endpoints.

mod comm;
mod ops;
mod ring;

pub use comm::{Communicator, UniqueId};
pub use ops::{combine_bytes, from_bytes, to_bytes, DType, Element, ReduceOp};
