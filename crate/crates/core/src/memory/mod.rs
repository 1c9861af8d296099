//! Per-device global segments, their allocators, and the indirection cells
//! that make asymmetric allocations remotely addressable.

mod address;
mod allocator;
mod cell;
mod segment;

pub use address::{AllocMode, AllocRecord, GlobalAddress};
pub use allocator::{
    Allocator, Block, BuddyAllocator, Direction, LinearAllocator, BUDDY_MIN_BLOCK,
};
pub use cell::{CachedCell, CellCache, CellContents, IndirectionCell, ResolvedPayload, CELL_BYTES};
pub use segment::{LocalMemory, RecordRole, Segment, SegmentLayout};
