use std::fmt;

use serde::{Deserialize, Serialize};

/// A byte location inside one device segment of one rank.
///
/// Ordering is lexicographic over `(rank, device, offset)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlobalAddress {
    pub rank: u32,
    pub device: u16,
    pub offset: u64,
}

impl GlobalAddress {
    pub const fn new(rank: u32, device: u16, offset: u64) -> Self {
        GlobalAddress {
            rank,
            device,
            offset,
        }
    }

    pub const fn add(self, bytes: u64) -> Self {
        GlobalAddress {
            offset: self.offset + bytes,
            ..self
        }
    }

    /// Same device and offset on another rank.
    pub const fn on_rank(self, rank: u32) -> Self {
        GlobalAddress { rank, ..self }
    }

    /// Same offset on another endpoint.
    pub const fn on_endpoint(self, rank: u32, device: u16) -> Self {
        GlobalAddress {
            rank,
            device,
            offset: self.offset,
        }
    }
}

impl fmt::Display for GlobalAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}d{}+{:#x}", self.rank, self.device, self.offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AllocMode {
    Symmetric,
    Asymmetric,
}

/// A live allocation as seen by its owning rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocRecord {
    pub addr: GlobalAddress,
    pub size: u64,
    pub mode: AllocMode,
    pub stream_id: Option<u64>,
}

impl AllocRecord {
    pub fn end(&self) -> u64 {
        self.addr.offset + self.size
    }

    pub fn contains(&self, offset: u64, len: u64) -> bool {
        offset >= self.addr.offset && offset.checked_add(len).is_some_and(|end| end <= self.end())
    }
}
