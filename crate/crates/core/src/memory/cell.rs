use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;

use super::GlobalAddress;
use crate::error::{Error, Result};

/// Size of an indirection cell in bytes.
pub const CELL_BYTES: u64 = 32;

/// Decoded contents of an indirection cell.
///
/// Wire layout, little-endian: payload offset, payload size, generation,
/// then eight reserved bytes that are always zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellContents {
    pub payload_offset: u64,
    pub payload_size: u64,
    pub generation: u64,
}

impl CellContents {
    pub fn encode(&self) -> [u8; CELL_BYTES as usize] {
        let mut out = [0u8; CELL_BYTES as usize];
        out[0..8].copy_from_slice(&self.payload_offset.to_le_bytes());
        out[8..16].copy_from_slice(&self.payload_size.to_le_bytes());
        out[16..24].copy_from_slice(&self.generation.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CELL_BYTES as usize {
            return Err(Error::TruncatedFrame {
                needed: CELL_BYTES,
                available: bytes.len() as u64,
            });
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        Ok(CellContents {
            payload_offset: word(0),
            payload_size: word(8),
            generation: word(16),
        })
    }
}

/// Handle to a collectively allocated indirection cell.
///
/// `cell` is the caller's own copy; the same offset addresses the cell on
/// every rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IndirectionCell {
    pub cell: GlobalAddress,
}

impl IndirectionCell {
    pub fn device(&self) -> u16 {
        self.cell.device
    }

    pub fn offset(&self) -> u64 {
        self.cell.offset
    }
}

/// Where a cell pointed when it was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedPayload {
    pub addr: GlobalAddress,
    pub size: u64,
    pub generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CachedCell {
    pub payload: ResolvedPayload,
}

type CacheKey = (u16, u64, u32);

/// Remote-cell cache keyed by `(device, cell offset, target rank)`.
///
/// Entries are dropped whenever the cell is freed or rebound, which every
/// rank does as part of the collective free/rebind; a lookup therefore never
/// returns an address from an older generation.
#[derive(Debug, Default)]
pub struct CellCache {
    entries: RwLock<HashMap<CacheKey, CachedCell>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CellCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, cell: &IndirectionCell, target: u32) -> Option<ResolvedPayload> {
        let found = self
            .entries
            .read()
            .get(&(cell.device(), cell.offset(), target))
            .map(|c| c.payload);
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn insert(&self, cell: &IndirectionCell, target: u32, payload: ResolvedPayload) {
        self.entries.write().insert(
            (cell.device(), cell.offset(), target),
            CachedCell { payload },
        );
    }

    /// Drops the entries of one cell for every target rank.
    pub fn invalidate(&self, device: u16, cell_offset: u64) -> usize {
        let mut map = self.entries.write();
        let before = map.len();
        map.retain(|&(d, off, _), _| !(d == device && off == cell_offset));
        before - map.len()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}
