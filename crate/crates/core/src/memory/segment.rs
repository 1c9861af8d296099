use std::alloc::{alloc_zeroed, Layout};
use std::collections::BTreeMap;
use std::ptr;

use parking_lot::{Mutex, RwLock};

use super::allocator::{Allocator, Block, Direction};
use super::{AllocMode, AllocRecord, GlobalAddress, CELL_BYTES};
use crate::config::SegmentConfig;
use crate::error::{Error, Result};

/// Split of a segment into the upward-growing symmetric region and the
/// downward-growing asymmetric payload region (top quarter).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLayout {
    pub symmetric: (u64, u64),
    pub asymmetric: (u64, u64),
}

impl SegmentLayout {
    pub fn for_size(bytes: u64) -> Self {
        let split = bytes - bytes / 4;
        SegmentLayout {
            symmetric: (0, split),
            asymmetric: (split, bytes),
        }
    }
}

/// What a live allocation is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordRole {
    Data,
    /// A 32-byte indirection cell.
    Cell,
    /// The asymmetric payload behind a cell.
    Payload,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    record: AllocRecord,
    block: Block,
    role: RecordRole,
}

#[derive(Debug)]
struct SegmentState {
    symmetric: Allocator,
    asymmetric: Allocator,
    entries: BTreeMap<u64, Entry>,
    next_generation: u64,
}

/// One device's registered arena plus its live-range index.
///
/// Every read or write is checked against the index, so RMA to a freed
/// range fails with `InvalidAddress` instead of touching recycled memory.
#[derive(Debug)]
pub struct Segment {
    rank: u32,
    device: u16,
    config: SegmentConfig,
    layout: SegmentLayout,
    data: RwLock<Box<[u8]>>,
    state: Mutex<SegmentState>,
}

fn zeroed_arena(bytes: u64) -> Result<Box<[u8]>> {
    let failure = || Error::AllocationFailure { bytes };
    let len = usize::try_from(bytes).map_err(|_| failure())?;
    let layout = Layout::array::<u8>(len).map_err(|_| failure())?;
    if len == 0 {
        return Err(failure());
    }
    // SAFETY: layout has non-zero size; a null return is handled below.
    let raw = unsafe { alloc_zeroed(layout) };
    if raw.is_null() {
        return Err(failure());
    }
    // SAFETY: `raw` was allocated by the global allocator with the layout of
    // a `[u8]` of length `len`, which is exactly what `Box<[u8]>` frees.
    Ok(unsafe { Box::from_raw(ptr::slice_from_raw_parts_mut(raw, len)) })
}

impl Segment {
    pub fn create(rank: u32, device: u16, config: &SegmentConfig) -> Result<Self> {
        config.validate()?;
        let layout = SegmentLayout::for_size(config.segment_bytes);
        let data = zeroed_arena(config.segment_bytes)?;
        let (sym_lo, sym_hi) = layout.symmetric;
        let (asym_lo, asym_hi) = layout.asymmetric;
        // Cells must stay 32-byte aligned whatever the configured alignment.
        let align = config.alignment.max(CELL_BYTES);
        Ok(Segment {
            rank,
            device,
            config: config.clone(),
            layout,
            data: RwLock::new(data),
            state: Mutex::new(SegmentState {
                symmetric: Allocator::new(
                    config.allocator,
                    sym_lo,
                    sym_hi,
                    align,
                    Direction::Upward,
                ),
                asymmetric: Allocator::new(
                    config.allocator,
                    asym_lo,
                    asym_hi,
                    align,
                    Direction::Downward,
                ),
                entries: BTreeMap::new(),
                next_generation: 1,
            }),
        })
    }

    pub fn device(&self) -> u16 {
        self.device
    }

    pub fn len(&self) -> u64 {
        self.config.segment_bytes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn layout(&self) -> SegmentLayout {
        self.layout
    }

    fn addr(&self, offset: u64) -> GlobalAddress {
        GlobalAddress::new(self.rank, self.device, offset)
    }

    /// Places `size` bytes in the region that matches `mode`.
    pub fn allocate(
        &self,
        size: u64,
        mode: AllocMode,
        role: RecordRole,
        stream_id: Option<u64>,
    ) -> Result<AllocRecord> {
        let mut state = self.state.lock();
        let allocator = match mode {
            AllocMode::Symmetric => &mut state.symmetric,
            AllocMode::Asymmetric => &mut state.asymmetric,
        };
        let block = allocator.allocate(size).ok_or(Error::OutOfSegment {
            device: self.device,
            requested: size,
        })?;
        let mut offset = block.offset;
        if self.config.inject_overlap {
            if let Some((&prev, _)) = state.entries.range(..block.offset).next_back() {
                offset = prev + (block.offset - prev) / 2;
            }
        }
        let record = AllocRecord {
            addr: self.addr(offset),
            size,
            mode,
            stream_id,
        };
        state.entries.insert(
            offset,
            Entry {
                record,
                block,
                role,
            },
        );
        Ok(record)
    }

    /// Releases the allocation that starts at `offset`.
    pub fn release(&self, offset: u64) -> Result<(AllocRecord, RecordRole)> {
        let mut state = self.state.lock();
        let entry = state.entries.remove(&offset).ok_or(Error::DoubleFree {
            device: self.device,
            offset,
        })?;
        let allocator = match entry.record.mode {
            AllocMode::Symmetric => &mut state.symmetric,
            AllocMode::Asymmetric => &mut state.asymmetric,
        };
        allocator.release(entry.block.offset);
        Ok((entry.record, entry.role))
    }

    /// The allocation starting exactly at `offset`.
    pub fn record_at(&self, offset: u64) -> Option<(AllocRecord, RecordRole)> {
        self.state
            .lock()
            .entries
            .get(&offset)
            .map(|e| (e.record, e.role))
    }

    /// The live allocation containing `[offset, offset + len)`.
    pub fn find(&self, offset: u64, len: u64) -> Option<(AllocRecord, RecordRole)> {
        let state = self.state.lock();
        let (_, entry) = state.entries.range(..=offset).next_back()?;
        entry
            .record
            .contains(offset, len.max(1))
            .then_some((entry.record, entry.role))
    }

    pub fn check_range(&self, offset: u64, len: u64) -> Result<AllocRecord> {
        self.find(offset, len)
            .map(|(r, _)| r)
            .ok_or(Error::InvalidAddress {
                addr: self.addr(offset),
                len,
            })
    }

    pub fn read(&self, offset: u64, out: &mut [u8]) -> Result<()> {
        if out.is_empty() {
            return Ok(());
        }
        self.check_range(offset, out.len() as u64)?;
        let data = self.data.read();
        let start = offset as usize;
        out.copy_from_slice(&data[start..start + out.len()]);
        Ok(())
    }

    pub fn read_vec(&self, offset: u64, len: u64) -> Result<Vec<u8>> {
        let mut out = vec![0u8; len as usize];
        self.read(offset, &mut out)?;
        Ok(out)
    }

    pub fn write(&self, offset: u64, bytes: &[u8]) -> Result<()> {
        if bytes.is_empty() {
            return Ok(());
        }
        self.check_range(offset, bytes.len() as u64)?;
        let mut data = self.data.write();
        let start = offset as usize;
        data[start..start + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Copies between two ranges of this segment under one lock.
    pub fn copy_within(&self, src: u64, dst: u64, len: u64) -> Result<()> {
        if len == 0 {
            return Ok(());
        }
        self.check_range(src, len)?;
        self.check_range(dst, len)?;
        let mut data = self.data.write();
        data.copy_within(src as usize..(src + len) as usize, dst as usize);
        Ok(())
    }

    /// Runs `f` over a validated read-only view.
    pub fn with_slice<R>(&self, offset: u64, len: u64, f: impl FnOnce(&[u8]) -> R) -> Result<R> {
        if len > 0 {
            self.check_range(offset, len)?;
        }
        let data = self.data.read();
        Ok(f(&data[offset as usize..(offset + len) as usize]))
    }

    /// Runs `f` over a validated mutable view.
    pub fn with_slice_mut<R>(
        &self,
        offset: u64,
        len: u64,
        f: impl FnOnce(&mut [u8]) -> R,
    ) -> Result<R> {
        if len > 0 {
            self.check_range(offset, len)?;
        }
        let mut data = self.data.write();
        Ok(f(&mut data[offset as usize..(offset + len) as usize]))
    }

    /// Fresh, never-reused generation number for a cell on this device.
    pub fn next_generation(&self) -> u64 {
        let mut state = self.state.lock();
        let g = state.next_generation;
        state.next_generation += 1;
        g
    }

    /// Live records in offset order.
    pub fn records(&self) -> Vec<AllocRecord> {
        self.state
            .lock()
            .entries
            .values()
            .map(|e| e.record)
            .collect()
    }
}

/// The segments of every device bound to one rank.
#[derive(Debug)]
pub struct LocalMemory {
    rank: u32,
    segments: Vec<Segment>,
}

impl LocalMemory {
    pub fn create(rank: u32, devices: u16, config: &SegmentConfig) -> Result<Self> {
        let segments = (0..devices)
            .map(|d| Segment::create(rank, d, config))
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalMemory { rank, segments })
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn devices(&self) -> u16 {
        self.segments.len() as u16
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, device: u16) -> Result<&Segment> {
        self.segments
            .get(device as usize)
            .ok_or(Error::UnknownEndpoint {
                rank: self.rank,
                device,
            })
    }

    fn local(&self, addr: GlobalAddress, len: u64) -> Result<&Segment> {
        if addr.rank != self.rank {
            return Err(Error::InvalidAddress { addr, len });
        }
        self.segment(addr.device)
    }

    pub fn read(&self, addr: GlobalAddress, out: &mut [u8]) -> Result<()> {
        self.local(addr, out.len() as u64)?.read(addr.offset, out)
    }

    pub fn read_vec(&self, addr: GlobalAddress, len: u64) -> Result<Vec<u8>> {
        self.local(addr, len)?.read_vec(addr.offset, len)
    }

    pub fn write(&self, addr: GlobalAddress, bytes: &[u8]) -> Result<()> {
        self.local(addr, bytes.len() as u64)?
            .write(addr.offset, bytes)
    }

    /// Device-to-device copy inside this rank.
    pub fn copy(&self, src: GlobalAddress, dst: GlobalAddress, len: u64) -> Result<()> {
        if src.device == dst.device {
            return self
                .local(src, len)?
                .copy_within(src.offset, dst.offset, len);
        }
        let from = self.local(src, len)?;
        let to = self.local(dst, len)?;
        to.check_range(dst.offset, len)?;
        from.with_slice(src.offset, len, |bytes| to.write(dst.offset, bytes))?
    }

    pub fn check(&self, addr: GlobalAddress, len: u64) -> Result<AllocRecord> {
        self.local(addr, len)?.check_range(addr.offset, len)
    }
}
