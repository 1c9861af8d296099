use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::config::AllocatorKind;

/// Smallest block the buddy allocator hands out.
pub const BUDDY_MIN_BLOCK: u64 = 256;

/// Which end of its region an allocator fills first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Upward,
    Downward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: u64,
    pub len: u64,
}

/// Allocator for one region `[base, limit)` of a segment.
///
/// Both strategies are deterministic: the same request sequence always
/// yields the same offsets, which is what keeps symmetric allocations
/// aligned across ranks.
#[derive(Debug, Clone)]
pub enum Allocator {
    Linear(LinearAllocator),
    Buddy(BuddyAllocator),
}

impl Allocator {
    pub fn new(kind: AllocatorKind, base: u64, limit: u64, alignment: u64, dir: Direction) -> Self {
        match kind {
            AllocatorKind::Linear => {
                Allocator::Linear(LinearAllocator::new(base, limit, alignment, dir))
            }
            AllocatorKind::Buddy => {
                Allocator::Buddy(BuddyAllocator::new(base, limit, alignment, dir))
            }
        }
    }

    pub fn allocate(&mut self, size: u64) -> Option<Block> {
        match self {
            Allocator::Linear(a) => a.allocate(size),
            Allocator::Buddy(a) => a.allocate(size),
        }
    }

    /// Returns the released block, or `None` if `offset` is not live.
    pub fn release(&mut self, offset: u64) -> Option<Block> {
        match self {
            Allocator::Linear(a) => a.release(offset),
            Allocator::Buddy(a) => a.release(offset),
        }
    }

    /// Size of the block a request of `size` bytes occupies.
    pub fn rounded_size(&self, size: u64) -> u64 {
        match self {
            Allocator::Linear(a) => a.rounded_size(size),
            Allocator::Buddy(a) => a.rounded_size(size),
        }
    }

    pub fn live_blocks(&self) -> Vec<Block> {
        match self {
            Allocator::Linear(a) => a
                .live
                .iter()
                .map(|(&offset, &len)| Block { offset, len })
                .collect(),
            Allocator::Buddy(a) => {
                let mut blocks: Vec<Block> = a
                    .live
                    .iter()
                    .map(|(&offset, &order)| Block {
                        offset,
                        len: a.order_size(order),
                    })
                    .collect();
                blocks.sort_by_key(|b| b.offset);
                blocks
            }
        }
    }
}

/// Bump allocator with an exact-size free list.
///
/// Freed blocks adjacent to the bump cursor give their space back to the
/// cursor; everything else waits in the free list for a request of exactly
/// the same rounded size.
#[derive(Debug, Clone)]
pub struct LinearAllocator {
    base: u64,
    limit: u64,
    align: u64,
    dir: Direction,
    cursor: u64,
    free_by_len: BTreeMap<u64, BTreeSet<u64>>,
    free_by_offset: BTreeMap<u64, u64>,
    live: BTreeMap<u64, u64>,
}

impl LinearAllocator {
    pub fn new(base: u64, limit: u64, align: u64, dir: Direction) -> Self {
        debug_assert!(base.is_multiple_of(align) && limit.is_multiple_of(align) && base <= limit);
        LinearAllocator {
            base,
            limit,
            align,
            dir,
            cursor: match dir {
                Direction::Upward => base,
                Direction::Downward => limit,
            },
            free_by_len: BTreeMap::new(),
            free_by_offset: BTreeMap::new(),
            live: BTreeMap::new(),
        }
    }

    pub fn rounded_size(&self, size: u64) -> u64 {
        size.max(1).div_ceil(self.align) * self.align
    }

    pub fn allocate(&mut self, size: u64) -> Option<Block> {
        let len = self.rounded_size(size);
        if let Some(offset) = self.take_free(len) {
            self.live.insert(offset, len);
            return Some(Block { offset, len });
        }
        let offset = match self.dir {
            Direction::Upward => {
                let end = self.cursor.checked_add(len)?;
                if end > self.limit {
                    return None;
                }
                let offset = self.cursor;
                self.cursor = end;
                offset
            }
            Direction::Downward => {
                let start = self.cursor.checked_sub(len)?;
                if start < self.base {
                    return None;
                }
                self.cursor = start;
                start
            }
        };
        self.live.insert(offset, len);
        Some(Block { offset, len })
    }

    fn take_free(&mut self, len: u64) -> Option<u64> {
        let set = self.free_by_len.get_mut(&len)?;
        let offset = match self.dir {
            Direction::Upward => set.pop_first()?,
            Direction::Downward => set.pop_last()?,
        };
        if set.is_empty() {
            self.free_by_len.remove(&len);
        }
        self.free_by_offset.remove(&offset);
        Some(offset)
    }

    fn remove_free(&mut self, offset: u64, len: u64) {
        self.free_by_offset.remove(&offset);
        if let Some(set) = self.free_by_len.get_mut(&len) {
            set.remove(&offset);
            if set.is_empty() {
                self.free_by_len.remove(&len);
            }
        }
    }

    pub fn release(&mut self, offset: u64) -> Option<Block> {
        let len = self.live.remove(&offset)?;
        match self.dir {
            Direction::Upward if offset + len == self.cursor => {
                self.cursor = offset;
                while let Some((&prev, &prev_len)) =
                    self.free_by_offset.range(..self.cursor).next_back()
                {
                    if prev + prev_len != self.cursor {
                        break;
                    }
                    self.remove_free(prev, prev_len);
                    self.cursor = prev;
                }
            }
            Direction::Downward if offset == self.cursor => {
                self.cursor = offset + len;
                while let Some(&next_len) = self.free_by_offset.get(&self.cursor) {
                    let next = self.cursor;
                    self.remove_free(next, next_len);
                    self.cursor = next + next_len;
                }
            }
            _ => {
                self.free_by_offset.insert(offset, len);
                self.free_by_len.entry(len).or_default().insert(offset);
            }
        }
        Some(Block { offset, len })
    }
}

/// Binary buddy allocator over a region that need not be a power of two.
///
/// The region is carved into maximal naturally aligned power-of-two blocks;
/// buddies are computed on absolute offsets, so blocks never coalesce
/// across the region boundary.
#[derive(Debug, Clone)]
pub struct BuddyAllocator {
    min_block: u64,
    align: u64,
    dir: Direction,
    max_order: u32,
    free: Vec<BTreeSet<u64>>,
    live: HashMap<u64, u32>,
}

impl BuddyAllocator {
    pub fn new(base: u64, limit: u64, align: u64, dir: Direction) -> Self {
        let min_block = BUDDY_MIN_BLOCK;
        debug_assert!(base.is_multiple_of(min_block) && base <= limit);
        let span = (limit - base) / min_block;
        let max_order = if span == 0 {
            0
        } else {
            63 - span.leading_zeros()
        };
        let mut free = vec![BTreeSet::new(); max_order as usize + 1];
        let mut cur = base;
        while cur + min_block <= limit {
            let align_order = if cur == 0 {
                max_order
            } else {
                (cur.trailing_zeros() - min_block.trailing_zeros()).min(max_order)
            };
            let remaining = (limit - cur) / min_block;
            let fit_order = 63 - remaining.leading_zeros();
            let order = align_order.min(fit_order);
            free[order as usize].insert(cur);
            cur += min_block << order;
        }
        BuddyAllocator {
            min_block,
            align,
            dir,
            max_order,
            free,
            live: HashMap::new(),
        }
    }

    fn order_size(&self, order: u32) -> u64 {
        self.min_block << order
    }

    fn order_for(&self, size: u64) -> u32 {
        let block = size.max(self.min_block).max(self.align).next_power_of_two();
        (block / self.min_block).trailing_zeros()
    }

    pub fn rounded_size(&self, size: u64) -> u64 {
        self.order_size(self.order_for(size))
    }

    pub fn allocate(&mut self, size: u64) -> Option<Block> {
        let want = self.order_for(size);
        if want > self.max_order {
            return None;
        }
        let mut order = (want..=self.max_order).find(|&o| !self.free[o as usize].is_empty())?;
        let set = &mut self.free[order as usize];
        let mut offset = match self.dir {
            Direction::Upward => set.pop_first()?,
            Direction::Downward => set.pop_last()?,
        };
        while order > want {
            order -= 1;
            let half = self.order_size(order);
            match self.dir {
                Direction::Upward => {
                    self.free[order as usize].insert(offset + half);
                }
                Direction::Downward => {
                    self.free[order as usize].insert(offset);
                    offset += half;
                }
            }
        }
        self.live.insert(offset, want);
        Some(Block {
            offset,
            len: self.order_size(want),
        })
    }

    pub fn release(&mut self, offset: u64) -> Option<Block> {
        let order = self.live.remove(&offset)?;
        let len = self.order_size(order);
        let mut merged = offset;
        let mut o = order;
        while o < self.max_order {
            let buddy = merged ^ self.order_size(o);
            if !self.free[o as usize].remove(&buddy) {
                break;
            }
            merged = merged.min(buddy);
            o += 1;
        }
        self.free[o as usize].insert(merged);
        Some(Block { offset, len })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KIB: u64 = 1024;

    fn buddy(limit: u64) -> BuddyAllocator {
        BuddyAllocator::new(0, limit, 64, Direction::Upward)
    }

    #[test]
    fn buddy_reuses_freed_block() {
        let mut a = buddy(1 << 20);
        let first = a.allocate(8 * KIB).unwrap();
        a.release(first.offset).unwrap();
        assert_eq!(a.allocate(8 * KIB).unwrap().offset, first.offset);
    }

    #[test]
    fn buddy_coalesces_siblings() {
        let mut a = buddy(1 << 20);
        let x = a.allocate(4 * KIB).unwrap();
        let y = a.allocate(4 * KIB).unwrap();
        assert_eq!(y.offset, x.offset + 4 * KIB);
        a.release(x.offset).unwrap();
        a.release(y.offset).unwrap();
        let parent = a.allocate(8 * KIB).unwrap();
        assert_eq!(parent.offset, x.offset);
    }

    #[test]
    fn buddy_rounds_to_power_of_two() {
        let a = buddy(1 << 20);
        assert_eq!(a.rounded_size(1), 256);
        assert_eq!(a.rounded_size(256), 256);
        assert_eq!(a.rounded_size(257), 512);
        assert_eq!(a.rounded_size(12 * KIB), 16 * KIB);
        let wide = BuddyAllocator::new(0, 1 << 20, 4096, Direction::Upward);
        assert_eq!(wide.rounded_size(1), 4096);
    }

    #[test]
    fn buddy_handles_non_power_of_two_region() {
        // [0, 768 KiB) decomposes into 512 KiB + 256 KiB blocks.
        let mut a = buddy(768 * KIB);
        let big = a.allocate(512 * KIB).unwrap();
        let rest = a.allocate(256 * KIB).unwrap();
        assert_eq!((big.offset, rest.offset), (0, 512 * KIB));
        assert!(a.allocate(1).is_none());
        a.release(rest.offset).unwrap();
        a.release(big.offset).unwrap();
        // The two top-level blocks never merge into a block past the limit.
        assert!(a.allocate(1024 * KIB).is_none());
        assert!(a.allocate(512 * KIB).is_some());
    }

    #[test]
    fn buddy_downward_fills_from_the_top() {
        let mut a = BuddyAllocator::new(768 * KIB, 1024 * KIB, 64, Direction::Downward);
        let x = a.allocate(4 * KIB).unwrap();
        assert_eq!(x.offset, 1024 * KIB - 4 * KIB);
        let y = a.allocate(8 * KIB).unwrap();
        assert_eq!(y.offset, 1024 * KIB - 16 * KIB);
    }

    #[test]
    fn buddy_double_release_is_rejected() {
        let mut a = buddy(1 << 20);
        let x = a.allocate(100).unwrap();
        assert!(a.release(x.offset).is_some());
        assert!(a.release(x.offset).is_none());
    }

    #[test]
    fn linear_bumps_by_aligned_size() {
        let mut a = LinearAllocator::new(0, 1 << 20, 64, Direction::Upward);
        assert_eq!(a.allocate(16 * KIB).unwrap().offset, 0);
        assert_eq!(a.allocate(32 * KIB).unwrap().offset, 16 * KIB);
        let tiny = a.allocate(1).unwrap();
        assert_eq!(tiny.len, 64);
        assert_eq!(a.allocate(1).unwrap().offset, tiny.offset + 64);
    }

    #[test]
    fn linear_exact_size_reuse_and_cursor_retraction() {
        let mut a = LinearAllocator::new(0, 1 << 20, 64, Direction::Upward);
        let x = a.allocate(128).unwrap();
        let y = a.allocate(256).unwrap();
        let z = a.allocate(128).unwrap();
        a.release(x.offset).unwrap();
        // Not an exact fit for x's hole: bumps.
        assert_eq!(a.allocate(64).unwrap().offset, z.offset + 128);
        // Exact fit: reuses x.
        assert_eq!(a.allocate(128).unwrap().offset, x.offset);
        a.release(y.offset).unwrap();
        a.release(z.offset + 128).unwrap();
        a.release(z.offset).unwrap();
        // z and the 64-byte block were at the cursor, y's hole cascades in.
        assert_eq!(a.allocate(512).unwrap().offset, y.offset);
    }

    #[test]
    fn linear_downward_and_exhaustion() {
        let mut a = LinearAllocator::new(1024, 2048, 64, Direction::Downward);
        assert_eq!(a.allocate(512).unwrap().offset, 1536);
        assert_eq!(a.allocate(512).unwrap().offset, 1024);
        assert!(a.allocate(1).is_none());
        a.release(1536).unwrap();
        a.release(1024).unwrap();
        assert_eq!(a.allocate(1024).unwrap().offset, 1024);
    }

    proptest! {
        #[test]
        fn live_blocks_never_overlap(
            kind in prop_oneof![Just(AllocatorKind::Linear), Just(AllocatorKind::Buddy)],
            downward in any::<bool>(),
            ops in prop::collection::vec((any::<bool>(), 1u64..20_000, any::<prop::sample::Index>()), 1..200),
        ) {
            let (base, limit) = (256 * 1024, 1024 * 1024);
            let dir = if downward { Direction::Downward } else { Direction::Upward };
            let mut a = Allocator::new(kind, base, limit, 64, dir);
            let mut live: Vec<Block> = Vec::new();
            for (alloc, size, pick) in ops {
                if alloc || live.is_empty() {
                    if let Some(b) = a.allocate(size) {
                        prop_assert!(b.offset >= base && b.offset + b.len <= limit);
                        prop_assert_eq!(b.len, a.rounded_size(size));
                        prop_assert_eq!(b.offset % 64, 0);
                        live.push(b);
                    }
                } else {
                    let b = live.swap_remove(pick.index(live.len()));
                    prop_assert_eq!(a.release(b.offset), Some(b));
                }
                let mut sorted = live.clone();
                sorted.sort_by_key(|b| b.offset);
                for w in sorted.windows(2) {
                    prop_assert!(w[0].offset + w[0].len <= w[1].offset);
                }
            }
        }
    }
}
