//! The per-rank runtime handle: initialization, collective allocation,
//! one-sided put/get, fences, groups and barriers.

mod group;
mod local;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub(crate) use group::GroupTable;
pub use group::{Group, WORLD_GROUP_ID};
pub use local::{run_local, run_local_with};

use crate::collectives::Communicator;
use crate::config::LaunchConfig;
use crate::error::{Error, Result};
use crate::ids::derive_id;
use crate::memory::{
    AllocMode, AllocRecord, CellCache, CellContents, GlobalAddress, IndirectionCell, LocalMemory,
    RecordRole, ResolvedPayload, Segment, CELL_BYTES,
};
use crate::stream::{Stream, StreamEvent, StreamPool};
use crate::transport::{
    Backoff, CompletionHandle, Endpoint, Opcode, PathKind, RankInfo, TopologyMap, Transport,
    TransportStats,
};

/// Direction of a transfer: source side, then destination side.
///
/// The local side must match the buffer passed in. A remote `H` side is
/// delivered through a host bounce buffer; remote memory is always a device
/// segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransferKind {
    H2H,
    H2D,
    D2H,
    D2D,
}

impl TransferKind {
    pub const ALL: [TransferKind; 4] = [
        TransferKind::H2H,
        TransferKind::H2D,
        TransferKind::D2H,
        TransferKind::D2D,
    ];

    pub fn source_is_device(self) -> bool {
        matches!(self, TransferKind::D2H | TransferKind::D2D)
    }

    pub fn dest_is_device(self) -> bool {
        matches!(self, TransferKind::H2D | TransferKind::D2D)
    }
}

/// Local side of a put.
#[derive(Debug, Clone, Copy)]
pub enum LocalBuf<'a> {
    Host(&'a [u8]),
    /// `len` bytes of one of this rank's device segments.
    Device(GlobalAddress, u64),
}

impl LocalBuf<'_> {
    pub fn len(&self) -> u64 {
        match self {
            LocalBuf::Host(b) => b.len() as u64,
            LocalBuf::Device(_, len) => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Local side of a get.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GetDst {
    /// Bytes are returned through [`CompletionHandle::take_bytes`].
    Host,
    Device(GlobalAddress),
}

/// Per-path counters of put/get operations and bytes issued by this rank.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathStats {
    pub ops: [u64; 4],
    pub bytes: [u64; 4],
    /// Transfers whose remote side went through a host bounce buffer.
    pub host_staged: u64,
}

impl PathStats {
    pub fn ops(&self, kind: PathKind) -> u64 {
        self.ops[kind.index()]
    }

    pub fn bytes(&self, kind: PathKind) -> u64 {
        self.bytes[kind.index()]
    }
}

/// Outstanding work toward the members of one group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerCounts {
    pub rma: usize,
    pub stream_events: usize,
}

#[derive(Default)]
struct PathCounters {
    ops: [AtomicU64; 4],
    bytes: [AtomicU64; 4],
    host_staged: AtomicU64,
}

static PROCESS_HANDLE: AtomicBool = AtomicBool::new(false);

/// Marks the single process-mode handle; released on drop.
pub(crate) struct ProcessSlot(());

impl ProcessSlot {
    pub(crate) fn claim() -> Result<Self> {
        if PROCESS_HANDLE.swap(true, Ordering::AcqRel) {
            return Err(Error::AlreadyInitialized);
        }
        Ok(ProcessSlot(()))
    }
}

impl Drop for ProcessSlot {
    fn drop(&mut self) {
        PROCESS_HANDLE.store(false, Ordering::Release);
    }
}

pub(crate) struct Inner {
    rank: u32,
    config: LaunchConfig,
    topology: TopologyMap,
    memory: Arc<LocalMemory>,
    transport: Arc<Transport>,
    pools: Vec<StreamPool>,
    cells: CellCache,
    pub(crate) groups: Mutex<GroupTable>,
    pub(crate) comms: Mutex<HashMap<u64, Arc<Communicator>>>,
    pub(crate) bootstraps: AtomicU64,
    pub(crate) bootstrap_calls: Mutex<HashMap<u64, u64>>,
    mem_seq: AtomicU64,
    rma_ledger: Mutex<Vec<CompletionHandle>>,
    stream_ledger: Mutex<Vec<(u32, StreamEvent)>>,
    paths: PathCounters,
    finalized: AtomicBool,
    _slot: Option<ProcessSlot>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.transport.shutdown();
    }
}

/// Handle to one rank of a running job. Cheap to clone; all clones share
/// the same state.
#[derive(Clone)]
pub struct Runtime {
    pub(crate) inner: Arc<Inner>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("rank", &self.inner.rank)
            .field("nranks", &self.inner.config.nranks)
            .field("devices", &self.inner.config.devices_per_rank)
            .finish()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Hello {
    info: RankInfo,
    digest: String,
    peer_matrix: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct MemVote {
    op: String,
    device: u16,
    size: Option<u64>,
    offset: Option<u64>,
    failed: bool,
}

impl MemVote {
    fn same_call(&self, other: &MemVote) -> bool {
        self.op == other.op && self.device == other.device && self.size == other.size
    }
}

pub(crate) fn process_id(rank: u32) -> u64 {
    ((std::process::id() as u64) << 32) | rank as u64
}

impl Runtime {
    /// Joins the handshake, discovers the topology and passes a world barrier.
    pub(crate) fn assemble(
        rank: u32,
        mut config: LaunchConfig,
        node_id: u32,
        memory: Arc<LocalMemory>,
        transport: Arc<Transport>,
        slot: Option<ProcessSlot>,
    ) -> Result<Runtime> {
        let peer_matrix =
            TopologyMap::uniform_peer_matrix(config.devices_per_rank, config.peer_access);
        let hello = Hello {
            info: RankInfo {
                rank,
                node_id,
                process_id: process_id(rank),
                devices: config.devices_per_rank,
            },
            digest: config.agreement_digest(),
            peer_matrix: peer_matrix.clone(),
        };
        let ranks: Vec<u32> = (0..config.nranks).collect();
        let replies = exchange_on(
            &transport,
            rank,
            &ranks,
            derive_id("init", &[]),
            serde_json::to_vec(&hello)?,
            config.timeout,
        )?;
        let mut infos = Vec::with_capacity(replies.len());
        for raw in replies {
            let theirs: Hello = serde_json::from_slice(&raw)?;
            if theirs.digest != hello.digest {
                return Err(Error::ConfigMismatch(format!(
                    "rank {} runs with [{}], rank {rank} with [{}]",
                    theirs.info.rank, theirs.digest, hello.digest
                )));
            }
            if theirs.peer_matrix != peer_matrix {
                return Err(Error::ConfigMismatch(format!(
                    "rank {} reports a different peer matrix",
                    theirs.info.rank
                )));
            }
            infos.push(theirs.info);
        }
        let topology = TopologyMap::discover(infos, peer_matrix)?;
        config.nodes = (0..config.nranks)
            .map(|r| topology.node_of(r).unwrap_or(0))
            .collect();
        let world = Group::new(WORLD_GROUP_ID, topology.endpoints(), None);
        let pools = (0..config.devices_per_rank)
            .map(|d| StreamPool::new(d, config.max_active_streams, config.sim_task_latency))
            .collect();
        let rt = Runtime {
            inner: Arc::new(Inner {
                rank,
                config,
                topology,
                memory,
                transport,
                pools,
                cells: CellCache::new(),
                groups: Mutex::new(GroupTable::with_world(world.clone())),
                comms: Mutex::new(HashMap::new()),
                bootstraps: AtomicU64::new(0),
                bootstrap_calls: Mutex::new(HashMap::new()),
                mem_seq: AtomicU64::new(0),
                rma_ledger: Mutex::new(Vec::new()),
                stream_ledger: Mutex::new(Vec::new()),
                paths: PathCounters::default(),
                finalized: AtomicBool::new(false),
                _slot: slot,
            }),
        };
        rt.barrier_inner(&world)?;
        Ok(rt)
    }

    pub fn rank(&self) -> u32 {
        self.inner.rank
    }

    pub fn nranks(&self) -> u32 {
        self.inner.config.nranks
    }

    pub fn devices_per_rank(&self) -> u16 {
        self.inner.config.devices_per_rank
    }

    pub fn config(&self) -> &LaunchConfig {
        &self.inner.config
    }

    pub fn topology(&self) -> &TopologyMap {
        &self.inner.topology
    }

    /// The group of every endpoint (id 0).
    pub fn world(&self) -> Group {
        self.inner
            .groups
            .lock()
            .get(WORLD_GROUP_ID)
            .cloned()
            .expect("world group is never freed")
    }

    /// Endpoints bound to this rank.
    pub fn my_endpoints(&self) -> Vec<Endpoint> {
        (0..self.devices_per_rank())
            .map(|d| {
                self.inner
                    .topology
                    .endpoint(self.rank(), d)
                    .expect("own endpoint")
            })
            .collect()
    }

    pub fn segment(&self, device: u16) -> Result<&Segment> {
        self.inner.memory.segment(device)
    }

    pub fn cell_cache(&self) -> &CellCache {
        &self.inner.cells
    }

    pub fn transport_stats(&self) -> TransportStats {
        self.inner.transport.stats()
    }

    pub fn path_stats(&self) -> PathStats {
        let p = &self.inner.paths;
        PathStats {
            ops: std::array::from_fn(|i| p.ops[i].load(Ordering::Relaxed)),
            bytes: std::array::from_fn(|i| p.bytes[i].load(Ordering::Relaxed)),
            host_staged: p.host_staged.load(Ordering::Relaxed),
        }
    }

    pub fn pool(&self, device: u16) -> Result<&StreamPool> {
        self.inner
            .pools
            .get(device as usize)
            .ok_or(Error::UnknownEndpoint {
                rank: self.rank(),
                device,
            })
    }

    pub fn stream_acquire(&self, device: u16) -> Result<Stream> {
        self.check_open()?;
        Ok(self.pool(device)?.acquire())
    }

    pub fn is_finalized(&self) -> bool {
        self.inner.finalized.load(Ordering::Acquire)
    }

    pub(crate) fn check_open(&self) -> Result<()> {
        if self.is_finalized() {
            Err(Error::Finalized)
        } else {
            Ok(())
        }
    }

    pub(crate) fn transport(&self) -> &Arc<Transport> {
        &self.inner.transport
    }

    pub(crate) fn local_memory(&self) -> &Arc<LocalMemory> {
        &self.inner.memory
    }

    pub(crate) fn timeout(&self) -> std::time::Duration {
        self.inner.config.timeout
    }

    /// All-to-all exchange of one payload per rank among `ranks`.
    pub(crate) fn exchange(
        &self,
        ranks: &[u32],
        tag: u64,
        payload: Vec<u8>,
    ) -> Result<Vec<Vec<u8>>> {
        exchange_on(
            &self.inner.transport,
            self.rank(),
            ranks,
            tag,
            payload,
            self.inner.config.timeout,
        )
    }

    fn world_ranks(&self) -> Vec<u32> {
        (0..self.nranks()).collect()
    }

    fn vote(&self, mine: &MemVote) -> Result<Vec<MemVote>> {
        let seq = self.inner.mem_seq.fetch_add(1, Ordering::AcqRel);
        let tag = derive_id("memory", &[seq]);
        self.exchange(&self.world_ranks(), tag, serde_json::to_vec(mine)?)?
            .into_iter()
            .map(|raw| serde_json::from_slice(&raw).map_err(Error::from))
            .collect()
    }

    fn check_votes(&self, mine: &MemVote, votes: &[MemVote]) -> Result<()> {
        if let Some((r, v)) = votes.iter().enumerate().find(|(_, v)| !mine.same_call(v)) {
            return Err(Error::CollectiveMismatch(format!(
                "rank {r} called {} on device {} with size {:?}; rank {} called {} on device {} with size {:?}",
                v.op,
                v.device,
                v.size,
                self.rank(),
                mine.op,
                mine.device,
                mine.size
            )));
        }
        Ok(())
    }

    /// Collective: every rank allocates `size` bytes on `device` at the same
    /// offset.
    pub fn alloc_symmetric(&self, size: u64, device: u16) -> Result<AllocRecord> {
        self.alloc_symmetric_with_stream(size, device, None)
    }

    /// Like [`alloc_symmetric`](Self::alloc_symmetric), binding the local
    /// block to a stream: stream transfers out of it must use that stream.
    pub fn alloc_symmetric_with_stream(
        &self,
        size: u64,
        device: u16,
        stream_id: Option<u64>,
    ) -> Result<AllocRecord> {
        self.check_open()?;
        let local = if size == 0 {
            Err(Error::InvalidConfig(
                "symmetric allocations need size > 0".into(),
            ))
        } else {
            self.segment(device)
                .and_then(|s| s.allocate(size, AllocMode::Symmetric, RecordRole::Data, stream_id))
        };
        let mine = MemVote {
            op: "alloc-symmetric".into(),
            device,
            size: Some(size),
            offset: local.as_ref().ok().map(|r| r.addr.offset),
            failed: local.is_err(),
        };
        let votes = self.vote(&mine)?;
        let outcome = self.check_votes(&mine, &votes).and_then(|()| {
            if let Err(e) = &local {
                return Err(e.clone());
            }
            if votes.iter().any(|v| v.failed) {
                return Err(Error::OutOfSegment {
                    device,
                    requested: size,
                });
            }
            if votes.iter().any(|v| v.offset != mine.offset) {
                return Err(Error::CollectiveMismatch(
                    "symmetric offsets diverged across ranks".into(),
                ));
            }
            Ok(())
        });
        match outcome {
            Ok(()) => local,
            Err(e) => {
                if let Ok(r) = local {
                    let _ = self.segment(device)?.release(r.addr.offset);
                }
                Err(e)
            }
        }
    }

    /// Same block on every device of this rank; collective.
    pub fn alloc_symmetric_all_devices(&self, size: u64) -> Result<Vec<AllocRecord>> {
        (0..self.devices_per_rank())
            .map(|d| self.alloc_symmetric(size, d))
            .collect()
    }

    /// Collective: allocates a symmetric 32-byte cell and a local payload of
    /// `local_size` bytes (possibly different on every rank) in the top
    /// region, then binds the cell to the payload.
    pub fn alloc_asymmetric(&self, local_size: u64, device: u16) -> Result<IndirectionCell> {
        self.check_open()?;
        let local = self.segment(device).and_then(|seg| {
            let cell = seg.allocate(CELL_BYTES, AllocMode::Symmetric, RecordRole::Cell, None)?;
            let payload = if local_size > 0 {
                match seg.allocate(local_size, AllocMode::Asymmetric, RecordRole::Payload, None) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        seg.release(cell.addr.offset)?;
                        return Err(e);
                    }
                }
            } else {
                None
            };
            // Bind before voting: once the vote completes peers may fetch it.
            let contents = CellContents {
                payload_offset: payload.map_or(0, |p| p.addr.offset),
                payload_size: local_size,
                generation: seg.next_generation(),
            };
            seg.write(cell.addr.offset, &contents.encode())?;
            Ok((cell, payload))
        });
        let mine = MemVote {
            op: "alloc-asymmetric".into(),
            device,
            size: None,
            offset: local.as_ref().ok().map(|(c, _)| c.addr.offset),
            failed: local.is_err(),
        };
        let votes = self.vote(&mine)?;
        let outcome = self.check_votes(&mine, &votes).and_then(|()| {
            if let Err(e) = &local {
                return Err(e.clone());
            }
            if votes.iter().any(|v| v.failed) {
                return Err(Error::OutOfSegment {
                    device,
                    requested: local_size,
                });
            }
            if votes.iter().any(|v| v.offset != mine.offset) {
                return Err(Error::CollectiveMismatch(
                    "cell offsets diverged across ranks".into(),
                ));
            }
            Ok(())
        });
        let seg = self.segment(device)?;
        match (outcome, local) {
            (Ok(()), Ok((cell, _))) => Ok(IndirectionCell { cell: cell.addr }),
            (Err(e), local) => {
                if let Ok((cell, payload)) = local {
                    if let Some(p) = payload {
                        let _ = seg.release(p.addr.offset);
                    }
                    let _ = seg.release(cell.addr.offset);
                }
                Err(e)
            }
            (Ok(()), Err(e)) => Err(e),
        }
    }

    fn own_record(&self, addr: GlobalAddress, role: RecordRole) -> Result<AllocRecord> {
        let seg = self.segment(addr.device)?;
        match seg.record_at(addr.offset) {
            Some((rec, r)) if r == role => Ok(rec),
            _ => Err(Error::DoubleFree {
                device: addr.device,
                offset: addr.offset,
            }),
        }
    }

    /// Collective free of a symmetric data allocation.
    pub fn free(&self, record: &AllocRecord) -> Result<()> {
        self.check_open()?;
        let addr = record.addr.on_rank(self.rank());
        let check = match record.mode {
            AllocMode::Symmetric => self.own_record(addr, RecordRole::Data).map(|_| ()),
            AllocMode::Asymmetric => Err(Error::InvalidConfig(
                "asymmetric payloads are freed through their cell".into(),
            )),
        };
        let mine = MemVote {
            op: "free".into(),
            device: addr.device,
            size: Some(addr.offset),
            offset: Some(addr.offset),
            failed: check.is_err(),
        };
        let votes = self.vote(&mine)?;
        self.check_votes(&mine, &votes)?;
        check?;
        if votes.iter().any(|v| v.failed) {
            return Err(Error::CollectiveMismatch(format!(
                "free of {addr} failed on another rank"
            )));
        }
        self.segment(addr.device)?.release(addr.offset)?;
        Ok(())
    }

    fn read_own_cell(&self, cell: &IndirectionCell) -> Result<CellContents> {
        let seg = self.segment(cell.device())?;
        match seg.record_at(cell.offset()) {
            Some((_, RecordRole::Cell)) => {
                CellContents::decode(&seg.read_vec(cell.offset(), CELL_BYTES)?)
            }
            _ => Err(Error::StaleCell(cell.cell.on_rank(self.rank()))),
        }
    }

    /// This rank's binding of `cell`.
    pub fn cell_contents(&self, cell: &IndirectionCell) -> Result<CellContents> {
        self.read_own_cell(cell)
    }

    /// Collective free of a cell and every rank's payload behind it.
    pub fn free_cell(&self, cell: &IndirectionCell) -> Result<()> {
        self.check_open()?;
        let current = self.read_own_cell(cell);
        let mine = MemVote {
            op: "free-cell".into(),
            device: cell.device(),
            size: Some(cell.offset()),
            offset: Some(cell.offset()),
            failed: current.is_err(),
        };
        let votes = self.vote(&mine)?;
        self.check_votes(&mine, &votes)?;
        let current = current.map_err(|_| Error::DoubleFree {
            device: cell.device(),
            offset: cell.offset(),
        })?;
        self.inner.cells.invalidate(cell.device(), cell.offset());
        let seg = self.segment(cell.device())?;
        let retired = CellContents {
            payload_offset: 0,
            payload_size: 0,
            generation: seg.next_generation(),
        };
        seg.write(cell.offset(), &retired.encode())?;
        if current.payload_size > 0 {
            seg.release(current.payload_offset)?;
        }
        seg.release(cell.offset())?;
        Ok(())
    }

    /// Collective: replaces every rank's payload with a fresh one of
    /// `new_size` bytes and bumps the cell's generation.
    pub fn rebind_cell(&self, cell: &IndirectionCell, new_size: u64) -> Result<CellContents> {
        self.check_open()?;
        let current = self.read_own_cell(cell);
        let seg = self.segment(cell.device())?;
        let fresh = current.clone().and_then(|cur| {
            if cur.payload_size > 0 {
                seg.release(cur.payload_offset)?;
            }
            if new_size == 0 {
                return Ok(None);
            }
            seg.allocate(new_size, AllocMode::Asymmetric, RecordRole::Payload, None)
                .map(Some)
        });
        if current.is_ok() {
            let payload = fresh.as_ref().ok().copied().flatten();
            let contents = CellContents {
                payload_offset: payload.map_or(0, |p| p.addr.offset),
                payload_size: if fresh.is_ok() { new_size } else { 0 },
                generation: seg.next_generation(),
            };
            seg.write(cell.offset(), &contents.encode())?;
        }
        let mine = MemVote {
            op: "rebind-cell".into(),
            device: cell.device(),
            size: Some(cell.offset()),
            offset: Some(cell.offset()),
            failed: fresh.is_err(),
        };
        let votes = self.vote(&mine)?;
        self.check_votes(&mine, &votes)?;
        self.inner.cells.invalidate(cell.device(), cell.offset());
        fresh?;
        let contents = self.read_own_cell(cell)?;
        if votes.iter().any(|v| v.failed) {
            return Err(Error::OutOfSegment {
                device: cell.device(),
                requested: new_size,
            });
        }
        Ok(contents)
    }

    /// Address of the same symmetric object on `target_rank`.
    pub fn translate(&self, local: GlobalAddress, target_rank: u32) -> Result<GlobalAddress> {
        if target_rank >= self.nranks() {
            return Err(Error::UnknownEndpoint {
                rank: target_rank,
                device: local.device,
            });
        }
        let seg = self.segment(local.device)?;
        match seg.find(local.offset, 1) {
            Some((rec, _)) if rec.mode == AllocMode::Symmetric => Ok(local.on_rank(target_rank)),
            Some(_) => Err(Error::NotSymmetric(local)),
            None => Err(Error::InvalidAddress {
                addr: local,
                len: 1,
            }),
        }
    }

    /// Where `cell` points on `target_rank`. A cache miss costs one
    /// `CELL_FETCH`; hits and self-targets cost nothing on the wire.
    pub fn resolve_cell(
        &self,
        cell: &IndirectionCell,
        target_rank: u32,
    ) -> Result<ResolvedPayload> {
        self.check_open()?;
        let remote_cell = cell.cell.on_rank(target_rank);
        let payload_of = |c: CellContents| -> Result<ResolvedPayload> {
            if c.payload_size == 0 {
                return Err(Error::NullPayload(remote_cell));
            }
            Ok(ResolvedPayload {
                addr: GlobalAddress::new(target_rank, cell.device(), c.payload_offset),
                size: c.payload_size,
                generation: c.generation,
            })
        };
        let own = self
            .read_own_cell(cell)
            .map_err(|_| Error::StaleCell(remote_cell))?;
        if target_rank == self.rank() {
            return payload_of(own);
        }
        if let Some(hit) = self.inner.cells.lookup(cell, target_rank) {
            if hit.size == 0 {
                return Err(Error::NullPayload(remote_cell));
            }
            return Ok(hit);
        }
        let handle = self.inner.transport.cell_fetch(remote_cell)?;
        handle.wait()?;
        let bytes = handle
            .take_bytes()
            .ok_or_else(|| Error::TransportFailure("cell fetch returned no data".into()))?;
        let contents = CellContents::decode(&bytes)?;
        self.inner.cells.insert(
            cell,
            target_rank,
            ResolvedPayload {
                addr: GlobalAddress::new(target_rank, cell.device(), contents.payload_offset),
                size: contents.payload_size,
                generation: contents.generation,
            },
        );
        payload_of(contents)
    }

    fn classify(&self, local_device: u16, remote: GlobalAddress) -> Result<PathKind> {
        let topo = &self.inner.topology;
        let a = topo.endpoint(self.rank(), local_device)?;
        let b = topo.endpoint(remote.rank, remote.device)?;
        topo.classify(&a, &b)
    }

    fn count_path(&self, kind: PathKind, bytes: u64, staged: bool) {
        let p = &self.inner.paths;
        p.ops[kind.index()].fetch_add(1, Ordering::Relaxed);
        p.bytes[kind.index()].fetch_add(bytes, Ordering::Relaxed);
        if staged {
            p.host_staged.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn check_device_buf(&self, addr: GlobalAddress, len: u64) -> Result<()> {
        if addr.rank != self.rank() {
            return Err(Error::KindMismatch(format!(
                "device buffer {addr} is not resident on rank {}",
                self.rank()
            )));
        }
        self.inner.memory.check(addr, len).map(|_| ())
    }

    fn track(&self, handle: &CompletionHandle) {
        if handle.is_done() && handle.error().is_none() {
            return;
        }
        let mut ledger = self.inner.rma_ledger.lock();
        if ledger.len() >= 256 && ledger.len().is_power_of_two() {
            ledger.retain(|h| !h.is_done() || h.error().is_some());
        }
        ledger.push(handle.clone());
    }

    /// One-sided write of `src` to `dst`. Complete after the handle reaches
    /// `RemoteDone` or after a fence covering `dst.rank`.
    pub fn put(
        &self,
        dst: GlobalAddress,
        src: LocalBuf<'_>,
        kind: TransferKind,
    ) -> Result<CompletionHandle> {
        self.check_open()?;
        let len = src.len();
        let local_device = match src {
            LocalBuf::Host(_) if kind.source_is_device() => {
                return Err(Error::KindMismatch(format!(
                    "{kind:?} needs a device source buffer"
                )))
            }
            LocalBuf::Device(..) if !kind.source_is_device() => {
                return Err(Error::KindMismatch(format!(
                    "{kind:?} needs a host source buffer"
                )))
            }
            LocalBuf::Device(addr, n) => {
                self.check_device_buf(addr, n)?;
                addr.device
            }
            LocalBuf::Host(_) => dst.device,
        };
        let path = self.classify(local_device, dst)?;
        let staged = !kind.dest_is_device();
        if len == 0 {
            return Ok(CompletionHandle::completed(0, dst.rank));
        }
        self.count_path(path, len, staged);
        if path.is_local() {
            match src {
                LocalBuf::Host(bytes) if staged => self.inner.memory.write(dst, bytes)?,
                LocalBuf::Host(bytes) => self.inner.memory.write(dst, bytes)?,
                LocalBuf::Device(addr, n) if staged => {
                    let bounce = self.inner.memory.read_vec(addr, n)?;
                    self.inner.memory.write(dst, &bounce)?
                }
                LocalBuf::Device(addr, n) => self.inner.memory.copy(addr, dst, n)?,
            }
            return Ok(CompletionHandle::completed(0, dst.rank));
        }
        let handle = match src {
            LocalBuf::Host(bytes) => self.inner.transport.put(dst, bytes)?,
            LocalBuf::Device(addr, n) => {
                let bytes = self.inner.memory.read_vec(addr, n)?;
                self.inner.transport.put(dst, &bytes)?
            }
        };
        self.track(&handle);
        Ok(handle)
    }

    /// Host-to-device put of a byte slice.
    pub fn put_bytes(&self, dst: GlobalAddress, bytes: &[u8]) -> Result<CompletionHandle> {
        self.put(dst, LocalBuf::Host(bytes), TransferKind::H2D)
    }

    /// One-sided read of `len` bytes at `src`.
    pub fn get(
        &self,
        src: GlobalAddress,
        len: u64,
        dst: GetDst,
        kind: TransferKind,
    ) -> Result<CompletionHandle> {
        self.check_open()?;
        let local_device = match dst {
            GetDst::Host if kind.dest_is_device() => {
                return Err(Error::KindMismatch(format!(
                    "{kind:?} needs a device destination"
                )))
            }
            GetDst::Device(_) if !kind.dest_is_device() => {
                return Err(Error::KindMismatch(format!(
                    "{kind:?} needs a host destination"
                )))
            }
            GetDst::Device(addr) => {
                self.check_device_buf(addr, len)?;
                addr.device
            }
            GetDst::Host => src.device,
        };
        let path = self.classify(local_device, src)?;
        let staged = !kind.source_is_device();
        if len == 0 {
            return Ok(CompletionHandle::completed_with(0, src.rank, Vec::new()));
        }
        self.count_path(path, len, staged);
        if path.is_local() {
            return match dst {
                GetDst::Host => Ok(CompletionHandle::completed_with(
                    0,
                    src.rank,
                    self.inner.memory.read_vec(src, len)?,
                )),
                GetDst::Device(addr) => {
                    if staged {
                        let bounce = self.inner.memory.read_vec(src, len)?;
                        self.inner.memory.write(addr, &bounce)?;
                    } else {
                        self.inner.memory.copy(src, addr, len)?;
                    }
                    Ok(CompletionHandle::completed(0, src.rank))
                }
            };
        }
        let local = match dst {
            GetDst::Host => None,
            GetDst::Device(addr) => Some(addr),
        };
        let handle = self.inner.transport.get(src, len, local)?;
        self.track(&handle);
        Ok(handle)
    }

    /// Blocking device-to-host read.
    pub fn get_bytes(&self, src: GlobalAddress, len: u64) -> Result<Vec<u8>> {
        let h = self.get(src, len, GetDst::Host, TransferKind::D2H)?;
        h.wait()?;
        Ok(h.take_bytes().unwrap_or_default())
    }

    /// Reads this rank's own device memory (a device-side load).
    pub fn read_local(&self, addr: GlobalAddress, len: u64) -> Result<Vec<u8>> {
        self.inner.memory.read_vec(addr, len)
    }

    /// Writes this rank's own device memory (a device-side store).
    pub fn write_local(&self, addr: GlobalAddress, bytes: &[u8]) -> Result<()> {
        self.inner.memory.write(addr, bytes)
    }

    /// Device-to-device put executed as a task on `stream`. The local block
    /// must not be bound to a different stream.
    pub fn put_on_stream(
        &self,
        stream: &Stream,
        dst: GlobalAddress,
        src: GlobalAddress,
        len: u64,
    ) -> Result<StreamEvent> {
        self.check_open()?;
        let rec = self.inner.memory.check(src, len.max(1))?;
        if let Some(bound) = rec.stream_id {
            if bound != stream.id() {
                return Err(Error::StreamMismatch {
                    addr: src,
                    bound,
                    submitted: stream.id(),
                });
            }
        }
        let rt = self.clone();
        let event = stream.submit_fn(move || {
            let h = rt.put(dst, LocalBuf::Device(src, len), TransferKind::D2D)?;
            h.wait()
        })?;
        self.track_event(dst.rank, event.clone());
        Ok(event)
    }

    /// Ties a stream event to `target_rank` so fences toward it wait for it.
    pub fn track_event(&self, target_rank: u32, event: StreamEvent) {
        let mut ledger = self.inner.stream_ledger.lock();
        if ledger.len() >= 256 && ledger.len().is_power_of_two() {
            ledger.retain(|(_, e)| !e.is_complete());
        }
        ledger.push((target_rank, event));
    }

    /// Drains inbound traffic once; returns the number of frames handled.
    pub fn progress(&self) -> Result<usize> {
        self.inner.transport.progress()
    }

    /// Outstanding RMA and stream events toward members of `g`.
    pub fn ledger_counts(&self, g: &Group) -> LedgerCounts {
        let ranks: HashSet<u32> = g.ranks().into_iter().collect();
        LedgerCounts {
            rma: self
                .inner
                .rma_ledger
                .lock()
                .iter()
                .filter(|h| ranks.contains(&h.target_rank()) && !h.is_done())
                .count(),
            stream_events: self
                .inner
                .stream_ledger
                .lock()
                .iter()
                .filter(|(r, e)| ranks.contains(r) && !e.is_complete())
                .count(),
        }
    }

    /// Waits until every put/get this rank issued toward members of `g`,
    /// and every stream event tied to them, has completed. One loop polls
    /// both ledgers.
    pub fn fence(&self, g: &Group) -> Result<()> {
        self.check_open()?;
        self.fence_inner(g)
    }

    pub(crate) fn fence_inner(&self, g: &Group) -> Result<()> {
        let g = self.live_group(g)?;
        if !g.has_rank(self.rank()) {
            return Err(Error::NotMember {
                rank: self.rank(),
                group: g.id(),
            });
        }
        let ranks: HashSet<u32> = g.ranks().into_iter().collect();
        let deadline = Instant::now() + self.inner.config.timeout;
        let mut backoff = Backoff::new();
        loop {
            let mut failure = None;
            let rma_left = {
                let mut ledger = self.inner.rma_ledger.lock();
                ledger.retain(|h| {
                    if !ranks.contains(&h.target_rank()) || !h.is_done() {
                        return true;
                    }
                    if let Some(e) = h.error() {
                        failure.get_or_insert(e);
                    }
                    false
                });
                ledger
                    .iter()
                    .filter(|h| ranks.contains(&h.target_rank()))
                    .count()
            };
            let events_left = {
                let mut ledger = self.inner.stream_ledger.lock();
                ledger.retain(|(r, e)| {
                    if !ranks.contains(r) {
                        return true;
                    }
                    match e.result() {
                        None => true,
                        Some(Ok(())) => false,
                        Some(Err(err)) => {
                            failure.get_or_insert(err);
                            false
                        }
                    }
                });
                ledger.iter().filter(|(r, _)| ranks.contains(r)).count()
            };
            if let Some(e) = failure {
                return Err(e);
            }
            if rma_left == 0 && events_left == 0 {
                return Ok(());
            }
            let handled = self.inner.transport.progress()?;
            if Instant::now() >= deadline {
                return Err(Error::TransportFailure(format!(
                    "fence on group {:#x} timed out with {rma_left} transfers and {events_left} stream events outstanding",
                    g.id()
                )));
            }
            if handled == 0 {
                self.inner.transport.idle_wait(backoff.next());
            } else {
                backoff.reset();
            }
        }
    }

    /// Fence toward every rank.
    pub fn fence_all(&self) -> Result<()> {
        self.fence(&self.world())
    }

    /// Fences the world, waits for local streams, passes a world barrier and
    /// closes the transport. Later calls are no-ops.
    pub fn finalize(&self) -> Result<()> {
        if self.inner.finalized.swap(true, Ordering::AcqRel) {
            return Ok(());
        }
        let world = self.world();
        let fenced = self.fence_inner(&world);
        for pool in &self.inner.pools {
            pool.sync_all();
        }
        let fenced = fenced.and_then(|()| self.fence_inner(&world));
        let barrier = self.barrier_inner(&world);
        self.inner.transport.shutdown();
        fenced.and(barrier)
    }
}

/// All-to-all exchange over `ranks` through mailbox `BOOTSTRAP` messages.
/// Returns one payload per rank in `ranks` order, the caller's own included.
pub(crate) fn exchange_on(
    transport: &Arc<Transport>,
    me: u32,
    ranks: &[u32],
    tag: u64,
    payload: Vec<u8>,
    timeout: std::time::Duration,
) -> Result<Vec<Vec<u8>>> {
    for &r in ranks {
        if r != me {
            transport.notify(r, Opcode::Bootstrap, tag, payload.clone())?;
        }
    }
    ranks
        .iter()
        .map(|&r| {
            if r == me {
                Ok(payload.clone())
            } else {
                transport.recv(r, tag, timeout)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_kind_sides() {
        assert!(TransferKind::D2H.source_is_device());
        assert!(!TransferKind::D2H.dest_is_device());
        assert!(TransferKind::H2D.dest_is_device());
        assert!(!TransferKind::H2H.source_is_device());
    }

    #[test]
    fn votes_compare_call_shape_only() {
        let a = MemVote {
            op: "alloc-symmetric".into(),
            device: 0,
            size: Some(64),
            offset: Some(0),
            failed: false,
        };
        let b = MemVote {
            offset: Some(128),
            failed: true,
            ..a.clone()
        };
        assert!(a.same_call(&b));
        let c = MemVote {
            size: Some(65),
            ..a.clone()
        };
        assert!(!a.same_call(&c));
    }
}
