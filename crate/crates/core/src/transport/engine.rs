use std::cell::Cell;
use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Select, Sender};
use parking_lot::{Condvar, Mutex};

use super::completion::{Backoff, CompletionHandle, OpState, ProgressDriver};
use super::wire::{Header, Opcode, Status, WireMessage, HEADER_BYTES, STAGING_DEVICE};
use crate::error::{Error, Result};
use crate::memory::{GlobalAddress, LocalMemory, RecordRole, CELL_BYTES};

thread_local! {
    static IN_PROGRESS_THREAD: Cell<bool> = const { Cell::new(false) };
}

/// Item delivered to a rank's single inbound queue.
pub(crate) enum Inbound {
    Frame(WireMessage),
    /// The connection to this peer hit EOF or an I/O error.
    Closed(u32),
}

/// How a transport reaches one peer.
pub(crate) enum LinkSpec {
    /// The transport's own inbound queue.
    Loopback,
    /// The peer's inbound queue inside this process.
    Memory(Sender<Inbound>),
    Tcp(TcpStream),
}

enum Link {
    Loopback,
    Memory(Sender<Inbound>),
    Tcp(Mutex<TcpStream>),
}

#[derive(Debug, Clone)]
pub(crate) struct TransportOptions {
    pub fragment_bytes: u64,
    pub timeout: Duration,
    pub progress_thread: bool,
}

enum Sink {
    Ack,
    Host,
    Device(GlobalAddress),
    Cell,
}

struct Fragment {
    op: Arc<OpState>,
    sink: Sink,
    base: u64,
    len: u64,
    remote: GlobalAddress,
}

#[derive(Default)]
struct Counters {
    sent: [AtomicU64; 7],
    received: [AtomicU64; 7],
    payload_bytes_sent: AtomicU64,
    rma_put_bytes: AtomicU64,
    rma_get_bytes: AtomicU64,
    served_by_progress_thread: AtomicU64,
    served_by_caller: AtomicU64,
    retired_fragments: AtomicU64,
}

/// Point-in-time copy of the transport's message counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub sent: [u64; 7],
    pub received: [u64; 7],
    pub payload_bytes_sent: u64,
    /// Payload bytes of segment-targeted `PUT` fragments issued by this rank.
    pub rma_put_bytes: u64,
    /// Payload bytes of `GET_RESP` fragments received by this rank.
    pub rma_get_bytes: u64,
    /// Requests from peers served on the background progress thread.
    pub served_by_progress_thread: u64,
    /// Requests from peers served by an application flow that called progress.
    pub served_by_caller: u64,
    pub retired_fragments: u64,
}

impl TransportStats {
    pub fn sent(&self, op: Opcode) -> u64 {
        self.sent[op.index()]
    }

    pub fn received(&self, op: Opcode) -> u64 {
        self.received[op.index()]
    }
}

/// Staged payloads waiting for a receiver, keyed by (source rank, tag).
type Mailbox = HashMap<(u32, u64), VecDeque<Vec<u8>>>;

/// Per-rank message engine: links to every peer, the inbound queue, the
/// table of in-flight fragments and the mailbox used for staged payloads.
pub struct Transport {
    rank: u32,
    nranks: u32,
    memory: Arc<LocalMemory>,
    links: Vec<Link>,
    inbound_tx: Sender<Inbound>,
    inbound_rx: Receiver<Inbound>,
    progress_lock: Mutex<()>,
    next_msg_id: AtomicU64,
    pending: Mutex<HashMap<u64, Fragment>>,
    mailbox: Mutex<Mailbox>,
    activity: Mutex<u64>,
    activity_cv: Condvar,
    failed_peers: Mutex<HashSet<u32>>,
    counters: Counters,
    options: TransportOptions,
    shutdown: AtomicBool,
    sockets: Vec<TcpStream>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl std::fmt::Debug for Transport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transport")
            .field("rank", &self.rank)
            .field("nranks", &self.nranks)
            .finish()
    }
}

fn io_failure(peer: u32, e: std::io::Error) -> Error {
    Error::TransportFailure(format!("link to rank {peer}: {e}"))
}

fn read_loop(peer: u32, mut stream: TcpStream, tx: Sender<Inbound>) {
    loop {
        let mut head = [0u8; HEADER_BYTES];
        if stream.read_exact(&mut head).is_err() {
            break;
        }
        let header = match Header::decode(&head) {
            Ok(h) => h,
            Err(e) => {
                log::error!("dropping link to rank {peer}: {e}");
                break;
            }
        };
        let mut payload = vec![0u8; header.payload_len() as usize];
        if stream.read_exact(&mut payload).is_err() {
            break;
        }
        if tx
            .send(Inbound::Frame(WireMessage { header, payload }))
            .is_err()
        {
            return;
        }
    }
    let _ = tx.send(Inbound::Closed(peer));
}

impl Transport {
    pub(crate) fn start(
        rank: u32,
        memory: Arc<LocalMemory>,
        inbound: (Sender<Inbound>, Receiver<Inbound>),
        specs: Vec<LinkSpec>,
        options: TransportOptions,
    ) -> Result<Arc<Self>> {
        let (inbound_tx, inbound_rx) = inbound;
        let nranks = specs.len() as u32;
        let mut links = Vec::with_capacity(specs.len());
        let mut sockets = Vec::new();
        let mut readers = Vec::new();
        for (peer, spec) in specs.into_iter().enumerate() {
            let peer = peer as u32;
            links.push(match spec {
                LinkSpec::Loopback => Link::Loopback,
                LinkSpec::Memory(tx) => Link::Memory(tx),
                LinkSpec::Tcp(stream) => {
                    stream.set_nodelay(true).map_err(|e| io_failure(peer, e))?;
                    let reader = stream.try_clone().map_err(|e| io_failure(peer, e))?;
                    sockets.push(stream.try_clone().map_err(|e| io_failure(peer, e))?);
                    readers.push((peer, reader));
                    Link::Tcp(Mutex::new(stream))
                }
            });
        }
        let transport = Arc::new(Transport {
            rank,
            nranks,
            memory,
            links,
            inbound_tx,
            inbound_rx,
            progress_lock: Mutex::new(()),
            next_msg_id: AtomicU64::new(1),
            pending: Mutex::new(HashMap::new()),
            mailbox: Mutex::new(HashMap::new()),
            activity: Mutex::new(0),
            activity_cv: Condvar::new(),
            failed_peers: Mutex::new(HashSet::new()),
            counters: Counters::default(),
            options,
            shutdown: AtomicBool::new(false),
            sockets,
            threads: Mutex::new(Vec::new()),
        });
        let mut threads = Vec::new();
        for (peer, reader) in readers {
            let tx = transport.inbound_tx.clone();
            threads.push(
                thread::Builder::new()
                    .name(format!("diomp-r{rank}-rx{peer}"))
                    .spawn(move || read_loop(peer, reader, tx))
                    .map_err(|e| Error::Io(e.to_string()))?,
            );
        }
        if transport.options.progress_thread {
            threads.push(transport.spawn_progress_thread()?);
        }
        *transport.threads.lock() = threads;
        Ok(transport)
    }

    fn spawn_progress_thread(self: &Arc<Self>) -> Result<JoinHandle<()>> {
        let weak = Arc::downgrade(self);
        let rx = self.inbound_rx.clone();
        thread::Builder::new()
            .name(format!("diomp-r{}-progress", self.rank))
            .spawn(move || {
                IN_PROGRESS_THREAD.with(|f| f.set(true));
                loop {
                    let mut sel = Select::new();
                    sel.recv(&rx);
                    let ready = sel.ready_timeout(Duration::from_millis(50)).is_ok();
                    let Some(t) = weak.upgrade() else { break };
                    if t.shutdown.load(Ordering::Acquire) {
                        break;
                    }
                    if ready {
                        let _guard = t.progress_lock.lock();
                        t.drain();
                    }
                }
            })
            .map_err(|e| Error::Io(e.to_string()))
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn nranks(&self) -> u32 {
        self.nranks
    }

    fn next_id(&self) -> u64 {
        self.next_msg_id.fetch_add(1, Ordering::Relaxed)
    }

    fn handle(self: &Arc<Self>, op: Arc<OpState>) -> CompletionHandle {
        let driver: Arc<dyn ProgressDriver> = self.clone();
        CompletionHandle::new(op, Some(driver))
    }

    fn check_peer(&self, peer: u32) -> Result<()> {
        if self.shutdown.load(Ordering::Acquire) {
            return Err(Error::Finalized);
        }
        if peer >= self.nranks {
            return Err(Error::UnknownEndpoint {
                rank: peer,
                device: 0,
            });
        }
        if self.failed_peers.lock().contains(&peer) {
            return Err(Error::TransportFailure(format!(
                "rank {peer} is no longer reachable"
            )));
        }
        Ok(())
    }

    fn send(&self, msg: WireMessage) -> Result<()> {
        let peer = msg.header.dst_rank;
        let opcode = msg.header.opcode;
        let payload_len = msg.payload.len() as u64;
        let link = self
            .links
            .get(peer as usize)
            .ok_or(Error::UnknownEndpoint {
                rank: peer,
                device: 0,
            })?;
        let closed = || Error::TransportFailure(format!("queue of rank {peer} is closed"));
        match link {
            Link::Loopback => self
                .inbound_tx
                .send(Inbound::Frame(msg))
                .map_err(|_| closed())?,
            Link::Memory(tx) => tx.send(Inbound::Frame(msg)).map_err(|_| closed())?,
            Link::Tcp(writer) => {
                let mut w = writer.lock();
                w.write_all(&msg.header.encode())
                    .map_err(|e| io_failure(peer, e))?;
                if !msg.payload.is_empty() {
                    w.write_all(&msg.payload).map_err(|e| io_failure(peer, e))?;
                }
            }
        }
        self.counters.sent[opcode.index()].fetch_add(1, Ordering::Relaxed);
        self.counters
            .payload_bytes_sent
            .fetch_add(payload_len, Ordering::Relaxed);
        Ok(())
    }

    fn request(&self, opcode: Opcode, msg_id: u64, target: GlobalAddress, length: u64) -> Header {
        Header {
            opcode,
            msg_id,
            src_rank: self.rank,
            dst_rank: target.rank,
            device: target.device,
            offset: target.offset,
            length,
        }
    }

    fn issue(&self, id: u64, fragment: Fragment, msg: WireMessage) -> Result<()> {
        let op = fragment.op.clone();
        self.pending.lock().insert(id, fragment);
        if let Err(e) = self.send(msg) {
            self.pending.lock().remove(&id);
            op.fail(e.clone());
            return Err(e);
        }
        Ok(())
    }

    /// Writes `data` into a remote segment, fragmenting at the configured cap.
    pub(crate) fn put(
        self: &Arc<Self>,
        dst: GlobalAddress,
        data: &[u8],
    ) -> Result<CompletionHandle> {
        self.check_peer(dst.rank)?;
        if data.is_empty() {
            return Ok(CompletionHandle::completed(self.next_id(), dst.rank));
        }
        let cap = self.options.fragment_bytes;
        let op = OpState::new(
            self.next_id(),
            dst.rank,
            (data.len() as u64).div_ceil(cap) as usize,
        );
        for (i, chunk) in data.chunks(cap as usize).enumerate() {
            let base = i as u64 * cap;
            let remote = dst.add(base);
            let id = self.next_id();
            let msg = WireMessage::new(self.request(Opcode::Put, id, remote, 0), chunk.to_vec());
            let fragment = Fragment {
                op: op.clone(),
                sink: Sink::Ack,
                base,
                len: chunk.len() as u64,
                remote,
            };
            self.issue(id, fragment, msg)?;
            self.counters
                .rma_put_bytes
                .fetch_add(chunk.len() as u64, Ordering::Relaxed);
        }
        op.mark_local_done();
        Ok(self.handle(op))
    }

    /// Reads `len` remote bytes into a host buffer (retrieved with
    /// `take_bytes`) or into a local device address.
    pub(crate) fn get(
        self: &Arc<Self>,
        src: GlobalAddress,
        len: u64,
        local: Option<GlobalAddress>,
    ) -> Result<CompletionHandle> {
        self.check_peer(src.rank)?;
        if len == 0 {
            let done = CompletionHandle::completed(self.next_id(), src.rank);
            return Ok(done);
        }
        let cap = self.options.fragment_bytes;
        let op = OpState::new(self.next_id(), src.rank, len.div_ceil(cap) as usize);
        if local.is_none() {
            op.with_data(|d| *d = Some(vec![0u8; len as usize]));
        }
        let mut base = 0;
        while base < len {
            let n = cap.min(len - base);
            let remote = src.add(base);
            let id = self.next_id();
            let sink = match local {
                Some(addr) => Sink::Device(addr),
                None => Sink::Host,
            };
            let msg = WireMessage::new(self.request(Opcode::GetReq, id, remote, n), Vec::new());
            let fragment = Fragment {
                op: op.clone(),
                sink,
                base,
                len: n,
                remote,
            };
            self.issue(id, fragment, msg)?;
            base += n;
        }
        op.mark_local_done();
        Ok(self.handle(op))
    }

    /// Fetches the 32 raw bytes of a remote indirection cell.
    pub(crate) fn cell_fetch(self: &Arc<Self>, cell: GlobalAddress) -> Result<CompletionHandle> {
        self.check_peer(cell.rank)?;
        let op = OpState::new(self.next_id(), cell.rank, 1);
        let id = self.next_id();
        let msg = WireMessage::new(
            self.request(Opcode::CellFetch, id, cell, CELL_BYTES),
            Vec::new(),
        );
        let fragment = Fragment {
            op: op.clone(),
            sink: Sink::Cell,
            base: 0,
            len: CELL_BYTES,
            remote: cell,
        };
        self.issue(id, fragment, msg)?;
        op.mark_local_done();
        Ok(self.handle(op))
    }

    /// Deposits `payload` in `dst_rank`'s mailbox under `tag`; the handle
    /// completes when the target acknowledges it.
    pub(crate) fn send_staged(
        self: &Arc<Self>,
        dst_rank: u32,
        tag: u64,
        payload: Vec<u8>,
    ) -> Result<CompletionHandle> {
        self.check_peer(dst_rank)?;
        if payload.len() as u64 > self.options.fragment_bytes {
            return Err(Error::OversizedFrame(payload.len() as u64));
        }
        let op = OpState::new(self.next_id(), dst_rank, 1);
        let id = self.next_id();
        let target = GlobalAddress::new(dst_rank, STAGING_DEVICE, tag);
        let len = payload.len() as u64;
        let msg = WireMessage::new(self.request(Opcode::Put, id, target, 0), payload);
        let fragment = Fragment {
            op: op.clone(),
            sink: Sink::Ack,
            base: 0,
            len,
            remote: target,
        };
        self.issue(id, fragment, msg)?;
        op.mark_local_done();
        Ok(self.handle(op))
    }

    /// Fire-and-forget control message (`BARRIER` or `BOOTSTRAP`).
    pub(crate) fn notify(
        &self,
        dst_rank: u32,
        opcode: Opcode,
        tag: u64,
        payload: Vec<u8>,
    ) -> Result<()> {
        debug_assert!(matches!(opcode, Opcode::Barrier | Opcode::Bootstrap));
        self.check_peer(dst_rank)?;
        let header = Header {
            opcode,
            msg_id: self.next_id(),
            src_rank: self.rank,
            dst_rank,
            device: 0,
            offset: tag,
            length: 0,
        };
        self.send(WireMessage::new(header, payload))
    }

    fn take_mail(&self, src: u32, tag: u64) -> Option<Vec<u8>> {
        let mut mb = self.mailbox.lock();
        let queue = mb.get_mut(&(src, tag))?;
        let item = queue.pop_front();
        if queue.is_empty() {
            mb.remove(&(src, tag));
        }
        item
    }

    /// Blocks until a mailbox message from `src` under `tag` arrives.
    pub(crate) fn recv(&self, src: u32, tag: u64, timeout: Duration) -> Result<Vec<u8>> {
        let deadline = Instant::now() + timeout;
        let mut backoff = Backoff::new();
        loop {
            if let Some(bytes) = self.take_mail(src, tag) {
                return Ok(bytes);
            }
            if self.failed_peers.lock().contains(&src) {
                return Err(Error::PeerFailure(format!(
                    "rank {src} closed its connection"
                )));
            }
            let handled = self.progress()?;
            if self.mailbox.lock().contains_key(&(src, tag)) {
                continue;
            }
            if Instant::now() >= deadline {
                return Err(Error::HandshakeTimeout(format!(
                    "rank {} waited {:?} for tag {tag:#018x} from rank {src}",
                    self.rank, timeout
                )));
            }
            if handled == 0 {
                self.idle_wait(backoff.next());
            } else {
                backoff.reset();
            }
        }
    }

    /// Drains the inbound queue. Returns the number of frames handled, or 0
    /// if another flow is already draining.
    pub fn progress(&self) -> Result<usize> {
        if self.shutdown.load(Ordering::Acquire) {
            return Err(Error::Finalized);
        }
        match self.progress_lock.try_lock() {
            Some(_guard) => Ok(self.drain()),
            None => Ok(0),
        }
    }

    fn drain(&self) -> usize {
        let mut handled = 0;
        while let Ok(item) = self.inbound_rx.try_recv() {
            self.dispatch(item);
            handled += 1;
        }
        if handled > 0 {
            self.wake();
        }
        handled
    }

    fn wake(&self) {
        *self.activity.lock() += 1;
        self.activity_cv.notify_all();
    }

    pub(crate) fn idle_wait(&self, max: Duration) {
        let mut seen = self.activity.lock();
        self.activity_cv.wait_for(&mut seen, max);
    }

    fn dispatch(&self, item: Inbound) {
        let msg = match item {
            Inbound::Frame(msg) => msg,
            Inbound::Closed(peer) => return self.peer_closed(peer),
        };
        let h = msg.header;
        self.counters.received[h.opcode.index()].fetch_add(1, Ordering::Relaxed);
        match h.opcode {
            Opcode::Put => {
                let status = if h.device == STAGING_DEVICE {
                    self.deposit(h.src_rank, h.offset, msg.payload);
                    Status::Ok
                } else {
                    match self
                        .memory
                        .segment(h.device)
                        .and_then(|s| s.write(h.offset, &msg.payload))
                    {
                        Ok(()) => Status::Ok,
                        Err(_) => Status::InvalidAddress,
                    }
                };
                self.count_served();
                self.reply(&h, Opcode::Ack, status, Vec::new());
            }
            Opcode::GetReq => {
                let read = self
                    .memory
                    .segment(h.device)
                    .and_then(|s| s.read_vec(h.offset, h.length));
                self.count_served();
                match read {
                    Ok(bytes) => self.reply(&h, Opcode::GetResp, Status::Ok, bytes),
                    Err(_) => self.reply(&h, Opcode::GetResp, Status::InvalidAddress, Vec::new()),
                }
            }
            Opcode::CellFetch => {
                let read =
                    self.memory
                        .segment(h.device)
                        .ok()
                        .and_then(|s| match s.record_at(h.offset) {
                            Some((_, RecordRole::Cell)) => s.read_vec(h.offset, CELL_BYTES).ok(),
                            _ => None,
                        });
                self.count_served();
                match read {
                    Some(bytes) => self.reply(&h, Opcode::GetResp, Status::Ok, bytes),
                    None => self.reply(&h, Opcode::GetResp, Status::StaleCell, Vec::new()),
                }
            }
            Opcode::GetResp | Opcode::Ack => self.retire(&h, msg.payload),
            Opcode::Barrier | Opcode::Bootstrap => self.deposit(h.src_rank, h.offset, msg.payload),
        }
    }

    fn count_served(&self) {
        let counter = if IN_PROGRESS_THREAD.with(|f| f.get()) {
            &self.counters.served_by_progress_thread
        } else {
            &self.counters.served_by_caller
        };
        counter.fetch_add(1, Ordering::Relaxed);
    }

    fn deposit(&self, src: u32, tag: u64, payload: Vec<u8>) {
        self.mailbox
            .lock()
            .entry((src, tag))
            .or_default()
            .push_back(payload);
    }

    fn reply(&self, req: &Header, opcode: Opcode, status: Status, payload: Vec<u8>) {
        let header = Header {
            opcode,
            msg_id: req.msg_id,
            src_rank: self.rank,
            dst_rank: req.src_rank,
            device: req.device,
            offset: status as u64,
            length: 0,
        };
        if let Err(e) = self.send(WireMessage::new(header, payload)) {
            log::warn!(
                "rank {}: reply to rank {} lost: {e}",
                self.rank,
                req.src_rank
            );
        }
    }

    fn retire(&self, h: &Header, payload: Vec<u8>) {
        let Some(fragment) = self.pending.lock().remove(&h.msg_id) else {
            log::debug!("rank {}: reply for unknown msg {}", self.rank, h.msg_id);
            return;
        };
        self.counters
            .retired_fragments
            .fetch_add(1, Ordering::Relaxed);
        let op = &fragment.op;
        match Status::from_u64(h.offset) {
            Status::Ok => {}
            Status::InvalidAddress => {
                return op.fail(Error::InvalidAddress {
                    addr: fragment.remote,
                    len: fragment.len,
                })
            }
            Status::StaleCell => return op.fail(Error::StaleCell(fragment.remote)),
        }
        if h.opcode == Opcode::GetResp {
            if payload.len() as u64 != fragment.len {
                return op.fail(Error::TruncatedFrame {
                    needed: fragment.len,
                    available: payload.len() as u64,
                });
            }
            if !matches!(fragment.sink, Sink::Cell) {
                self.counters
                    .rma_get_bytes
                    .fetch_add(payload.len() as u64, Ordering::Relaxed);
            }
        }
        let base = fragment.base as usize;
        match fragment.sink {
            Sink::Ack => {}
            Sink::Host => op.with_data(|d| {
                if let Some(buf) = d.as_mut() {
                    buf[base..base + payload.len()].copy_from_slice(&payload);
                }
            }),
            Sink::Device(dst) => {
                if let Err(e) = self.memory.write(dst.add(fragment.base), &payload) {
                    return op.fail(e);
                }
            }
            Sink::Cell => op.with_data(|d| *d = Some(payload)),
        }
        op.fragment_done();
    }

    fn peer_closed(&self, peer: u32) {
        if self.shutdown.load(Ordering::Acquire) {
            return;
        }
        log::debug!("rank {}: link to rank {peer} closed", self.rank);
        self.failed_peers.lock().insert(peer);
        let mut pending = self.pending.lock();
        let dead: Vec<u64> = pending
            .iter()
            .filter(|(_, f)| f.op.target_rank() == peer)
            .map(|(&id, _)| id)
            .collect();
        for id in dead {
            if let Some(f) = pending.remove(&id) {
                f.op.fail(Error::TransportFailure(format!(
                    "rank {peer} closed its connection with message {id} outstanding"
                )));
            }
        }
    }

    /// Number of fragments still awaiting a reply.
    pub fn outstanding(&self) -> usize {
        self.pending.lock().len()
    }

    pub fn stats(&self) -> TransportStats {
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let c = &self.counters;
        TransportStats {
            sent: std::array::from_fn(|i| load(&c.sent[i])),
            received: std::array::from_fn(|i| load(&c.received[i])),
            payload_bytes_sent: load(&c.payload_bytes_sent),
            rma_put_bytes: load(&c.rma_put_bytes),
            rma_get_bytes: load(&c.rma_get_bytes),
            served_by_progress_thread: load(&c.served_by_progress_thread),
            served_by_caller: load(&c.served_by_caller),
            retired_fragments: load(&c.retired_fragments),
        }
    }

    /// Closes every link and joins the helper threads. Idempotent.
    pub(crate) fn shutdown(&self) {
        if self.shutdown.swap(true, Ordering::AcqRel) {
            return;
        }
        for link in &self.links {
            if let Link::Memory(tx) = link {
                let _ = tx.send(Inbound::Closed(self.rank));
            }
        }
        for s in &self.sockets {
            let _ = s.shutdown(Shutdown::Both);
        }
        let threads = std::mem::take(&mut *self.threads.lock());
        let me = thread::current().id();
        for t in threads {
            if t.thread().id() != me {
                let _ = t.join();
            }
        }
        let mut pending = self.pending.lock();
        for (_, f) in pending.drain() {
            f.op.fail(Error::Finalized);
        }
    }
}

impl ProgressDriver for Transport {
    fn drive(&self) -> Result<usize> {
        self.progress()
    }

    fn idle_wait(&self, max: Duration) {
        Transport::idle_wait(self, max)
    }

    fn default_timeout(&self) -> Duration {
        self.options.timeout
    }
}

impl Drop for Transport {
    fn drop(&mut self) {
        self.shutdown();
    }
}
