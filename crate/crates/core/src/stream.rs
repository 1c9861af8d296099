//! Simulated device streams and the bounded per-device stream pool.
//!
//! Streams are created lazily and recycled. A pool never holds more than
//! `max_active` streams in the active set; when an acquire would exceed the
//! bound, half of the completed active streams (at least one) are
//! synchronized and moved back to the idle list.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Sender};
use parking_lot::{Condvar, Mutex};

use crate::error::{Error, Result};

/// Unit of device work. Runs on the stream's worker in submission order.
pub type Task = Box<dyn FnOnce() -> Result<()> + Send + 'static>;

#[derive(Default)]
struct Progress {
    completed: u64,
    errors: BTreeMap<u64, Error>,
}

struct StreamCore {
    id: u64,
    device: u16,
    sim_latency: Duration,
    submitted: AtomicU64,
    lease: AtomicU64,
    progress: Mutex<Progress>,
    done_cv: Condvar,
    queue: Mutex<Option<Sender<(u64, Task)>>>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl StreamCore {
    fn new(id: u64, device: u16, sim_latency: Duration) -> Arc<Self> {
        Arc::new(StreamCore {
            id,
            device,
            sim_latency,
            submitted: AtomicU64::new(0),
            lease: AtomicU64::new(0),
            progress: Mutex::new(Progress::default()),
            done_cv: Condvar::new(),
            queue: Mutex::new(None),
            worker: Mutex::new(None),
        })
    }

    fn completed(&self) -> u64 {
        self.progress.lock().completed
    }

    /// All work submitted so far has retired.
    fn is_drained(&self) -> bool {
        self.completed() >= self.submitted.load(Ordering::Acquire)
    }

    fn wait_for(&self, seq: u64, timeout: Option<Duration>) -> bool {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut p = self.progress.lock();
        while p.completed < seq {
            match deadline {
                Some(d) => {
                    if self.done_cv.wait_until(&mut p, d).timed_out() && p.completed < seq {
                        return false;
                    }
                }
                None => self.done_cv.wait(&mut p),
            }
        }
        true
    }

    fn wait_drained(&self) {
        loop {
            let target = self.submitted.load(Ordering::Acquire);
            self.wait_for(target, None);
            if self.submitted.load(Ordering::Acquire) == target {
                return;
            }
        }
    }

    fn enqueue(self: &Arc<Self>, task: Task) -> Result<u64> {
        let mut queue = self.queue.lock();
        if queue.is_none() {
            let (tx, rx) = unbounded::<(u64, Task)>();
            let core = Arc::clone(self);
            let handle = thread::Builder::new()
                .name(format!("diomp-stream-{:#x}", self.id))
                .spawn(move || {
                    for (seq, task) in rx {
                        if !core.sim_latency.is_zero() {
                            thread::sleep(core.sim_latency);
                        }
                        let outcome = task();
                        let mut p = core.progress.lock();
                        if let Err(e) = outcome {
                            p.errors.insert(seq, e);
                        }
                        p.completed = seq;
                        drop(p);
                        core.done_cv.notify_all();
                    }
                })
                .map_err(|e| Error::Io(e.to_string()))?;
            *queue = Some(tx);
            *self.worker.lock() = Some(handle);
        }
        let seq = self.submitted.fetch_add(1, Ordering::AcqRel) + 1;
        queue
            .as_ref()
            .expect("queue created above")
            .send((seq, task))
            .map_err(|_| Error::StreamClosed(self.id))?;
        Ok(seq)
    }

    fn close(&self) {
        self.queue.lock().take();
        let worker = self.worker.lock().take();
        if let Some(w) = worker {
            if w.thread().id() != thread::current().id() {
                let _ = w.join();
            }
        }
    }
}

/// Completion marker for one task on one stream.
#[derive(Clone)]
pub struct StreamEvent {
    stream_id: u64,
    seq: u64,
    core: Arc<StreamCore>,
}

impl fmt::Debug for StreamEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StreamEvent")
            .field("stream_id", &format_args!("{:#x}", self.stream_id))
            .field("seq", &self.seq)
            .field("completed", &self.is_complete())
            .finish()
    }
}

impl StreamEvent {
    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn is_complete(&self) -> bool {
        self.core.completed() >= self.seq
    }

    /// `None` while pending; the task's outcome once complete.
    pub fn result(&self) -> Option<Result<()>> {
        let p = self.core.progress.lock();
        if p.completed < self.seq {
            return None;
        }
        Some(match p.errors.get(&self.seq) {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        })
    }

    pub fn wait(&self) -> Result<()> {
        self.core.wait_for(self.seq, None);
        self.result().expect("event completed")
    }

    /// Returns false if the event is still pending after `timeout`.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        self.core.wait_for(self.seq, Some(timeout))
    }
}

/// One outcome of the bound-enforcement rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Enforcement {
    /// Active streams when the bound triggered.
    pub active: usize,
    /// Active streams whose work had retired at the snapshot.
    pub completed: usize,
    pub released: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub created: u64,
    pub acquires: u64,
    pub active: usize,
    pub idle: usize,
    pub max_active_observed: usize,
    pub enforcements: Vec<Enforcement>,
}

#[derive(Default)]
struct PoolState {
    idle: VecDeque<Arc<StreamCore>>,
    /// Activation order, oldest first.
    active: Vec<Arc<StreamCore>>,
    all: Vec<Arc<StreamCore>>,
    acquires: u64,
    max_active_observed: usize,
    enforcements: Vec<Enforcement>,
}

struct PoolShared {
    device: u16,
    max_active: usize,
    sim_latency: Duration,
    state: Mutex<PoolState>,
}

impl PoolShared {
    fn deactivate(&self, state: &mut PoolState, index: usize) -> Arc<StreamCore> {
        let core = state.active.remove(index);
        core.lease.fetch_add(1, Ordering::AcqRel);
        state.idle.push_back(core.clone());
        core
    }
}

impl Drop for PoolShared {
    fn drop(&mut self) {
        for core in self.state.get_mut().all.drain(..) {
            core.close();
        }
    }
}

/// Lease on an active stream. Becomes stale once the pool reclaims the
/// stream; submitting on a stale lease fails with `StreamClosed`.
pub struct Stream {
    core: Arc<StreamCore>,
    lease: u64,
    pool: Arc<PoolShared>,
}

impl fmt::Debug for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stream")
            .field("id", &format_args!("{:#x}", self.core.id))
            .field("lease", &self.lease)
            .finish()
    }
}

impl Stream {
    pub fn id(&self) -> u64 {
        self.core.id
    }

    pub fn device(&self) -> u16 {
        self.core.device
    }

    /// Whether this lease still owns the stream.
    pub fn is_active(&self) -> bool {
        self.core.lease.load(Ordering::Acquire) == self.lease
    }

    pub fn submit(&self, task: Task) -> Result<StreamEvent> {
        if !self.is_active() {
            return Err(Error::StreamClosed(self.core.id));
        }
        let seq = self.core.enqueue(task)?;
        Ok(StreamEvent {
            stream_id: self.core.id,
            seq,
            core: self.core.clone(),
        })
    }

    pub fn submit_fn(
        &self,
        f: impl FnOnce() -> Result<()> + Send + 'static,
    ) -> Result<StreamEvent> {
        self.submit(Box::new(f))
    }

    /// Waits for every task submitted so far.
    pub fn synchronize(&self) {
        self.core.wait_drained();
    }

    /// Returns the stream to the idle list.
    pub fn release(self) {
        let mut state = self.pool.state.lock();
        if self.is_active() {
            if let Some(i) = state.active.iter().position(|c| Arc::ptr_eq(c, &self.core)) {
                self.pool.deactivate(&mut state, i);
            }
        }
    }
}

/// Per-device stream pool with lazy creation, reuse and a bound on the
/// number of simultaneously active streams.
#[derive(Clone)]
pub struct StreamPool {
    shared: Arc<PoolShared>,
}

impl fmt::Debug for StreamPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StreamPool")
            .field("device", &self.shared.device)
            .field("max_active", &self.shared.max_active)
            .finish()
    }
}

impl StreamPool {
    pub fn new(device: u16, max_active: usize, sim_latency: Duration) -> Self {
        StreamPool {
            shared: Arc::new(PoolShared {
                device,
                max_active: max_active.max(1),
                sim_latency,
                state: Mutex::new(PoolState::default()),
            }),
        }
    }

    pub fn device(&self) -> u16 {
        self.shared.device
    }

    pub fn max_active(&self) -> usize {
        self.shared.max_active
    }

    /// Activates an idle stream, creating one if none is idle. Enforces the
    /// bound first when the active set is full.
    pub fn acquire(&self) -> Stream {
        let shared = &self.shared;
        loop {
            let mut state = shared.state.lock();
            if state.active.len() < shared.max_active {
                let core = match state.idle.pop_front() {
                    Some(core) => core,
                    None => {
                        let seq = state.all.len() as u64 + 1;
                        let id = ((shared.device as u64) << 32) | seq;
                        let core = StreamCore::new(id, shared.device, shared.sim_latency);
                        state.all.push(core.clone());
                        core
                    }
                };
                let lease = core.lease.fetch_add(1, Ordering::AcqRel) + 1;
                state.active.push(core.clone());
                state.acquires += 1;
                let n = state.active.len();
                assert!(n <= shared.max_active, "active streams exceed the bound");
                state.max_active_observed = state.max_active_observed.max(n);
                return Stream {
                    core,
                    lease,
                    pool: shared.clone(),
                };
            }
            drop(state);
            self.enforce_bound();
        }
    }

    /// Releases `max(1, ceil(completed / 2))` active streams, oldest
    /// completed first. With nothing completed, waits for the oldest active
    /// stream and releases it. Returns the number released.
    pub fn enforce_bound(&self) -> usize {
        let shared = &self.shared;
        let mut state = shared.state.lock();
        let active = state.active.len();
        let completed: Vec<usize> = (0..active)
            .filter(|&i| state.active[i].is_drained())
            .collect();
        if !completed.is_empty() {
            let release = completed.len().div_ceil(2);
            for &i in completed[..release].iter().rev() {
                shared.deactivate(&mut state, i);
            }
            state.enforcements.push(Enforcement {
                active,
                completed: completed.len(),
                released: release,
            });
            return release;
        }
        let Some(oldest) = state.active.first().cloned() else {
            return 0;
        };
        drop(state);
        oldest.wait_drained();
        let mut state = shared.state.lock();
        match state.active.iter().position(|c| Arc::ptr_eq(c, &oldest)) {
            Some(i) => {
                shared.deactivate(&mut state, i);
                state.enforcements.push(Enforcement {
                    active,
                    completed: 0,
                    released: 1,
                });
                1
            }
            None => 0,
        }
    }

    /// Waits for every task submitted before the call, then idles all streams.
    pub fn sync_all(&self) {
        let snapshot: Vec<(Arc<StreamCore>, u64)> = self
            .shared
            .state
            .lock()
            .all
            .iter()
            .map(|c| (c.clone(), c.submitted.load(Ordering::Acquire)))
            .collect();
        for (core, target) in &snapshot {
            core.wait_for(*target, None);
        }
        let mut state = self.shared.state.lock();
        while !state.active.is_empty() {
            let last = state.active.len() - 1;
            self.shared.deactivate(&mut state, last);
        }
    }

    pub fn stats(&self) -> PoolStats {
        let state = self.shared.state.lock();
        PoolStats {
            created: state.all.len() as u64,
            acquires: state.acquires,
            active: state.active.len(),
            idle: state.idle.len(),
            max_active_observed: state.max_active_observed,
            enforcements: state.enforcements.clone(),
        }
    }
}
