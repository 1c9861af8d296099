use std::fmt;
use std::sync::atomic::{AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::error::{Error, Result};

/// Network-side progress of one RMA operation.
///
/// Transitions are monotone: `Pending -> LocalDone -> RemoteDone`, or to
/// `Failed` from either non-terminal state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum CompletionState {
    Pending = 0,
    /// Source bytes have been captured; the caller may reuse its buffer.
    LocalDone = 1,
    /// The target has applied (put) or served (get) every fragment.
    RemoteDone = 2,
    Failed = 3,
}

impl CompletionState {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => CompletionState::Pending,
            1 => CompletionState::LocalDone,
            2 => CompletionState::RemoteDone,
            _ => CompletionState::Failed,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, CompletionState::RemoteDone | CompletionState::Failed)
    }
}

pub(crate) struct OpState {
    id: u64,
    target_rank: u32,
    state: AtomicU8,
    remaining: AtomicUsize,
    error: Mutex<Option<Error>>,
    data: Mutex<Option<Vec<u8>>>,
    issued_at: Instant,
    completed_at: OnceLock<Instant>,
}

impl fmt::Debug for OpState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpState")
            .field("id", &self.id)
            .field("target_rank", &self.target_rank)
            .field("state", &self.state())
            .finish()
    }
}

impl OpState {
    pub(crate) fn new(id: u64, target_rank: u32, fragments: usize) -> Arc<Self> {
        Arc::new(OpState {
            id,
            target_rank,
            state: AtomicU8::new(CompletionState::Pending as u8),
            remaining: AtomicUsize::new(fragments),
            error: Mutex::new(None),
            data: Mutex::new(None),
            issued_at: Instant::now(),
            completed_at: OnceLock::new(),
        })
    }

    pub(crate) fn target_rank(&self) -> u32 {
        self.target_rank
    }

    pub(crate) fn state(&self) -> CompletionState {
        CompletionState::from_u8(self.state.load(Ordering::Acquire))
    }

    fn advance(&self, next: CompletionState) -> bool {
        let mut cur = self.state.load(Ordering::Acquire);
        loop {
            let current = CompletionState::from_u8(cur);
            if current.is_terminal() || next <= current {
                return false;
            }
            match self.state.compare_exchange_weak(
                cur,
                next as u8,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => {
                    if next.is_terminal() {
                        let _ = self.completed_at.set(Instant::now());
                    }
                    return true;
                }
                Err(actual) => cur = actual,
            }
        }
    }

    pub(crate) fn mark_local_done(&self) {
        self.advance(CompletionState::LocalDone);
    }

    /// Retires one fragment; returns true if it was the last one.
    pub(crate) fn fragment_done(&self) -> bool {
        if self.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.advance(CompletionState::LocalDone);
            self.advance(CompletionState::RemoteDone)
        } else {
            false
        }
    }

    pub(crate) fn complete(&self) {
        self.remaining.store(0, Ordering::Release);
        self.advance(CompletionState::LocalDone);
        self.advance(CompletionState::RemoteDone);
    }

    pub(crate) fn fail(&self, err: Error) {
        let mut slot = self.error.lock();
        if slot.is_none() {
            *slot = Some(err);
        }
        drop(slot);
        self.advance(CompletionState::Failed);
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&mut Option<Vec<u8>>) -> R) -> R {
        f(&mut self.data.lock())
    }
}

/// Something that can drive inbound traffic while a caller waits.
pub(crate) trait ProgressDriver: Send + Sync {
    fn drive(&self) -> Result<usize>;
    fn idle_wait(&self, max: Duration);
    fn default_timeout(&self) -> Duration;
}

/// Caller-side view of an in-flight put or get.
#[derive(Clone)]
pub struct CompletionHandle {
    op: Arc<OpState>,
    driver: Option<Arc<dyn ProgressDriver>>,
}

impl fmt::Debug for CompletionHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompletionHandle")
            .field("msg_id", &self.op.id)
            .field("state", &self.op.state())
            .finish()
    }
}

impl CompletionHandle {
    pub(crate) fn new(op: Arc<OpState>, driver: Option<Arc<dyn ProgressDriver>>) -> Self {
        CompletionHandle { op, driver }
    }

    /// A handle that is already remotely complete (empty or local transfers).
    pub(crate) fn completed(id: u64, target_rank: u32) -> Self {
        let op = OpState::new(id, target_rank, 0);
        op.complete();
        CompletionHandle { op, driver: None }
    }

    /// A completed handle that already holds get results.
    pub(crate) fn completed_with(id: u64, target_rank: u32, bytes: Vec<u8>) -> Self {
        let handle = Self::completed(id, target_rank);
        handle.op.with_data(|d| *d = Some(bytes));
        handle
    }

    pub fn msg_id(&self) -> u64 {
        self.op.id
    }

    pub fn target_rank(&self) -> u32 {
        self.op.target_rank
    }

    pub fn state(&self) -> CompletionState {
        self.op.state()
    }

    pub fn is_done(&self) -> bool {
        self.op.state().is_terminal()
    }

    pub fn error(&self) -> Option<Error> {
        self.op.error.lock().clone()
    }

    pub fn issued_at(&self) -> Instant {
        self.op.issued_at
    }

    pub fn completed_at(&self) -> Option<Instant> {
        self.op.completed_at.get().copied()
    }

    /// Result of a completed host-destination get.
    pub fn take_bytes(&self) -> Option<Vec<u8>> {
        self.op.data.lock().take()
    }

    /// `Ok` once remotely complete, the recorded error if the operation failed.
    pub fn result(&self) -> Option<Result<()>> {
        match self.state() {
            CompletionState::RemoteDone => Some(Ok(())),
            CompletionState::Failed => Some(Err(self
                .error()
                .unwrap_or_else(|| Error::TransportFailure("operation failed".into())))),
            _ => None,
        }
    }

    /// Blocks (driving progress) until the operation is terminal.
    pub fn wait(&self) -> Result<()> {
        let timeout = self
            .driver
            .as_ref()
            .map(|d| d.default_timeout())
            .unwrap_or(Duration::from_secs(60));
        self.wait_timeout(timeout)
    }

    pub fn wait_timeout(&self, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        let mut backoff = Backoff::new();
        loop {
            if let Some(result) = self.result() {
                return result;
            }
            let progressed = match &self.driver {
                Some(d) => d.drive()?,
                None => 0,
            };
            if let Some(result) = self.result() {
                return result;
            }
            if Instant::now() >= deadline {
                return Err(Error::TransportFailure(format!(
                    "operation {} to rank {} did not complete within {:?}",
                    self.op.id, self.op.target_rank, timeout
                )));
            }
            if progressed == 0 {
                match &self.driver {
                    Some(d) => d.idle_wait(backoff.next()),
                    None => std::thread::sleep(backoff.next()),
                }
            } else {
                backoff.reset();
            }
        }
    }
}

/// Escalating idle interval for polling loops.
#[derive(Debug)]
pub(crate) struct Backoff {
    step: u32,
}

impl Backoff {
    pub(crate) fn new() -> Self {
        Backoff { step: 0 }
    }

    pub(crate) fn reset(&mut self) {
        self.step = 0;
    }

    pub(crate) fn next(&mut self) -> Duration {
        let us = match self.step {
            0..=3 => 20,
            4..=15 => 100,
            _ => 1000,
        };
        self.step = self.step.saturating_add(1);
        Duration::from_micros(us)
    }
}
