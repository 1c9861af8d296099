//! Launch and segment configuration, including the `DIOMP_*` environment
//! variables every rank reads at startup.

use std::env;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;

pub const DEFAULT_SEGMENT_BYTES: u64 = 64 * MIB;
pub const MIN_SEGMENT_BYTES: u64 = MIB;
pub const DEFAULT_ALIGNMENT: u64 = 64;
pub const MAX_ALIGNMENT: u64 = 4096;
pub const DEFAULT_MAX_ACTIVE_STREAMS: usize = 8;
/// Largest payload carried by one wire frame.
pub const MAX_FRAGMENT_BYTES: u64 = 64 * MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AllocatorKind {
    Linear,
    Buddy,
}

impl FromStr for AllocatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(AllocatorKind::Linear),
            "buddy" => Ok(AllocatorKind::Buddy),
            other => Err(Error::InvalidConfig(format!("unknown allocator `{other}`"))),
        }
    }
}

impl fmt::Display for AllocatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AllocatorKind::Linear => "linear",
            AllocatorKind::Buddy => "buddy",
        })
    }
}

/// Per-device segment layout shared by every rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub segment_bytes: u64,
    pub allocator: AllocatorKind,
    pub alignment: u64,
    /// Mutation hook for the self-test: makes allocations overlap their
    /// predecessor so the non-overlap audit has something to catch.
    #[doc(hidden)]
    #[serde(skip)]
    pub inject_overlap: bool,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            segment_bytes: DEFAULT_SEGMENT_BYTES,
            allocator: AllocatorKind::Buddy,
            alignment: DEFAULT_ALIGNMENT,
            inject_overlap: false,
        }
    }
}

impl SegmentConfig {
    pub fn new(segment_bytes: u64, allocator: AllocatorKind) -> Self {
        SegmentConfig {
            segment_bytes,
            allocator,
            ..Default::default()
        }
    }

    pub fn with_alignment(mut self, alignment: u64) -> Self {
        self.alignment = alignment;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_bytes < MIN_SEGMENT_BYTES || !self.segment_bytes.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "segment_bytes must be a power of two >= 1 MiB, got {}",
                self.segment_bytes
            )));
        }
        if !self.alignment.is_power_of_two() || self.alignment > MAX_ALIGNMENT {
            return Err(Error::InvalidConfig(format!(
                "alignment must be a power of two <= {MAX_ALIGNMENT}, got {}",
                self.alignment
            )));
        }
        Ok(())
    }

    /// Reads `DIOMP_SEGMENT_BYTES` and `DIOMP_ALLOCATOR`.
    pub fn from_env() -> Result<Self> {
        let mut cfg = SegmentConfig::default();
        if let Some(bytes) = env_parse::<u64>("DIOMP_SEGMENT_BYTES")? {
            cfg.segment_bytes = bytes;
        }
        if let Some(kind) = env_parse::<AllocatorKind>("DIOMP_ALLOCATOR")? {
            cfg.allocator = kind;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// How ranks on different simulated nodes reach each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransportKind {
    /// Stream sockets on the loopback interface.
    Tcp,
    /// In-memory frame queues; only meaningful when ranks share a process.
    Shm,
}

impl FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tcp" => Ok(TransportKind::Tcp),
            "shm" => Ok(TransportKind::Shm),
            other => Err(Error::InvalidConfig(format!("unknown transport `{other}`"))),
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::Tcp => "tcp",
            TransportKind::Shm => "shm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchConfig {
    pub nranks: u32,
    pub devices_per_rank: u16,
    /// Simulated node id of every rank, indexed by rank.
    pub nodes: Vec<u32>,
    pub segment: SegmentConfig,
    pub transport: TransportKind,
    pub max_active_streams: usize,
    /// Artificial latency added to every stream task.
    pub sim_task_latency: Duration,
    /// Whether distinct devices of one process can reach each other over the
    /// simulated peer fabric.
    pub peer_access: bool,
    /// Run a dedicated progress thread per rank.
    pub progress_thread: bool,
    /// Upper bound on any blocking wait before it is reported as a failure.
    pub timeout: Duration,
    /// Largest payload per wire frame; at most [`MAX_FRAGMENT_BYTES`].
    pub fragment_bytes: u64,
}

impl LaunchConfig {
    /// `nranks` ranks with `devices_per_rank` devices each, all on node 0.
    pub fn new(nranks: u32, devices_per_rank: u16) -> Self {
        LaunchConfig {
            nranks,
            devices_per_rank,
            nodes: vec![0; nranks as usize],
            segment: SegmentConfig::default(),
            transport: TransportKind::Shm,
            max_active_streams: DEFAULT_MAX_ACTIVE_STREAMS,
            sim_task_latency: Duration::ZERO,
            peer_access: true,
            progress_thread: true,
            timeout: Duration::from_secs(60),
            fragment_bytes: MAX_FRAGMENT_BYTES,
        }
    }

    /// Assigns ranks round-robin over `k` nodes in contiguous blocks, so
    /// `nranks = 4, k = 2` yields nodes `[0, 0, 1, 1]`.
    pub fn with_node_count(mut self, k: u32) -> Self {
        self.nodes = block_node_map(self.nranks, k);
        self
    }

    pub fn with_nodes(mut self, nodes: Vec<u32>) -> Self {
        self.nodes = nodes;
        self
    }

    pub fn with_segment(mut self, segment: SegmentConfig) -> Self {
        self.segment = segment;
        self
    }

    pub fn with_transport(mut self, transport: TransportKind) -> Self {
        self.transport = transport;
        self
    }

    pub fn with_max_active_streams(mut self, n: usize) -> Self {
        self.max_active_streams = n;
        self
    }

    pub fn with_sim_task_latency(mut self, latency: Duration) -> Self {
        self.sim_task_latency = latency;
        self
    }

    pub fn with_peer_access(mut self, enabled: bool) -> Self {
        self.peer_access = enabled;
        self
    }

    pub fn with_progress_thread(mut self, enabled: bool) -> Self {
        self.progress_thread = enabled;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_fragment_bytes(mut self, bytes: u64) -> Self {
        self.fragment_bytes = bytes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nranks == 0 {
            return Err(Error::InvalidConfig("nranks must be >= 1".into()));
        }
        if self.devices_per_rank == 0 {
            return Err(Error::InvalidConfig("devices_per_rank must be >= 1".into()));
        }
        if self.nodes.len() != self.nranks as usize {
            return Err(Error::InvalidConfig(format!(
                "node list has {} entries for {} ranks",
                self.nodes.len(),
                self.nranks
            )));
        }
        if self.max_active_streams == 0 {
            return Err(Error::InvalidConfig(
                "max_active_streams must be >= 1".into(),
            ));
        }
        if self.fragment_bytes == 0 || self.fragment_bytes > MAX_FRAGMENT_BYTES {
            return Err(Error::InvalidConfig(format!(
                "fragment size must be in 1..={MAX_FRAGMENT_BYTES}"
            )));
        }
        self.segment.validate()
    }

    /// Fields every rank must agree on, serialized for the init handshake.
    pub(crate) fn agreement_digest(&self) -> String {
        format!(
            "nranks={};devices={};segment={};allocator={};alignment={}",
            self.nranks,
            self.devices_per_rank,
            self.segment.segment_bytes,
            self.segment.allocator,
            self.segment.alignment
        )
    }
}

/// Contiguous block assignment of `nranks` ranks to `k` nodes.
pub fn block_node_map(nranks: u32, k: u32) -> Vec<u32> {
    let k = k.max(1) as u64;
    let n = nranks as u64;
    (0..n).map(|r| (r * k / n.max(1)) as u32).collect()
}

/// Environment settings shared by all ranks of a launched job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvSettings {
    pub segment: SegmentConfig,
    pub devices_per_rank: u16,
    pub transport: TransportKind,
    pub max_active_streams: usize,
    pub sim_task_latency: Duration,
}

impl EnvSettings {
    pub fn from_env() -> Result<Self> {
        Ok(EnvSettings {
            segment: SegmentConfig::from_env()?,
            devices_per_rank: env_parse("DIOMP_DEVICES_PER_RANK")?.unwrap_or(1),
            transport: env_parse("DIOMP_TRANSPORT")?.unwrap_or(TransportKind::Tcp),
            max_active_streams: env_parse("DIOMP_MAX_ACTIVE_STREAMS")?
                .unwrap_or(DEFAULT_MAX_ACTIVE_STREAMS),
            sim_task_latency: Duration::from_micros(env_parse("DIOMP_SIM_TASK_US")?.unwrap_or(0)),
        })
    }
}

pub(crate) fn env_parse<T: FromStr>(name: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    match env::var(name) {
        Ok(raw) if raw.trim().is_empty() => Ok(None),
        Ok(raw) => raw
            .trim()
            .parse::<T>()
            .map(Some)
            .map_err(|e| Error::InvalidConfig(format!("{name}={raw}: {e}"))),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_bounds() {
        assert!(SegmentConfig::new(MIB, AllocatorKind::Linear)
            .validate()
            .is_ok());
        assert!(SegmentConfig::new(MIB / 2, AllocatorKind::Linear)
            .validate()
            .is_err());
        assert!(SegmentConfig::new(3 * MIB, AllocatorKind::Buddy)
            .validate()
            .is_err());
        let bad_align = SegmentConfig::new(MIB, AllocatorKind::Buddy).with_alignment(8192);
        assert!(bad_align.validate().is_err());
        let odd_align = SegmentConfig::new(MIB, AllocatorKind::Buddy).with_alignment(48);
        assert!(odd_align.validate().is_err());
    }

    #[test]
    fn node_maps_are_contiguous_blocks() {
        assert_eq!(block_node_map(4, 2), vec![0, 0, 1, 1]);
        assert_eq!(block_node_map(4, 4), vec![0, 1, 2, 3]);
        assert_eq!(block_node_map(4, 1), vec![0, 0, 0, 0]);
        assert_eq!(block_node_map(5, 2), vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn launch_validation() {
        assert!(LaunchConfig::new(4, 1).validate().is_ok());
        assert!(LaunchConfig::new(0, 1).validate().is_err());
        assert!(LaunchConfig::new(2, 0).validate().is_err());
        assert!(LaunchConfig::new(2, 1)
            .with_nodes(vec![0])
            .validate()
            .is_err());
        assert!(LaunchConfig::new(2, 1)
            .with_fragment_bytes(MAX_FRAGMENT_BYTES + 1)
            .validate()
            .is_err());
    }

    #[test]
    fn parse_kinds() {
        assert_eq!(
            "Buddy".parse::<AllocatorKind>().unwrap(),
            AllocatorKind::Buddy
        );
        assert_eq!("shm".parse::<TransportKind>().unwrap(), TransportKind::Shm);
        assert!("rdma".parse::<TransportKind>().is_err());
    }
}
