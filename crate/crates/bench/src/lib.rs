//! Fixtures for the criterion benchmarks: canned topologies and a timing
//! wrapper that runs a multi-rank job and reports the slowest rank.

use std::time::Duration;

use diomp::{run_local, AllocatorKind, LaunchConfig, PathKind, Result, Runtime, SegmentConfig, TransportKind};

const SEGMENT_BYTES: u64 = 16 << 20;

fn base(nranks: u32, devices: u16) -> LaunchConfig {
    LaunchConfig::new(nranks, devices)
        .with_segment(SegmentConfig::new(SEGMENT_BYTES, AllocatorKind::Buddy))
        .with_transport(TransportKind::Shm)
}

/// A job whose first two endpoints are joined by `path`.
pub fn pair_config(path: PathKind) -> LaunchConfig {
    match path {
        // Same device, same rank: the put is a local copy.
        PathKind::IntraProcess => base(1, 1),
        PathKind::PeerFabric => base(1, 2),
        PathKind::IntraNodeIPC => base(2, 1),
        PathKind::InterNode => base(2, 1).with_nodes(vec![0, 1]).with_transport(TransportKind::Tcp),
    }
}

/// `ranks` ranks with `devices` devices each, all on one node.
pub fn grid_config(ranks: u32, devices: u16) -> LaunchConfig {
    base(ranks, devices)
}

/// Runs `body` on every rank and returns the longest duration it reported.
///
/// `body` does its own setup and synchronization and times only the part
/// being measured.
pub fn timed<F>(config: LaunchConfig, body: F) -> Duration
where
    F: Fn(&Runtime) -> Result<Duration> + Sync,
{
    run_local(config, body)
        .expect("benchmark job failed")
        .into_iter()
        .max()
        .unwrap_or_default()
}
