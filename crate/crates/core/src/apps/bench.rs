//! Point-to-point and collective latency/bandwidth sweeps with CSV output.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;
use std::time::Instant;

use crate::collectives::{Communicator, DType, ReduceOp};
use crate::config::KIB;
use crate::error::{Error, Result};
use crate::memory::GlobalAddress;
use crate::runtime::{GetDst, LocalBuf, Runtime, TransferKind};
use crate::transport::PathKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchKind {
    PutLatency,
    GetLatency,
    Bandwidth,
    Bcast,
    Allreduce,
}

impl BenchKind {
    pub fn name(self) -> &'static str {
        match self {
            BenchKind::PutLatency => "put_latency",
            BenchKind::GetLatency => "get_latency",
            BenchKind::Bandwidth => "bandwidth",
            BenchKind::Bcast => "bcast",
            BenchKind::Allreduce => "allreduce",
        }
    }

    pub fn is_collective(self) -> bool {
        matches!(self, BenchKind::Bcast | BenchKind::Allreduce)
    }
}

impl fmt::Display for BenchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "put_latency" | "put" => BenchKind::PutLatency,
            "get_latency" | "get" => BenchKind::GetLatency,
            "bandwidth" | "bw" => BenchKind::Bandwidth,
            "bcast" => BenchKind::Bcast,
            "allreduce" => BenchKind::Allreduce,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown benchmark kind {other:?}"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchSpec {
    pub kind: BenchKind,
    pub sizes: Vec<u64>,
    pub iters: u32,
    pub warmup: u32,
}

/// `from, 2·from, 4·from, ...` up to and including `to`.
pub fn doubling(from: u64, to: u64) -> Vec<u64> {
    std::iter::successors(Some(from.max(1)), |s| s.checked_mul(2))
        .take_while(|&s| s <= to)
        .collect()
}

impl BenchSpec {
    /// Latency sweep from 4 bytes to 8 KiB.
    pub fn p2p(kind: BenchKind) -> Self {
        BenchSpec {
            kind,
            sizes: doubling(4, 8 * KIB),
            iters: 100,
            warmup: 10,
        }
    }

    /// 128 KiB to 64 MiB, 100 timed repetitions.
    pub fn collective(kind: BenchKind) -> Self {
        BenchSpec {
            kind,
            sizes: doubling(128 * KIB, 64 * KIB * KIB),
            iters: 100,
            warmup: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::InvalidConfig("iters must be >= 1".into()));
        }
        if self.sizes.is_empty() || self.sizes.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfig(
                "sizes must be non-empty and ascending".into(),
            ));
        }
        Ok(())
    }

    pub fn max_size(&self) -> u64 {
        self.sizes.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kind: BenchKind,
    pub size_bytes: u64,
    pub iters: u32,
    pub mean_us: f64,
    pub bw_mibs: f64,
    /// `log10(baseline / measured)` when a baseline row matched.
    pub log10_ratio: Option<f64>,
    /// Bytes this rank moved during the timed iterations.
    pub bytes_moved: u64,
}

impl BenchRow {
    fn new(kind: BenchKind, size: u64, iters: u32, total_secs: f64, bytes_moved: u64) -> Self {
        let mean = total_secs / iters as f64;
        BenchRow {
            kind,
            size_bytes: size,
            iters,
            mean_us: mean * 1e6,
            bw_mibs: if mean > 0.0 {
                size as f64 / (1024.0 * 1024.0) / mean
            } else {
                0.0
            },
            log10_ratio: None,
            bytes_moved,
        }
    }
}

pub const CSV_HEADER: &str = "kind,size_bytes,iters,mean_us,bw_MiBs";

pub fn write_csv<W: Write>(rows: &[BenchRow], mut out: W) -> io::Result<()> {
    let ratio = rows.iter().any(|r| r.log10_ratio.is_some());
    if ratio {
        writeln!(out, "{CSV_HEADER},log10_ratio")?;
    } else {
        writeln!(out, "{CSV_HEADER}")?;
    }
    for r in rows {
        write!(
            out,
            "{},{},{},{:.3},{:.3}",
            r.kind, r.size_bytes, r.iters, r.mean_us, r.bw_mibs
        )?;
        if ratio {
            match r.log10_ratio {
                Some(v) => write!(out, ",{v:.6}")?,
                None => write!(out, ",")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Mean latencies keyed by `(kind, size)` from a CSV in the format above.
pub fn read_baseline<R: BufRead>(input: R) -> Result<HashMap<(String, u64), f64>> {
    let mut out = HashMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("kind")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 4 {
            return Err(Error::InvalidConfig(format!(
                "baseline line {}: too few columns",
                i + 1
            )));
        }
        let bad = |what: &str| Error::InvalidConfig(format!("baseline line {}: bad {what}", i + 1));
        let size: u64 = cols[1].trim().parse().map_err(|_| bad("size_bytes"))?;
        let mean: f64 = cols[3].trim().parse().map_err(|_| bad("mean_us"))?;
        out.insert((cols[0].trim().to_string(), size), mean);
    }
    Ok(out)
}

pub fn apply_baseline(rows: &mut [BenchRow], baseline: &HashMap<(String, u64), f64>) {
    for r in rows {
        r.log10_ratio = baseline
            .get(&(r.kind.name().to_string(), r.size_bytes))
            .filter(|b| **b > 0.0 && r.mean_us > 0.0)
            .map(|b| (b / r.mean_us).log10());
    }
}

/// The two endpoints a point-to-point benchmark runs between: the first
/// two members of the world.
fn p2p_pair(rt: &Runtime) -> Result<(GlobalAddress, GlobalAddress)> {
    let world = rt.world();
    if world.len() < 2 {
        return Err(Error::InvalidConfig(
            "point-to-point benchmarks need 2 endpoints".into(),
        ));
    }
    let a = world.members()[0];
    let b = world.members()[1];
    Ok((
        GlobalAddress::new(a.rank, a.device, 0),
        GlobalAddress::new(b.rank, b.device, 0),
    ))
}

/// Puts (or gets) from the first world endpoint to the second. Rows are
/// returned on the issuing rank; other ranks return an empty list.
pub fn bench_p2p(rt: &Runtime, spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    if spec.kind.is_collective() {
        return Err(Error::InvalidConfig(format!(
            "{} is not a point-to-point benchmark",
            spec.kind
        )));
    }
    let (src_ep, dst_ep) = p2p_pair(rt)?;
    let max = spec.max_size();
    let world = rt.world();
    let bufs = rt.alloc_symmetric_all_devices(max)?;
    let offset = bufs[0].addr.offset;
    let src = src_ep.add(offset);
    let dst = dst_ep.add(offset);
    let mut rows = Vec::new();
    if rt.rank() == src.rank {
        let path = {
            let topo = rt.topology();
            topo.classify(
                &topo.endpoint(src.rank, src.device)?,
                &topo.endpoint(dst.rank, dst.device)?,
            )?
        };
        let payload: Vec<u8> = (0..max).map(|i| (i % 251) as u8).collect();
        for &size in &spec.sizes {
            let data = &payload[..size as usize];
            let one = |rt: &Runtime| -> Result<()> {
                match spec.kind {
                    BenchKind::PutLatency => {
                        rt.put(dst, LocalBuf::Host(data), TransferKind::H2D)?;
                        rt.fence(&world)
                    }
                    BenchKind::GetLatency => {
                        let h = rt.get(dst, size, GetDst::Device(src), TransferKind::D2D)?;
                        h.wait()
                    }
                    _ => unreachable!(),
                }
            };
            for _ in 0..spec.warmup {
                match spec.kind {
                    BenchKind::Bandwidth => {
                        rt.put(dst, LocalBuf::Host(data), TransferKind::H2D)?;
                        rt.fence(&world)?;
                    }
                    _ => one(rt)?,
                }
            }
            let before = rt.path_stats().bytes(path);
            let start = Instant::now();
            match spec.kind {
                BenchKind::Bandwidth => {
                    for _ in 0..spec.iters {
                        rt.put(dst, LocalBuf::Host(data), TransferKind::H2D)?;
                    }
                    rt.fence(&world)?;
                }
                _ => {
                    for _ in 0..spec.iters {
                        one(rt)?;
                    }
                }
            }
            let secs = start.elapsed().as_secs_f64();
            let moved = rt.path_stats().bytes(path) - before;
            rows.push(BenchRow::new(spec.kind, size, spec.iters, secs, moved));
        }
    }
    rt.barrier(&world)?;
    for b in &bufs {
        rt.free(b)?;
    }
    Ok(rows)
}

/// Times `spec.iters` back-to-back collectives per size after warm-up.
/// Every member returns the rows it measured.
pub fn bench_collective(
    rt: &Runtime,
    spec: &BenchSpec,
    comm: &Communicator,
) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    if !spec.kind.is_collective() {
        return Err(Error::InvalidConfig(format!(
            "{} is not a collective benchmark",
            spec.kind
        )));
    }
    if comm.size() < 2 {
        return Err(Error::InvalidConfig(
            "collective benchmarks need 2 endpoints".into(),
        ));
    }
    let g = comm.group().clone();
    let max = spec.max_size();
    let bufs = rt.alloc_symmetric_all_devices(max)?;
    let buf = bufs[0].addr;
    for b in &bufs {
        let fill: Vec<u8> = (0..max / 4)
            .flat_map(|i| ((i % 1000) as f32 * 0.5 + b.addr.device as f32).to_le_bytes())
            .collect();
        rt.write_local(b.addr, &fill)?;
    }
    let run = |size: u64| -> Result<()> {
        match spec.kind {
            BenchKind::Bcast => rt.bcast(comm, buf, size, 0),
            BenchKind::Allreduce => {
                rt.allreduce(comm, buf, buf, size / 4, DType::F32, ReduceOp::Max)
            }
            _ => unreachable!(),
        }
    };
    let mut rows = Vec::new();
    for &size in &spec.sizes {
        for _ in 0..spec.warmup {
            run(size)?;
        }
        rt.barrier(&g)?;
        let before = rt.transport_stats().payload_bytes_sent;
        let start = Instant::now();
        for _ in 0..spec.iters {
            run(size)?;
        }
        rt.barrier(&g)?;
        let secs = start.elapsed().as_secs_f64();
        let moved = rt.transport_stats().payload_bytes_sent - before;
        rows.push(BenchRow::new(spec.kind, size, spec.iters, secs, moved));
    }
    for b in &bufs {
        rt.free(b)?;
    }
    Ok(rows)
}

/// Path a point-to-point benchmark exercises under the current topology.
pub fn p2p_path(rt: &Runtime) -> Result<PathKind> {
    let (a, b) = p2p_pair(rt)?;
    let topo = rt.topology();
    topo.classify(
        &topo.endpoint(a.rank, a.device)?,
        &topo.endpoint(b.rank, b.device)?,
    )
}
