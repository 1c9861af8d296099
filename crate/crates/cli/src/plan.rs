//! Command-line surface and the validated run plan built from it.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use diomp::apps::{BenchKind, BenchSpec, HaloMode, MatmulSpec, StencilSpec};
use diomp::config::{block_node_map, DEFAULT_SEGMENT_BYTES, MIB};
use diomp::{AllocatorKind, TransportKind};

#[derive(Debug, Parser)]
#[command(name = "diomp", version, about = "Launch and drive multi-process diomp runs on one host")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Spawn one process per rank and run an experiment.
    Run(RunArgs),
    /// Per-rank entry point used by `run`.
    #[command(hide = true)]
    Worker {
        #[command(subcommand)]
        experiment: Experiment,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Number of ranks (processes).
    #[arg(short = 'n', long = "nranks", default_value_t = 1)]
    pub nranks: u32,
    /// Simulated devices per rank.
    #[arg(long, default_value_t = 1)]
    pub devices: u16,
    /// Spread ranks over this many simulated nodes in contiguous blocks.
    #[arg(long, conflicts_with = "node_map")]
    pub nodes: Option<u32>,
    /// Explicit node id per rank, e.g. `0,0,1,1`.
    #[arg(long, value_delimiter = ',')]
    pub node_map: Option<Vec<u32>>,
    #[arg(long, value_enum, default_value_t = TransportArg::Tcp)]
    pub transport: TransportArg,
    /// Device segment size in bytes (power of two); sized from the experiment when omitted.
    #[arg(long)]
    pub segment_bytes: Option<u64>,
    #[arg(long, value_enum, default_value_t = AllocatorArg::Buddy)]
    pub allocator: AllocatorArg,
    /// Artificial latency added to every stream task, in microseconds.
    #[arg(long, default_value_t = 0)]
    pub sim_task_us: u64,
    #[arg(long)]
    pub max_active_streams: Option<usize>,
    /// Write the merged CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Wall-clock limit for the whole run, in seconds.
    #[arg(long, default_value_t = 300)]
    pub timeout: u64,
    /// Earlier CSV to compare against; adds a log10_ratio column.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[command(subcommand)]
    pub experiment: Experiment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportArg {
    Tcp,
    Shm,
}

impl From<TransportArg> for TransportKind {
    fn from(t: TransportArg) -> Self {
        match t {
            TransportArg::Tcp => TransportKind::Tcp,
            TransportArg::Shm => TransportKind::Shm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AllocatorArg {
    Linear,
    Buddy,
}

impl From<AllocatorArg> for AllocatorKind {
    fn from(a: AllocatorArg) -> Self {
        match a {
            AllocatorArg::Linear => AllocatorKind::Linear,
            AllocatorArg::Buddy => AllocatorKind::Buddy,
        }
    }
}

#[derive(Debug, Clone, Subcommand)]
pub enum Experiment {
    /// Put/get latency or bandwidth between the first two endpoints.
    P2p(SweepArgs),
    /// Broadcast or allreduce latency over all endpoints.
    Collective(SweepArgs),
    /// Row-stripe Cannon multiplication over all endpoints.
    Matmul {
        #[arg(long, default_value_t = 240)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Finite-difference wave stencil with halo exchange.
    Stencil {
        /// Grid edge length (cube).
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        radius: usize,
        /// Use matched send/receive halos instead of puts.
        #[arg(long)]
        two_sided: bool,
        /// Write the final field as little-endian f64, x fastest.
        #[arg(long)]
        dump_field: Option<PathBuf>,
    },
    /// Check every runtime invariant in-process at small scale.
    Selftest,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// put_latency, get_latency, bandwidth (p2p) or bcast, allreduce (collective).
    #[arg(long)]
    pub kind: Option<String>,
    /// Comma-separated sizes in bytes; defaults depend on the sweep.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<u64>>,
    #[arg(long)]
    pub iters: Option<u32>,
    #[arg(long)]
    pub warmup: Option<u32>,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::P2p(_) => "p2p",
            Experiment::Collective(_) => "collective",
            Experiment::Matmul { .. } => "matmul",
            Experiment::Stencil { .. } => "stencil",
            Experiment::Selftest => "selftest",
        }
    }

    pub fn bench_spec(&self) -> Result<Option<BenchSpec>> {
        let (args, collective) = match self {
            Experiment::P2p(a) => (a, false),
            Experiment::Collective(a) => (a, true),
            _ => return Ok(None),
        };
        let kind: BenchKind = match &args.kind {
            Some(k) => k.parse()?,
            None if collective => BenchKind::Allreduce,
            None => BenchKind::PutLatency,
        };
        if kind.is_collective() != collective {
            bail!("{kind} does not belong to the {} sweep", self.name());
        }
        let mut spec = if collective {
            BenchSpec::collective(kind)
        } else {
            BenchSpec::p2p(kind)
        };
        if let Some(s) = &args.sizes {
            spec.sizes = s.clone();
        }
        if let Some(i) = args.iters {
            spec.iters = i;
        }
        if let Some(w) = args.warmup {
            spec.warmup = w;
        }
        spec.validate()?;
        Ok(Some(spec))
    }

    pub fn matmul_spec(&self) -> Option<MatmulSpec> {
        match *self {
            Experiment::Matmul { n, seed } => Some(MatmulSpec { seed, ..MatmulSpec::new(n) }),
            _ => None,
        }
    }

    pub fn stencil_spec(&self) -> Option<StencilSpec> {
        match *self {
            Experiment::Stencil { grid, steps, radius, two_sided, .. } => Some(StencilSpec {
                radius,
                halo: if two_sided { HaloMode::TwoSided } else { HaloMode::OneSided },
                ..StencilSpec::cube(grid, steps)
            }),
            _ => None,
        }
    }

    /// Symmetric bytes one device needs for this experiment.
    fn footprint(&self, endpoints: usize) -> Result<u64> {
        Ok(match self {
            Experiment::P2p(_) | Experiment::Collective(_) => {
                let spec = self.bench_spec()?.expect("sweep");
                // p2p keeps a source and a destination buffer.
                2 * spec.max_size()
            }
            Experiment::Matmul { n, .. } => {
                let stripe = (n.div_ceil(endpoints.max(1)) * n * 8) as u64;
                4 * stripe + MIB
            }
            Experiment::Stencil { grid, radius, .. } => {
                let width = grid.div_ceil(endpoints.max(1)) + 2 * radius;
                let plane = ((grid + 2 * radius) * (grid + 2 * radius) * 8) as u64;
                2 * width as u64 * plane
            }
            Experiment::Selftest => 0,
        })
    }
}

/// Everything the launcher needs, checked.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub nranks: u32,
    pub devices: u16,
    pub nodes: Vec<u32>,
    pub transport: TransportKind,
    pub segment_bytes: u64,
    pub allocator: AllocatorKind,
    pub sim_task_us: u64,
    pub max_active_streams: Option<usize>,
    pub out: Option<PathBuf>,
    pub timeout: Duration,
    pub baseline: Option<PathBuf>,
    pub experiment: Experiment,
}

impl RunPlan {
    pub fn from_args(a: RunArgs) -> Result<Self> {
        if a.nranks == 0 {
            bail!("-n must be at least 1");
        }
        if a.devices == 0 {
            bail!("--devices must be at least 1");
        }
        let nodes = match (&a.nodes, &a.node_map) {
            (Some(k), _) => {
                if *k == 0 || *k > a.nranks {
                    bail!("--nodes {k} must be between 1 and -n {}", a.nranks);
                }
                block_node_map(a.nranks, *k)
            }
            (None, Some(map)) => {
                if map.len() != a.nranks as usize {
                    bail!("--node-map lists {} ranks, -n is {}", map.len(), a.nranks);
                }
                map.clone()
            }
            (None, None) => vec![0; a.nranks as usize],
        };
        if a.timeout == 0 {
            bail!("--timeout must be positive");
        }
        a.experiment.bench_spec()?;
        let endpoints = a.nranks as usize * a.devices as usize;
        let segment_bytes = match a.segment_bytes {
            Some(b) => b,
            None => {
                // The symmetric heap is three quarters of the segment.
                let need = a.experiment.footprint(endpoints)? * 4 / 3 + MIB;
                need.next_power_of_two().max(DEFAULT_SEGMENT_BYTES)
            }
        };
        Ok(RunPlan {
            nranks: a.nranks,
            devices: a.devices,
            nodes,
            transport: a.transport.into(),
            segment_bytes,
            allocator: a.allocator.into(),
            sim_task_us: a.sim_task_us,
            max_active_streams: a.max_active_streams,
            out: a.out,
            timeout: Duration::from_secs(a.timeout),
            baseline: a.baseline,
            experiment: a.experiment,
        })
    }
}
