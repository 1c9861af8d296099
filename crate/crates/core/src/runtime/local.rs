//! Bringing ranks up: all ranks as threads of one process, or one rank per
//! process joined through a rendezvous socket.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::panic;
use std::sync::Arc;

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::{ProcessSlot, Runtime};
use crate::config::{env_parse, LaunchConfig, TransportKind};
use crate::error::{Error, Result};
use crate::memory::LocalMemory;
use crate::transport::mesh::{build_mesh, rendezvous};
use crate::transport::{Inbound, LinkSpec, Transport, TransportOptions};

fn options(config: &LaunchConfig) -> TransportOptions {
    TransportOptions {
        fragment_bytes: config.fragment_bytes,
        timeout: config.timeout,
        progress_thread: config.progress_thread,
    }
}

fn wants_tcp(config: &LaunchConfig, a: u32, b: u32) -> bool {
    config.transport == TransportKind::Tcp && config.nodes[a as usize] != config.nodes[b as usize]
}

/// Errors from a failed job, most specific first: a rank that failed on
/// its own beats ranks that only saw the fallout.
fn error_rank(e: &Error) -> u8 {
    match e {
        Error::PeerFailure(_) => 2,
        Error::HandshakeTimeout(_) | Error::Finalized => 1,
        Error::TransportFailure(m)
            if m.contains("closed")
                || m.contains("did not complete")
                || m.contains("no longer reachable") =>
        {
            1
        }
        _ => 0,
    }
}

fn bring_up(
    rank: u32,
    config: LaunchConfig,
    channel: (Sender<Inbound>, Receiver<Inbound>),
    peers: &[Sender<Inbound>],
    mut sockets: HashMap<u32, TcpStream>,
) -> Result<Runtime> {
    let memory = Arc::new(LocalMemory::create(
        rank,
        config.devices_per_rank,
        &config.segment,
    )?);
    let specs = (0..config.nranks)
        .map(|p| {
            if p == rank {
                LinkSpec::Loopback
            } else if let Some(s) = sockets.remove(&p) {
                LinkSpec::Tcp(s)
            } else {
                LinkSpec::Memory(peers[p as usize].clone())
            }
        })
        .collect();
    let transport = Transport::start(rank, memory.clone(), channel, specs, options(&config))?;
    let node = config.nodes[rank as usize];
    Runtime::assemble(rank, config, node, memory, transport, None)
}

/// Runs `f` on `config.nranks` ranks, each a thread of this process, and
/// finalizes every rank afterwards. Returns the per-rank results in rank
/// order, or the most specific error any rank reported.
///
/// Pairs of ranks on different simulated nodes talk over loopback TCP when
/// `config.transport` is `Tcp`; every other pair uses in-memory queues.
pub fn run_local<T, F>(config: LaunchConfig, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Runtime) -> Result<T> + Sync,
{
    let n = config.nranks as usize;
    run_local_with(vec![config; n], f)
}

/// Like [`run_local`], with one configuration per rank. Ranks whose
/// configurations disagree fail during the init handshake.
pub fn run_local_with<T, F>(configs: Vec<LaunchConfig>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Runtime) -> Result<T> + Sync,
{
    let n = configs.len();
    if n == 0 {
        return Err(Error::InvalidConfig("no ranks to run".into()));
    }
    for c in &configs {
        c.validate()?;
        if c.nranks as usize != n {
            return Err(Error::InvalidConfig(format!(
                "{} configurations for a job of {} ranks",
                n, c.nranks
            )));
        }
    }
    let channels: Vec<_> = (0..n).map(|_| unbounded::<Inbound>()).collect();
    let senders: Vec<_> = channels.iter().map(|(tx, _)| tx.clone()).collect();
    let tcp_needed =
        (0..n as u32).any(|a| (0..n as u32).any(|b| wants_tcp(&configs[a as usize], a, b)));
    let listeners = if tcp_needed {
        (0..n)
            .map(|_| TcpListener::bind("127.0.0.1:0"))
            .collect::<std::io::Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let addrs: Vec<SocketAddr> = listeners
        .iter()
        .map(|l| l.local_addr())
        .collect::<std::io::Result<_>>()?;

    let outcomes: Vec<std::thread::Result<Result<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = channels
            .into_iter()
            .zip(configs)
            .enumerate()
            .map(|(r, (channel, config))| {
                let rank = r as u32;
                let senders = &senders;
                let listeners = &listeners;
                let addrs = &addrs;
                let f = &f;
                std::thread::Builder::new()
                    .name(format!("rank-{rank}"))
                    .spawn_scoped(scope, move || -> Result<T> {
                        let sockets = if listeners.is_empty() {
                            HashMap::new()
                        } else {
                            let cfg = &config;
                            build_mesh(
                                rank,
                                &listeners[r],
                                addrs,
                                |p| wants_tcp(cfg, rank, p),
                                config.timeout,
                            )?
                        };
                        let rt = bring_up(rank, config, channel, senders, sockets)?;
                        match f(&rt) {
                            Ok(v) => {
                                rt.finalize()?;
                                Ok(v)
                            }
                            Err(e) => {
                                log::debug!("rank {rank} failed: {e}");
                                rt.abort();
                                Err(e)
                            }
                        }
                    })
                    .expect("spawn rank thread")
            })
            .collect();
        handles.into_iter().map(|h| h.join()).collect()
    });
    drop(senders);

    let mut values = Vec::with_capacity(n);
    let mut errors = Vec::new();
    let mut panicked = None;
    for outcome in outcomes {
        match outcome {
            Ok(Ok(v)) => values.push(v),
            Ok(Err(e)) => errors.push(e),
            Err(p) => {
                panicked.get_or_insert(p);
            }
        }
    }
    if let Some(p) = panicked {
        panic::resume_unwind(p);
    }
    match errors.into_iter().min_by_key(error_rank) {
        Some(e) => Err(e),
        None => Ok(values),
    }
}

impl Runtime {
    /// Joins a job launched one rank per process.
    ///
    /// Reads `DIOMP_RANK`, `DIOMP_NRANKS`, `DIOMP_NODE_ID` and
    /// `DIOMP_RENDEZVOUS`; every rank dials every other over loopback TCP.
    /// Only one handle may be live per process.
    pub fn init(mut config: LaunchConfig) -> Result<Runtime> {
        let slot = ProcessSlot::claim()?;
        let rank: u32 = env_parse("DIOMP_RANK")?
            .ok_or_else(|| Error::InvalidConfig("DIOMP_RANK is not set".into()))?;
        let nranks: u32 = env_parse("DIOMP_NRANKS")?.unwrap_or(config.nranks);
        let node: u32 = env_parse("DIOMP_NODE_ID")?.unwrap_or(0);
        let rdv: String = env_parse("DIOMP_RENDEZVOUS")?
            .ok_or_else(|| Error::InvalidConfig("DIOMP_RENDEZVOUS is not set".into()))?;
        if rank >= nranks {
            return Err(Error::InvalidConfig(format!(
                "rank {rank} >= nranks {nranks}"
            )));
        }
        if config.nranks != nranks {
            config.nranks = nranks;
            config.nodes = vec![0; nranks as usize];
        }
        config.nodes[rank as usize] = node;
        config.validate()?;

        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addrs = rendezvous(rank, nranks, &rdv, listener.local_addr()?, config.timeout)?;
        let mut sockets = build_mesh(rank, &listener, &addrs, |p| p != rank, config.timeout)?;
        let channel = unbounded::<Inbound>();
        let memory = Arc::new(LocalMemory::create(
            rank,
            config.devices_per_rank,
            &config.segment,
        )?);
        let specs = (0..nranks)
            .map(|p| match sockets.remove(&p) {
                Some(s) => LinkSpec::Tcp(s),
                None => LinkSpec::Loopback,
            })
            .collect();
        let transport = Transport::start(rank, memory.clone(), channel, specs, options(&config))?;
        Runtime::assemble(rank, config, node, memory, transport, Some(slot))
    }

    /// Tears the transport down without the closing barrier, so peers
    /// blocked on this rank fail fast with `PeerFailure`.
    pub fn abort(&self) {
        self.inner
            .finalized
            .store(true, std::sync::atomic::Ordering::Release);
        self.inner.transport.shutdown();
    }
}
