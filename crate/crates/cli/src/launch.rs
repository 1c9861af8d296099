//! Spawns one worker process per rank and supervises them.

use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};

use crate::plan::{Experiment, RunPlan};
use crate::worker::{BASELINE_ENV, RESULT_ENV, TIMEOUT_ENV};

const POLL: Duration = Duration::from_millis(20);
/// How long survivors get to notice a dead peer before they are killed.
const KILL_GRACE: Duration = Duration::from_secs(3);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ChildFailed,
    TimedOut,
}

impl Experiment {
    /// Arguments that reproduce this experiment under `diomp worker`.
    fn to_args(&self) -> Vec<String> {
        let mut v = vec![self.name().to_string()];
        let mut flag = |name: &str, value: String| {
            v.push(format!("--{name}"));
            v.push(value);
        };
        match self {
            Experiment::P2p(a) | Experiment::Collective(a) => {
                if let Some(k) = &a.kind {
                    flag("kind", k.clone());
                }
                if let Some(s) = &a.sizes {
                    let s: Vec<String> = s.iter().map(u64::to_string).collect();
                    flag("sizes", s.join(","));
                }
                if let Some(i) = a.iters {
                    flag("iters", i.to_string());
                }
                if let Some(w) = a.warmup {
                    flag("warmup", w.to_string());
                }
            }
            Experiment::Matmul { n, seed } => {
                flag("n", n.to_string());
                flag("seed", seed.to_string());
            }
            Experiment::Stencil {
                grid,
                steps,
                radius,
                two_sided,
                dump_field,
            } => {
                flag("grid", grid.to_string());
                flag("steps", steps.to_string());
                flag("radius", radius.to_string());
                if let Some(p) = dump_field {
                    flag("dump-field", p.display().to_string());
                }
                if *two_sided {
                    v.push("--two-sided".into());
                }
            }
            Experiment::Selftest => {}
        }
        v
    }
}

fn free_port() -> io::Result<u16> {
    Ok(TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

fn absolute(p: &Path) -> io::Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(p))
    }
}

struct Rank {
    child: Child,
    status: Option<ExitStatus>,
}

fn spawn(plan: &RunPlan, dir: &Path) -> Result<Vec<Rank>> {
    let exe = std::env::current_exe().context("locating the diomp binary")?;
    let rendezvous = format!("127.0.0.1:{}", free_port()?);
    let mut experiment = plan.experiment.clone();
    if let Experiment::Stencil { dump_field: Some(p), .. } = &mut experiment {
        *p = absolute(p)?;
    }
    let args = experiment.to_args();
    let baseline = plan.baseline.as_deref().map(absolute).transpose()?;
    let mut ranks = Vec::with_capacity(plan.nranks as usize);
    for r in 0..plan.nranks {
        let mut cmd = Command::new(&exe);
        cmd.arg("worker")
            .args(&args)
            .env("DIOMP_RANK", r.to_string())
            .env("DIOMP_NRANKS", plan.nranks.to_string())
            .env("DIOMP_NODE_ID", plan.nodes[r as usize].to_string())
            .env("DIOMP_RENDEZVOUS", &rendezvous)
            .env("DIOMP_DEVICES_PER_RANK", plan.devices.to_string())
            .env("DIOMP_SEGMENT_BYTES", plan.segment_bytes.to_string())
            .env("DIOMP_ALLOCATOR", plan.allocator.to_string())
            .env("DIOMP_TRANSPORT", plan.transport.to_string())
            .env("DIOMP_SIM_TASK_US", plan.sim_task_us.to_string())
            .env(TIMEOUT_ENV, plan.timeout.as_secs().to_string())
            .env(RESULT_ENV, dir.join(format!("rank{r}.csv")))
            .stdin(Stdio::null())
            .stdout(Stdio::null());
        if let Some(m) = plan.max_active_streams {
            cmd.env("DIOMP_MAX_ACTIVE_STREAMS", m.to_string());
        }
        if let Some(b) = &baseline {
            cmd.env(BASELINE_ENV, b);
        }
        match cmd.spawn() {
            Ok(child) => {
                eprintln!("diomp: rank {r} pid {}", child.id());
                ranks.push(Rank { child, status: None });
            }
            Err(e) => {
                kill_all(&mut ranks);
                return Err(e).with_context(|| format!("spawning rank {r}"));
            }
        }
    }
    Ok(ranks)
}

fn kill_all(ranks: &mut [Rank]) {
    for r in ranks.iter_mut().filter(|r| r.status.is_none()) {
        let _ = r.child.kill();
    }
    for r in ranks.iter_mut().filter(|r| r.status.is_none()) {
        r.status = r.child.wait().ok();
    }
}

/// Polls every child; returns true once all have exited.
fn reap(ranks: &mut [Rank]) -> io::Result<bool> {
    let mut done = true;
    for r in ranks.iter_mut() {
        if r.status.is_none() {
            r.status = r.child.try_wait()?;
        }
        done &= r.status.is_some();
    }
    Ok(done)
}

fn supervise(plan: &RunPlan, ranks: &mut [Rank]) -> Result<Outcome> {
    let deadline = Instant::now() + plan.timeout;
    let mut failed_at: Option<Instant> = None;
    loop {
        let done = reap(ranks)?;
        if let Some((i, st)) = ranks
            .iter()
            .enumerate()
            .find_map(|(i, r)| r.status.filter(|s| !s.success()).map(|s| (i, s)))
        {
            if failed_at.is_none() {
                eprintln!("diomp: rank {i} exited with {st}");
                failed_at = Some(Instant::now());
            }
        }
        if done {
            return Ok(if failed_at.is_some() { Outcome::ChildFailed } else { Outcome::Success });
        }
        if failed_at.is_some_and(|t| t.elapsed() >= KILL_GRACE) {
            kill_all(ranks);
            return Ok(Outcome::ChildFailed);
        }
        if Instant::now() >= deadline {
            eprintln!("diomp: timed out after {:?}", plan.timeout);
            kill_all(ranks);
            return Ok(Outcome::TimedOut);
        }
        thread::sleep(POLL);
    }
}

/// Concatenates per-rank CSVs in rank order, keeping the first header.
pub fn merge_csv(parts: &[String], out: &mut impl Write) -> io::Result<usize> {
    let mut header: Option<&str> = None;
    let mut rows = 0;
    for part in parts {
        let mut lines = part.lines().filter(|l| !l.trim().is_empty());
        let Some(h) = lines.next() else { continue };
        match header {
            None => {
                writeln!(out, "{h}")?;
                header = Some(h);
            }
            Some(prev) if prev != h => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("rank CSV headers differ: {prev:?} vs {h:?}"),
                ));
            }
            Some(_) => {}
        }
        for l in lines {
            writeln!(out, "{l}")?;
            rows += 1;
        }
    }
    Ok(rows)
}

fn collect(plan: &RunPlan, dir: &Path) -> Result<()> {
    let mut parts = Vec::with_capacity(plan.nranks as usize);
    for r in 0..plan.nranks {
        let p = dir.join(format!("rank{r}.csv"));
        match fs::read_to_string(&p) {
            Ok(s) => parts.push(s),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e).with_context(|| format!("reading {}", p.display())),
        }
    }
    let rows = match &plan.out {
        Some(path) => {
            let mut f = io::BufWriter::new(
                fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
            );
            let n = merge_csv(&parts, &mut f)?;
            f.flush()?;
            n
        }
        None => merge_csv(&parts, &mut io::stdout().lock())?,
    };
    log::info!("merged {rows} rows from {} ranks", plan.nranks);
    Ok(())
}

pub fn launch(plan: &RunPlan) -> Result<Outcome> {
    let dir = tempfile::Builder::new()
        .prefix("diomp-run-")
        .tempdir()
        .context("creating the run directory")?;
    let mut ranks = spawn(plan, dir.path())?;
    let outcome = match supervise(plan, &mut ranks) {
        Ok(o) => o,
        Err(e) => {
            kill_all(&mut ranks);
            return Err(e);
        }
    };
    if outcome == Outcome::Success {
        collect(plan, dir.path())?;
    }
    Ok(outcome)
}
