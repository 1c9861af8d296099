//! One rank of a launched job: joins the rendezvous, runs the experiment
//! and writes this rank's CSV rows to the file named by `DIOMP_RESULT`.

use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use diomp::apps::bench::{apply_baseline, read_baseline, write_csv};
use diomp::apps::stencil::field_bytes;
use diomp::apps::{bench_collective, bench_p2p, cannon_matmul, stencil_minimod};
use diomp::config::EnvSettings;
use diomp::{LaunchConfig, Runtime};

use crate::plan::Experiment;

pub const RESULT_ENV: &str = "DIOMP_RESULT";
pub const BASELINE_ENV: &str = "DIOMP_BASELINE";
pub const TIMEOUT_ENV: &str = "DIOMP_TIMEOUT_SECS";
pub const FAULT_ENV: &str = "DIOMP_FAULT_ABORT_RANK";

fn config() -> Result<LaunchConfig> {
    let env = EnvSettings::from_env()?;
    let nranks: u32 = std::env::var("DIOMP_NRANKS")
        .context("DIOMP_NRANKS is not set")?
        .parse()
        .context("DIOMP_NRANKS")?;
    let timeout = match std::env::var(TIMEOUT_ENV) {
        Ok(s) => Duration::from_secs(s.parse().context(TIMEOUT_ENV)?),
        Err(_) => Duration::from_secs(60),
    };
    let mut cfg = LaunchConfig::new(nranks, env.devices_per_rank)
        .with_segment(env.segment)
        .with_transport(env.transport)
        .with_max_active_streams(env.max_active_streams)
        .with_sim_task_latency(env.sim_task_latency)
        .with_timeout(timeout);
    cfg.nodes = vec![0; nranks as usize];
    Ok(cfg)
}

pub fn run(experiment: &Experiment) -> Result<()> {
    let rt = Runtime::init(config()?)?;
    if let Ok(r) = std::env::var(FAULT_ENV) {
        if r.parse() == Ok(rt.rank()) {
            log::warn!("rank {} aborting on request", rt.rank());
            std::process::abort();
        }
    }
    let result = body(&rt, experiment);
    match &result {
        Ok(()) => rt.finalize()?,
        Err(e) => {
            log::error!("rank {} failed: {e:#}", rt.rank());
            rt.abort();
        }
    }
    result
}

fn emit(csv: &[u8]) -> Result<()> {
    if let Ok(path) = std::env::var(RESULT_ENV) {
        fs::write(&path, csv).with_context(|| format!("writing {path}"))?;
    }
    Ok(())
}

fn body(rt: &Runtime, experiment: &Experiment) -> Result<()> {
    if let Some(spec) = experiment.bench_spec()? {
        let mut rows = if spec.kind.is_collective() {
            let comm = rt.comm_for(&rt.world())?;
            let rows = bench_collective(rt, &spec, &comm)?;
            // Every rank times the same barrier-delimited loop; rank 0 reports.
            if rt.rank() == 0 {
                rows
            } else {
                Vec::new()
            }
        } else {
            bench_p2p(rt, &spec)?
        };
        if rows.is_empty() {
            return Ok(());
        }
        if let Ok(path) = std::env::var(BASELINE_ENV) {
            let file = fs::File::open(&path).with_context(|| format!("opening baseline {path}"))?;
            apply_baseline(&mut rows, &read_baseline(BufReader::new(file))?);
        }
        let mut csv = Vec::new();
        write_csv(&rows, &mut csv)?;
        return emit(&csv);
    }
    if let Some(spec) = experiment.matmul_spec() {
        let report = cannon_matmul(rt, &spec)?;
        if rt.rank() == 0 {
            let csv = format!(
                "n,endpoints,residual,elapsed_us,overlapped_steps\n{},{},{:e},{:.1},{}\n",
                spec.n,
                rt.world().len(),
                report.residual,
                report.elapsed.as_secs_f64() * 1e6,
                report.overlapped_steps
            );
            emit(csv.as_bytes())?;
        }
        return Ok(());
    }
    if let Some(spec) = experiment.stencil_spec() {
        let report = stencil_minimod(rt, &spec)?;
        if let (Some(field), Some(sum)) = (&report.field, &report.checksum) {
            if let Experiment::Stencil {
                dump_field: Some(path),
                ..
            } = experiment
            {
                write_field(path, field)?;
            }
            let csv = format!(
                "nx,ny,nz,steps,radius,endpoints,elapsed_us,sum,sha256\n{},{},{},{},{},{},{:.1},{:e},{}\n",
                spec.nx,
                spec.ny,
                spec.nz,
                spec.steps,
                spec.radius,
                rt.world().len(),
                report.elapsed.as_secs_f64() * 1e6,
                sum.sum,
                sum.sha256
            );
            emit(csv.as_bytes())?;
        }
        return Ok(());
    }
    anyhow::bail!("{} does not run under the launcher", experiment.name())
}

fn write_field(path: &PathBuf, field: &[f64]) -> Result<()> {
    fs::write(path, field_bytes(field)).with_context(|| format!("writing {}", path.display()))
}
