//! Row-stripe Cannon multiplication `C = A × B` over every world endpoint.
//!
//! Endpoint `p` owns row stripe `p` of `A` and `C` and starts with stripe
//! `p` of `B`. At step `k` it holds `B` stripe `j = (p + k) mod P`, adds
//! `A[p][:, j-block] × B[j]` into `C[p]`, and meanwhile puts its `B`
//! stripe into the spare buffer of ring position `p - 1`. Compute runs as a
//! stream task so the prefetch is in flight while it runs.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collectives::{from_bytes, to_bytes, DType, ReduceOp};
use crate::error::{Error, Result};
use crate::memory::{AllocRecord, GlobalAddress};
use crate::runtime::{LocalBuf, Runtime, TransferKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixInit {
    /// Entries uniform in `[-1, 1]`.
    Random,
    /// Random `A`, `B = I`.
    IdentityB,
    /// Integers in `[-4, 4]`; products stay exact in f64.
    SmallIntegers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatmulSpec {
    pub n: usize,
    pub init: MatrixInit,
    pub seed: u64,
}

impl MatmulSpec {
    pub fn new(n: usize) -> Self {
        MatmulSpec {
            n,
            init: MatrixInit::Random,
            seed: 42,
        }
    }
}

/// Builds the full `A` and `B` (row-major) that every rank agrees on.
pub fn matrices(spec: &MatmulSpec) -> (Vec<f64>, Vec<f64>) {
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |rng: &mut ChaCha8Rng| match spec.init {
        MatrixInit::SmallIntegers => rng.gen_range(-4i32..=4) as f64,
        _ => rng.gen_range(-1.0..=1.0),
    };
    let a: Vec<f64> = (0..n * n).map(|_| draw(&mut rng)).collect();
    let b = match spec.init {
        MatrixInit::IdentityB => (0..n * n)
            .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
            .collect(),
        _ => (0..n * n).map(|_| draw(&mut rng)).collect(),
    };
    (a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Compute,
    Prefetch,
}

/// One interval of the per-endpoint timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelineEvent {
    pub position: usize,
    pub step: usize,
    pub phase: Phase,
    pub start: Duration,
    pub end: Duration,
}

#[derive(Debug, Clone)]
pub struct MatmulReport {
    /// Max |C - A·B| over all endpoints (computed against a serial product).
    pub residual: f64,
    pub timeline: Vec<TimelineEvent>,
    /// Steps in which some compute interval overlapped a prefetch interval.
    pub overlapped_steps: usize,
    pub elapsed: Duration,
    /// Full `C` gathered on rank 0; `None` elsewhere.
    pub c: Option<Vec<f64>>,
}

/// Serial triple loop, used for the residual.
pub fn serial_product(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for l in 0..n {
            let x = a[i * n + l];
            for j in 0..n {
                c[i * n + j] += x * b[l * n + j];
            }
        }
    }
    c
}

struct Buffers {
    a: AllocRecord,
    b: [AllocRecord; 2],
    c: AllocRecord,
}

impl Buffers {
    fn alloc(rt: &Runtime, bytes: u64, device: u16) -> Result<Self> {
        Ok(Buffers {
            a: rt.alloc_symmetric(bytes, device)?,
            b: [
                rt.alloc_symmetric(bytes, device)?,
                rt.alloc_symmetric(bytes, device)?,
            ],
            c: rt.alloc_symmetric(bytes, device)?,
        })
    }

    fn free(&self, rt: &Runtime) -> Result<()> {
        for r in [&self.a, &self.b[0], &self.b[1], &self.c] {
            rt.free(r)?;
        }
        Ok(())
    }
}

fn overlaps(x: &TimelineEvent, y: &TimelineEvent) -> bool {
    x.start < y.end && y.start < x.end
}

pub fn cannon_matmul(rt: &Runtime, spec: &MatmulSpec) -> Result<MatmulReport> {
    let world = rt.world();
    let ring = world.members().to_vec();
    let p_count = ring.len();
    let n = spec.n;
    if n == 0 || !n.is_multiple_of(p_count) {
        return Err(Error::ShapeMismatch(format!(
            "N = {n} is not a positive multiple of the {p_count} endpoints"
        )));
    }
    let ns = n / p_count;
    let stripe_bytes = (ns * n * 8) as u64;
    let (a, b) = matrices(spec);

    // Allocation is collective per device, so every rank walks every device.
    let per_device: Vec<Buffers> = (0..rt.devices_per_rank())
        .map(|d| Buffers::alloc(rt, stripe_bytes, d))
        .collect::<Result<_>>()?;
    let mine: Vec<usize> = (0..p_count)
        .filter(|&p| ring[p].rank == rt.rank())
        .collect();
    for &p in &mine {
        let bufs = &per_device[ring[p].device as usize];
        rt.write_local(bufs.a.addr, &to_bytes(&a[p * ns * n..(p + 1) * ns * n]))?;
        rt.write_local(bufs.b[0].addr, &to_bytes(&b[p * ns * n..(p + 1) * ns * n]))?;
        rt.write_local(bufs.c.addr, &vec![0u8; stripe_bytes as usize])?;
    }
    let streams = (0..rt.devices_per_rank())
        .map(|d| rt.stream_acquire(d))
        .collect::<Result<Vec<_>>>()?;
    rt.barrier(&world)?;

    let t0 = Instant::now();
    let mut timeline = Vec::new();
    let mut cur = 0usize;
    for step in 0..p_count {
        let mut events = Vec::new();
        let mut puts = Vec::new();
        for &p in &mine {
            let dev = ring[p].device;
            let bufs = &per_device[dev as usize];
            let j = (p + step) % p_count;
            let (a_addr, b_addr, c_addr) = (bufs.a.addr, bufs.b[cur].addr, bufs.c.addr);
            let task_rt = rt.clone();
            let stamp =
                std::sync::Arc::new(parking_lot::Mutex::new((Duration::ZERO, Duration::ZERO)));
            let stamp_task = stamp.clone();
            // The stream is idle here, so the task starts on submission.
            let start = t0.elapsed();
            let ev = streams[dev as usize].submit_fn(move || {
                stripe_product(&task_rt, a_addr, b_addr, c_addr, n, ns, j)?;
                *stamp_task.lock() = (start, t0.elapsed());
                Ok(())
            })?;
            events.push((p, ev, stamp));
            if p_count > 1 {
                let left = (p + p_count - 1) % p_count;
                let dst = GlobalAddress::new(
                    ring[left].rank,
                    ring[left].device,
                    bufs.b[1 - cur].addr.offset,
                );
                let issued = t0.elapsed();
                let h = rt.put(
                    dst,
                    LocalBuf::Device(b_addr, stripe_bytes),
                    TransferKind::D2D,
                )?;
                puts.push((p, issued, h));
            }
        }
        for (p, ev, stamp) in events {
            ev.wait()?;
            let (start, end) = *stamp.lock();
            timeline.push(TimelineEvent {
                position: p,
                step,
                phase: Phase::Compute,
                start,
                end,
            });
        }
        rt.fence(&world)?;
        for (p, issued, h) in puts {
            h.wait()?;
            let end = h
                .completed_at()
                .map_or(t0.elapsed(), |t| t.saturating_duration_since(t0));
            timeline.push(TimelineEvent {
                position: p,
                step,
                phase: Phase::Prefetch,
                start: issued,
                end,
            });
        }
        rt.barrier(&world)?;
        cur = 1 - cur;
    }
    let elapsed = t0.elapsed();
    for s in streams {
        s.release();
    }

    let oracle = serial_product(&a, &b, n);
    let mut residual = 0.0f64;
    for &p in &mine {
        let bufs = &per_device[ring[p].device as usize];
        let c = from_bytes::<f64>(&rt.read_local(bufs.c.addr, stripe_bytes)?);
        for (i, v) in c.iter().enumerate() {
            residual = residual.max((v - oracle[p * ns * n + i]).abs());
        }
    }
    let res_bufs = rt.alloc_symmetric_all_devices(8)?;
    for r in &res_bufs {
        rt.write_local(r.addr, &residual.to_le_bytes())?;
    }
    let res_addr = res_bufs[0].addr;
    let comm = rt.comm_for(&world)?;
    rt.allreduce(&comm, res_addr, res_addr, 1, DType::F64, ReduceOp::Max)?;
    residual = from_bytes::<f64>(&rt.read_local(res_addr, 8)?)[0];

    let c = if rt.rank() == 0 {
        let mut full = vec![0.0; n * n];
        for (p, ep) in ring.iter().enumerate() {
            let off = per_device[ep.device as usize].c.addr.offset;
            let bytes = rt.get_bytes(GlobalAddress::new(ep.rank, ep.device, off), stripe_bytes)?;
            full[p * ns * n..(p + 1) * ns * n].copy_from_slice(&from_bytes::<f64>(&bytes));
        }
        Some(full)
    } else {
        None
    };
    rt.barrier(&world)?;
    for r in &res_bufs {
        rt.free(r)?;
    }
    for bufs in &per_device {
        bufs.free(rt)?;
    }

    let overlapped_steps = (0..p_count)
        .filter(|&s| {
            let at: Vec<_> = timeline.iter().filter(|e| e.step == s).collect();
            at.iter().any(|c| {
                c.phase == Phase::Compute
                    && at
                        .iter()
                        .any(|f| f.phase == Phase::Prefetch && overlaps(c, f))
            })
        })
        .count();
    Ok(MatmulReport {
        residual,
        timeline,
        overlapped_steps,
        elapsed,
        c,
    })
}

/// `C += A[:, j-block] × B_j` for one `ns × n` stripe.
fn stripe_product(
    rt: &Runtime,
    a: GlobalAddress,
    b: GlobalAddress,
    c: GlobalAddress,
    n: usize,
    ns: usize,
    j: usize,
) -> Result<()> {
    let bytes = (ns * n * 8) as u64;
    let a = from_bytes::<f64>(&rt.read_local(a, bytes)?);
    let b = from_bytes::<f64>(&rt.read_local(b, bytes)?);
    let mut cv = from_bytes::<f64>(&rt.read_local(c, bytes)?);
    for i in 0..ns {
        for l in 0..ns {
            let x = a[i * n + j * ns + l];
            let brow = &b[l * n..(l + 1) * n];
            let crow = &mut cv[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += x * bj;
            }
        }
    }
    rt.write_local(c, &to_bytes(&cv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product_is_exact() {
        let spec = MatmulSpec {
            n: 6,
            init: MatrixInit::IdentityB,
            seed: 1,
        };
        let (a, b) = matrices(&spec);
        assert_eq!(serial_product(&a, &b, 6), a);
    }

    #[test]
    fn small_integer_entries() {
        let spec = MatmulSpec {
            n: 8,
            init: MatrixInit::SmallIntegers,
            seed: 3,
        };
        let (a, b) = matrices(&spec);
        assert!(a
            .iter()
            .chain(&b)
            .all(|v| v.fract() == 0.0 && v.abs() <= 4.0));
    }
}
