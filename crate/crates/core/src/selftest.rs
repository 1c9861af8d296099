//! Small-scale, in-process run of every runtime invariant.
//!
//! Each property runs in its own short job of threaded ranks over
//! in-memory queues and reports pass or fail with a one-line detail.

use std::collections::HashSet;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::apps::bench::{bench_p2p, BenchKind, BenchSpec};
use crate::apps::matmul::{cannon_matmul, MatmulSpec};
use crate::apps::stencil::{stencil_minimod, StencilSpec};
use crate::collectives::{from_bytes, to_bytes, DType, ReduceOp};
use crate::config::{
    block_node_map, AllocatorKind, LaunchConfig, SegmentConfig, TransportKind, MIB,
};
use crate::error::{Error, Result};
use crate::memory::{Allocator, Direction, GlobalAddress, BUDDY_MIN_BLOCK};
use crate::runtime::{run_local, GetDst, LocalBuf, Runtime, TransferKind};
use crate::stream::StreamPool;
use crate::transport::{Endpoint, Opcode, RankInfo, TopologyMap};

#[derive(Debug, Clone, Default)]
pub struct SelfTestOptions {
    /// Make every allocation overlap its predecessor.
    pub inject_overlap: bool,
}

impl SelfTestOptions {
    /// Honours `DIOMP_INJECT_FAULT=alloc-overlap`.
    pub fn from_env() -> Self {
        SelfTestOptions {
            inject_overlap: std::env::var("DIOMP_INJECT_FAULT").is_ok_and(|v| v == "alloc-overlap"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct SelfTestReport {
    pub results: Vec<PropertyResult>,
}

impl SelfTestReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failed(&self) -> Vec<&PropertyResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }

    pub fn get(&self, name: &str) -> Option<&PropertyResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for SelfTestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{} {:<15} {:<36} {:>6.0} ms  {}",
                if r.passed { "PASS" } else { "FAIL" },
                r.module,
                r.name,
                r.elapsed.as_secs_f64() * 1e3,
                r.detail
            )?;
        }
        let failed = self.failed().len();
        write!(f, "{} properties, {} failed", self.results.len(), failed)
    }
}

type Check = fn(&Ctx) -> std::result::Result<String, String>;

struct Ctx {
    opts: SelfTestOptions,
}

impl Ctx {
    fn config(&self, nranks: u32, devices: u16) -> LaunchConfig {
        let mut seg = SegmentConfig::new(8 * MIB, AllocatorKind::Buddy);
        seg.inject_overlap = self.opts.inject_overlap;
        LaunchConfig::new(nranks, devices)
            .with_segment(seg)
            .with_transport(TransportKind::Shm)
            .with_timeout(Duration::from_secs(15))
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn job<T: Send>(
    cfg: LaunchConfig,
    f: impl Fn(&Runtime) -> Result<T> + Sync,
) -> std::result::Result<Vec<T>, String> {
    run_local(cfg, f).map_err(|e| e.to_string())
}

/// Every property, in report order.
const PROPERTIES: &[(&str, &str, Check)] = &[
    (
        "global_memory",
        "symmetric-offset-agreement",
        symmetric_offset_agreement,
    ),
    ("global_memory", "non-overlap", non_overlap),
    ("global_memory", "buddy-rounding", buddy_rounding),
    (
        "global_memory",
        "translate-round-trip",
        translate_round_trip,
    ),
    ("global_memory", "cache-single-fetch", cache_single_fetch),
    ("global_memory", "free-then-use-detection", free_then_use),
    ("transport", "path-correctness", path_correctness),
    (
        "transport",
        "classification-totality-symmetry",
        classification,
    ),
    ("transport", "no-lost-completions", no_lost_completions),
    ("transport", "fragmentation-transparency", fragmentation),
    ("transport", "one-sided-semantics", one_sided_semantics),
    ("streams", "bounded-concurrency", bounded_concurrency),
    ("streams", "half-release-arithmetic", half_release),
    ("streams", "per-stream-fifo", per_stream_fifo),
    (
        "streams",
        "block-stream-association",
        block_stream_association,
    ),
    ("runtime", "fence-visibility", fence_visibility),
    ("runtime", "scope-isolation", scope_isolation),
    ("runtime", "group-id-determinism", group_id_determinism),
    (
        "runtime",
        "hybrid-polling-liveness",
        hybrid_polling_liveness,
    ),
    ("collectives", "determinism", collective_determinism),
    ("collectives", "oracle-equivalence", oracle_equivalence),
    ("collectives", "endpoint-granularity", endpoint_granularity),
    ("collectives", "isolation", collective_isolation),
    ("apps", "matmul-residual", matmul_residual),
    ("apps", "overlap-discipline", overlap_discipline),
    (
        "apps",
        "stencil-decomposition-independence",
        stencil_independence,
    ),
    ("apps", "benchmark-accounting", benchmark_accounting),
    ("launcher", "node-assignment-determinism", node_assignment),
    ("launcher", "clean-teardown", clean_teardown),
];

/// `(module, name)` of every property, in report order.
pub fn property_names() -> Vec<(&'static str, &'static str)> {
    PROPERTIES.iter().map(|p| (p.0, p.1)).collect()
}

pub fn run_selftest(opts: &SelfTestOptions) -> SelfTestReport {
    let ctx = Ctx { opts: opts.clone() };
    let results = PROPERTIES
        .iter()
        .map(|&(module, name, check)| {
            let start = Instant::now();
            let outcome =
                panic::catch_unwind(AssertUnwindSafe(|| check(&ctx))).unwrap_or_else(|p| {
                    let msg = p
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_default();
                    Err(format!("panicked: {msg}"))
                });
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            PropertyResult {
                module,
                name,
                passed,
                detail,
                elapsed: start.elapsed(),
            }
        })
        .collect();
    SelfTestReport { results }
}

fn symmetric_offset_agreement(ctx: &Ctx) -> std::result::Result<String, String> {
    let ledgers = job(ctx.config(2, 1), |rt| {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut live = Vec::new();
        for _ in 0..120 {
            if live.is_empty() || rng.gen_bool(0.6) {
                if let Ok(r) = rt.alloc_symmetric(rng.gen_range(1..64 * 1024), 0) {
                    live.push(r);
                }
            } else {
                let r = live.swap_remove(rng.gen_range(0..live.len()));
                rt.free(&r)?;
            }
        }
        Ok(rt
            .segment(0)?
            .records()
            .iter()
            .map(|r| (r.addr.offset, r.size))
            .collect::<Vec<_>>())
    })?;
    ensure(ledgers.windows(2).all(|w| w[0] == w[1]), || {
        "ledgers differ".into()
    })?;
    Ok(format!("{} live records agree", ledgers[0].len()))
}

fn non_overlap(ctx: &Ctx) -> std::result::Result<String, String> {
    let out = job(ctx.config(2, 1), |rt| {
        for i in 0..6 {
            rt.alloc_symmetric(4096, 0)?;
            rt.alloc_asymmetric(4096 * (rt.rank() as u64 + 1) + i, 0)?;
        }
        let mut recs = rt.segment(0)?.records();
        recs.sort_by_key(|r| r.addr.offset);
        Ok(recs
            .windows(2)
            .filter(|w| w[0].addr.offset + w[0].size > w[1].addr.offset)
            .count())
    })?;
    let overlaps: usize = out.iter().sum();
    ensure(overlaps == 0, || {
        format!("{overlaps} overlapping record pairs")
    })?;
    Ok("live ranges disjoint".into())
}

fn buddy_rounding(_: &Ctx) -> std::result::Result<String, String> {
    let mut buddy = Allocator::new(AllocatorKind::Buddy, 0, 1 << 20, 64, Direction::Upward);
    let mut linear = Allocator::new(AllocatorKind::Linear, 0, 1 << 20, 64, Direction::Upward);
    for size in [1u64, 255, 256, 257, 1000, 4096, 5000] {
        let b = buddy.allocate(size).ok_or("buddy exhausted")?;
        let want = size.max(BUDDY_MIN_BLOCK).next_power_of_two();
        ensure(b.len == want, || {
            format!("buddy gave {} for {size}, want {want}", b.len)
        })?;
        let l = linear.allocate(size).ok_or("linear exhausted")?;
        ensure(l.len == size.div_ceil(64) * 64, || {
            format!("linear gave {} for {size}", l.len)
        })?;
    }
    Ok("7 sizes".into())
}

fn translate_round_trip(ctx: &Ctx) -> std::result::Result<String, String> {
    job(ctx.config(2, 1), |rt| {
        let r = rt.alloc_symmetric(100, 0)?;
        let there = rt.translate(r.addr, 1 - rt.rank())?;
        let back = rt.translate(there, rt.rank())?;
        if back != r.addr {
            return Err(Error::InvalidConfig(format!("{back} != {}", r.addr)));
        }
        Ok(())
    })?;
    Ok("p == translate(translate(p, peer), self)".into())
}

fn cache_single_fetch(ctx: &Ctx) -> std::result::Result<String, String> {
    let out = job(ctx.config(2, 1), |rt| {
        let cells: Vec<_> = (0..3)
            .map(|i| rt.alloc_asymmetric(64 + i * 8 + rt.rank() as u64, 0))
            .collect::<Result<_>>()?;
        let before = rt.transport_stats().sent(Opcode::CellFetch);
        let mut rng = ChaCha8Rng::seed_from_u64(rt.rank() as u64 + 11);
        let mut seen = HashSet::new();
        for i in 0..400 {
            if i == 200 {
                rt.rebind_cell(&cells[1], 128)?;
            }
            let c = &cells[rng.gen_range(0..3)];
            let target = rng.gen_range(0..2u32);
            let p = rt.resolve_cell(c, target)?;
            if target != rt.rank() {
                seen.insert((c.offset(), target, p.generation));
            }
        }
        let fetched = rt.transport_stats().sent(Opcode::CellFetch) - before;
        Ok((fetched, seen.len() as u64))
    })?;
    for (fetched, distinct) in &out {
        ensure(fetched == distinct, || {
            format!("{fetched} fetches for {distinct} triples")
        })?;
    }
    Ok(format!("fetches == distinct triples ({:?})", out))
}

fn free_then_use(ctx: &Ctx) -> std::result::Result<String, String> {
    job(ctx.config(2, 1), |rt| {
        let r = rt.alloc_symmetric(256, 0)?;
        rt.free(&r)?;
        rt.barrier(&rt.world())?;
        let remote = rt
            .put_bytes(r.addr.on_rank(1 - rt.rank()), &[1u8; 16])
            .and_then(|h| h.wait());
        let local = rt.write_local(r.addr, &[1u8; 16]);
        // The failed put is also reported by the next fence, once.
        let fenced = rt.fence_all();
        rt.fence_all()?;
        rt.barrier(&rt.world())?;
        match (remote, local, fenced) {
            (
                Err(Error::InvalidAddress { .. }),
                Err(Error::InvalidAddress { .. }),
                Err(Error::InvalidAddress { .. }),
            ) => Ok(()),
            other => Err(Error::InvalidConfig(format!(
                "freed range accepted: {other:?}"
            ))),
        }
    })?;
    Ok("remote, local and fence all report the freed range".into())
}

fn pattern(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen()).collect()
}

fn path_correctness(ctx: &Ctx) -> std::result::Result<String, String> {
    let cfg = ctx.config(3, 2).with_nodes(vec![0, 0, 1]);
    let sizes = [0usize, 1, 3, 4, 64, 4096, 8192, 1 << 20];
    let out = job(cfg, |rt| {
        let buf = rt.alloc_symmetric_all_devices(2 << 20)?;
        let mut kinds = HashSet::new();
        if rt.rank() == 0 {
            let targets = [(0u32, 0u16), (0, 1), (1, 0), (2, 1)];
            for (i, &(r, d)) in targets.iter().enumerate() {
                let dst = GlobalAddress::new(r, d, buf[0].addr.offset);
                for &n in &sizes {
                    let data = pattern(n, (i * 100 + n) as u64);
                    rt.put(dst, LocalBuf::Host(&data), TransferKind::H2D)?;
                    rt.fence_all()?;
                    let back = rt.get(dst, n as u64, GetDst::Host, TransferKind::D2H)?;
                    back.wait()?;
                    if back.take_bytes().unwrap_or_default() != data {
                        return Err(Error::InvalidConfig(format!(
                            "mismatch at {dst}, {n} bytes"
                        )));
                    }
                }
                let topo = rt.topology();
                kinds.insert(topo.classify(&topo.endpoint(0, 0)?, &topo.endpoint(r, d)?)?);
            }
        }
        rt.barrier(&rt.world())?;
        Ok(kinds.len())
    })?;
    ensure(out[0] == 4, || {
        format!("only {} path kinds exercised", out[0])
    })?;
    Ok(format!("4 paths x {} sizes byte-exact", sizes.len()))
}

fn classification(_: &Ctx) -> std::result::Result<String, String> {
    let infos = (0..4)
        .map(|r| RankInfo {
            rank: r,
            node_id: r / 2,
            process_id: 100 + r as u64,
            devices: 2,
        })
        .collect();
    let topo = TopologyMap::discover(infos, TopologyMap::uniform_peer_matrix(2, true))
        .map_err(|e| e.to_string())?;
    let eps = topo.endpoints();
    let mut kinds = HashSet::new();
    for a in &eps {
        for b in &eps {
            let ab = topo.classify(a, b).map_err(|e| e.to_string())?;
            let ba = topo.classify(b, a).map_err(|e| e.to_string())?;
            ensure(ab == ba, || {
                format!("{a} -> {b} is {ab:?} but reverse is {ba:?}")
            })?;
            kinds.insert(ab);
        }
    }
    Ok(format!(
        "{} pairs, {} kinds",
        eps.len() * eps.len(),
        kinds.len()
    ))
}

fn no_lost_completions(ctx: &Ctx) -> std::result::Result<String, String> {
    let out = job(ctx.config(2, 1), |rt| {
        let r = rt.alloc_symmetric(64 * 1024, 0)?;
        let peer = r.addr.on_rank(1 - rt.rank());
        let mut handles = Vec::new();
        for i in 0..200u64 {
            let len = 1 + (i * 37) % 4000;
            handles.push(rt.put_bytes(peer.add(i * 17 % 1000), &pattern(len as usize, i))?);
            handles.push(rt.get(peer, len, GetDst::Host, TransferKind::D2H)?);
        }
        let deadline = Instant::now() + Duration::from_secs(10);
        while handles.iter().any(|h| !h.is_done()) && Instant::now() < deadline {
            rt.progress()?;
            std::thread::sleep(Duration::from_micros(200));
        }
        let done = handles.iter().filter(|h| h.is_done()).count();
        rt.barrier(&rt.world())?;
        Ok((done, handles.len()))
    })?;
    for (done, total) in &out {
        ensure(done == total, || {
            format!("{done}/{total} reached a terminal state")
        })?;
    }
    Ok("400/400 handles terminal per rank".into())
}

fn fragmentation(ctx: &Ctx) -> std::result::Result<String, String> {
    // Same mechanism as the 64 MiB cap, scaled: a 64 KiB cap and a 65 KiB transfer.
    let cfg = ctx.config(2, 1).with_fragment_bytes(64 * 1024);
    let out = job(cfg, |rt| {
        let r = rt.alloc_symmetric(65 * 1024, 0)?;
        let data = pattern(65 * 1024, 5 + rt.rank() as u64);
        let before = rt.transport_stats().sent(Opcode::Put);
        rt.put_bytes(r.addr.on_rank(1 - rt.rank()), &data)?.wait()?;
        let frames = rt.transport_stats().sent(Opcode::Put) - before;
        rt.barrier(&rt.world())?;
        let got = rt.read_local(r.addr, 65 * 1024)?;
        Ok((
            frames,
            got == pattern(65 * 1024, 5 + (1 - rt.rank()) as u64),
        ))
    })?;
    for (frames, ok) in &out {
        ensure(*ok, || "payload corrupted".into())?;
        ensure(*frames == 2, || format!("{frames} PUT frames, want 2"))?;
    }
    Ok("65 KiB over a 64 KiB cap: 2 fragments, byte-exact".into())
}

fn one_sided_semantics(ctx: &Ctx) -> std::result::Result<String, String> {
    let gate = Arc::new(Barrier::new(2));
    let out = job(ctx.config(2, 1), |rt| {
        let r = rt.alloc_symmetric(4096, 0)?;
        rt.barrier(&rt.world())?;
        let before = rt.transport_stats();
        gate.wait();
        if rt.rank() == 0 {
            for i in 0..50u64 {
                rt.put_bytes(r.addr.on_rank(1).add(i), &[i as u8; 64])?
                    .wait()?;
                let h = rt.get(r.addr.on_rank(1), 64, GetDst::Host, TransferKind::D2H)?;
                h.wait()?;
            }
        }
        // Rank 1 stays out of the runtime until rank 0 is done.
        gate.wait();
        let after = rt.transport_stats();
        rt.barrier(&rt.world())?;
        Ok((
            after.served_by_progress_thread - before.served_by_progress_thread,
            after.served_by_caller - before.served_by_caller,
        ))
    })?;
    let (thread, caller) = out[1];
    ensure(thread >= 100 && caller == 0, || {
        format!("target served {thread} on the progress thread, {caller} on the application thread")
    })?;
    Ok(format!(
        "target served {thread} requests without application involvement"
    ))
}

fn bounded_concurrency(_: &Ctx) -> std::result::Result<String, String> {
    for max in [1usize, 2, 8] {
        let pool = StreamPool::new(0, max, Duration::ZERO);
        let mut rng = ChaCha8Rng::seed_from_u64(max as u64);
        let mut held = Vec::new();
        for _ in 0..500 {
            let s = pool.acquire();
            if rng.gen_bool(0.5) {
                s.submit_fn(|| Ok(())).map_err(|e| e.to_string())?;
            }
            held.push(s);
            if held.len() > 12 {
                held.remove(0);
            }
            let st = pool.stats();
            ensure(st.active <= max, || {
                format!("{} active with bound {max}", st.active)
            })?;
        }
        ensure(pool.stats().max_active_observed <= max, || {
            "bound exceeded".into()
        })?;
    }
    Ok("bounds 1, 2, 8 held over 500 acquires".into())
}

fn half_release(_: &Ctx) -> std::result::Result<String, String> {
    let pool = StreamPool::new(0, 4, Duration::ZERO);
    let mut held = Vec::new();
    for i in 0..200 {
        let s = pool.acquire();
        if i % 3 != 0 {
            s.submit_fn(|| Ok(())).map_err(|e| e.to_string())?;
        }
        held.push(s);
    }
    let st = pool.stats();
    for e in &st.enforcements {
        let want = e.completed.div_ceil(2).max(1);
        ensure(e.released == want, || {
            format!("{e:?} released {} want {want}", e.released)
        })?;
    }
    Ok(format!("{} enforcements checked", st.enforcements.len()))
}

fn per_stream_fifo(_: &Ctx) -> std::result::Result<String, String> {
    let pool = StreamPool::new(0, 2, Duration::ZERO);
    let s = pool.acquire();
    let order = Arc::new(parking_lot::Mutex::new(Vec::new()));
    let events: Vec<_> = (0..100)
        .map(|i| {
            let order = order.clone();
            s.submit_fn(move || {
                order.lock().push(i);
                Ok(())
            })
        })
        .collect::<Result<_>>()
        .map_err(|e| e.to_string())?;
    s.synchronize();
    let seqs: Vec<u64> = events.iter().map(|e| e.seq()).collect();
    ensure(seqs.windows(2).all(|w| w[0] < w[1]), || {
        "sequence numbers not increasing".into()
    })?;
    ensure(*order.lock() == (0..100).collect::<Vec<_>>(), || {
        "tasks ran out of order".into()
    })?;
    Ok("100 tasks in submission order".into())
}

fn block_stream_association(ctx: &Ctx) -> std::result::Result<String, String> {
    job(ctx.config(2, 1), |rt| {
        let bound = rt.stream_acquire(0)?;
        let other = rt.stream_acquire(0)?;
        let src = rt.alloc_symmetric_with_stream(256, 0, Some(bound.id()))?;
        let dst = rt.alloc_symmetric(256, 0)?;
        let peer = dst.addr.on_rank(1 - rt.rank());
        rt.put_on_stream(&bound, peer, src.addr, 256)?.wait()?;
        match rt.put_on_stream(&other, peer, src.addr, 256) {
            Err(Error::StreamMismatch { .. }) => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "foreign stream accepted: {other:?}"
                )))
            }
        }
        rt.fence_all()?;
        rt.barrier(&rt.world())
    })?;
    Ok("foreign-stream submit rejected".into())
}

fn fence_visibility(ctx: &Ctx) -> std::result::Result<String, String> {
    let out = job(ctx.config(2, 1), |rt| {
        let r = rt.alloc_symmetric(8 * 1024, 0)?;
        let peer = 1 - rt.rank();
        let data = pattern(8 * 1024, rt.rank() as u64);
        for c in data.chunks(512).enumerate() {
            rt.put_bytes(r.addr.on_rank(peer).add(c.0 as u64 * 512), c.1)?;
        }
        rt.fence_all()?;
        // The issuer reads back what it wrote before anyone synchronizes.
        let seen = rt.get_bytes(r.addr.on_rank(peer), 8 * 1024)?;
        rt.barrier(&rt.world())?;
        Ok(seen == data)
    })?;
    ensure(out.iter().all(|&b| b), || {
        "get after fence missed a put".into()
    })?;
    Ok("16 puts visible after fence".into())
}

fn scope_isolation(ctx: &Ctx) -> std::result::Result<String, String> {
    let out = job(ctx.config(3, 1), |rt| {
        let world = rt.world();
        let pair = rt.group_split(&world, |ep| ((ep.rank == 2) as i64, ep.rank as i64))?;
        let g = pair.into_iter().next().expect("own group");
        let mut ok = true;
        if rt.rank() < 2 {
            // Rank 2 is parked in a long sleep; the pair must not wait on it.
            let t = Instant::now();
            for _ in 0..20 {
                rt.barrier(&g)?;
            }
            rt.fence(&g)?;
            ok = t.elapsed() < Duration::from_millis(400);
        } else {
            std::thread::sleep(Duration::from_millis(600));
        }
        rt.barrier(&world)?;
        Ok(ok)
    })?;
    ensure(out.iter().all(|&b| b), || {
        "pair barrier waited on the third rank".into()
    })?;
    Ok("20 pair barriers without the third rank".into())
}

fn group_id_determinism(ctx: &Ctx) -> std::result::Result<String, String> {
    let out = job(ctx.config(3, 1), |rt| {
        let world = rt.world();
        let all: Vec<Endpoint> = world.members().to_vec();
        let a = rt.group_create(&all[..2]).ok();
        let s = rt.group_split(&world, |ep| (0, -(ep.rank as i64)))?;
        if let Some(a) = &a {
            rt.group_merge(a, &s[0])?;
        }
        rt.barrier(&world)?;
        Ok(rt.group_table_digest())
    })?;
    // Ranks 0 and 1 made the same calls; their tables must agree exactly.
    ensure(out[0] == out[1], || format!("tables differ: {out:?}"))?;
    Ok("identical call sequences give identical tables".into())
}

fn hybrid_polling_liveness(ctx: &Ctx) -> std::result::Result<String, String> {
    let cfg = ctx
        .config(2, 1)
        .with_sim_task_latency(Duration::from_millis(1));
    job(cfg, |rt| {
        let src = rt.alloc_symmetric(4096, 0)?;
        let dst = rt.alloc_symmetric(4096, 0)?;
        let peer = dst.addr.on_rank(1 - rt.rank());
        let mut rng = ChaCha8Rng::seed_from_u64(rt.rank() as u64);
        let streams: Vec<_> = (0..3)
            .map(|_| rt.stream_acquire(0))
            .collect::<Result<_>>()?;
        for i in 0..24u64 {
            if rng.gen_bool(0.5) {
                rt.put_bytes(peer.add(i * 64), &[i as u8; 64])?;
            } else {
                let s = &streams[rng.gen_range(0..3)];
                rt.put_on_stream(s, peer.add(i * 64), src.addr, 64)?;
            }
        }
        rt.fence_all()?;
        let left = rt.ledger_counts(&rt.world());
        rt.barrier(&rt.world())?;
        if left.rma + left.stream_events != 0 {
            return Err(Error::InvalidConfig(format!("{left:?} after fence")));
        }
        Ok(())
    })?;
    Ok("fence drained mixed RMA and stream work".into())
}

fn allreduce_f64(
    ctx: &Ctx,
    nranks: u32,
    devices: u16,
    count: usize,
) -> std::result::Result<Vec<Vec<f64>>, String> {
    job(ctx.config(nranks, devices), |rt| {
        let bufs = rt.alloc_symmetric_all_devices((count * 8) as u64)?;
        let comm = rt.comm_for(&rt.world())?;
        for (d, b) in bufs.iter().enumerate() {
            let pos = comm.position_of(rt.rank(), d as u16).unwrap() as u64;
            let vals: Vec<f64> = pattern(count * 8, pos)
                .chunks(8)
                .map(|c| c[0] as f64 / 7.0 - 13.1)
                .collect();
            rt.write_local(b.addr, &to_bytes(&vals))?;
        }
        rt.allreduce(
            &comm,
            bufs[0].addr,
            bufs[0].addr,
            count as u64,
            DType::F64,
            ReduceOp::Sum,
        )?;
        Ok(from_bytes::<f64>(
            &rt.read_local(bufs[0].addr, (count * 8) as u64)?,
        ))
    })
}

fn ring_oracle(inputs: &[Vec<f64>]) -> Vec<f64> {
    let n = inputs.len();
    let count = inputs[0].len();
    let mut out = vec![0.0; count];
    for k in 0..n {
        let (lo, hi) = (k * count / n, (k + 1) * count / n);
        for i in lo..hi {
            let mut acc = inputs[k][i];
            for j in 1..n {
                acc += inputs[(k + j) % n][i];
            }
            out[i] = acc;
        }
    }
    out
}

fn collective_determinism(ctx: &Ctx) -> std::result::Result<String, String> {
    let a = allreduce_f64(ctx, 2, 1, 3000)?;
    let b = allreduce_f64(ctx, 2, 1, 3000)?;
    ensure(a == b && a[0] == a[1], || "runs differ".into())?;
    Ok("two runs bitwise equal".into())
}

fn oracle_equivalence(ctx: &Ctx) -> std::result::Result<String, String> {
    let got = allreduce_f64(ctx, 3, 1, 1001)?;
    let inputs: Vec<Vec<f64>> = (0..3u64)
        .map(|p| {
            pattern(1001 * 8, p)
                .chunks(8)
                .map(|c| c[0] as f64 / 7.0 - 13.1)
                .collect()
        })
        .collect();
    let want = ring_oracle(&inputs);
    for g in &got {
        ensure(
            g.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()),
            || "0-ULP mismatch".into(),
        )?;
    }
    Ok("allreduce equals serial ring fold, 0 ULP".into())
}

fn endpoint_granularity(ctx: &Ctx) -> std::result::Result<String, String> {
    let spread = allreduce_f64(ctx, 2, 1, 2048)?;
    let packed = allreduce_f64(ctx, 1, 2, 2048)?;
    ensure(
        spread[0]
            .iter()
            .zip(&packed[0])
            .all(|(a, b)| a.to_bits() == b.to_bits()),
        || "1 rank x 2 devices differs from 2 ranks x 1 device".into(),
    )?;
    Ok("1x2 == 2x1 bitwise".into())
}

fn collective_isolation(ctx: &Ctx) -> std::result::Result<String, String> {
    let out = job(ctx.config(2, 1), |rt| {
        let world = rt.world();
        let c1 = rt.comm_bootstrap(&world)?;
        let c2 = rt.comm_bootstrap(&world)?;
        let a = rt.alloc_symmetric(8 * 512, 0)?;
        let b = rt.alloc_symmetric(8 * 512, 0)?;
        rt.write_local(a.addr, &to_bytes(&vec![rt.rank() as i64 + 1; 512]))?;
        rt.write_local(b.addr, &to_bytes(&vec![10 * (rt.rank() as i64 + 1); 512]))?;
        // Opposite call orders on the two ranks interleave the traffic.
        if rt.rank() == 0 {
            rt.allreduce(&c1, a.addr, a.addr, 512, DType::I64, ReduceOp::Sum)?;
            rt.allreduce(&c2, b.addr, b.addr, 512, DType::I64, ReduceOp::Sum)?;
        } else {
            let rt2 = rt.clone();
            let c2b = c2.clone();
            let baddr = b.addr;
            let th = std::thread::spawn(move || {
                rt2.allreduce(&c2b, baddr, baddr, 512, DType::I64, ReduceOp::Sum)
            });
            rt.allreduce(&c1, a.addr, a.addr, 512, DType::I64, ReduceOp::Sum)?;
            th.join().expect("collective thread")?;
        }
        let x = from_bytes::<i64>(&rt.read_local(a.addr, 8 * 512)?);
        let y = from_bytes::<i64>(&rt.read_local(b.addr, 8 * 512)?);
        Ok(x.iter().all(|&v| v == 3)
            && y.iter().all(|&v| v == 30)
            && c1.unique_id() != c2.unique_id())
    })?;
    ensure(out.iter().all(|&b| b), || {
        "cross-talk between communicators".into()
    })?;
    Ok("concurrent allreduces on two communicators".into())
}

fn matmul_residual(ctx: &Ctx) -> std::result::Result<String, String> {
    let out = job(ctx.config(2, 1), |rt| {
        cannon_matmul(rt, &MatmulSpec::new(48))
    })?;
    let r = out[0].residual;
    ensure(r <= 1e-10, || format!("residual {r:e}"))?;
    Ok(format!("N=48, residual {r:.1e}"))
}

fn overlap_discipline(ctx: &Ctx) -> std::result::Result<String, String> {
    let cfg = ctx
        .config(2, 1)
        .with_sim_task_latency(Duration::from_millis(5));
    let out = job(cfg, |rt| cannon_matmul(rt, &MatmulSpec::new(16)))?;
    let steps = out[0].overlapped_steps;
    ensure(steps >= 2, || format!("only {steps} of 2 steps overlapped"))?;
    Ok("compute and prefetch overlap in every step".into())
}

fn stencil_independence(ctx: &Ctx) -> std::result::Result<String, String> {
    let spec = StencilSpec::cube(16, 10);
    let one = job(ctx.config(1, 1), |rt| stencil_minimod(rt, &spec))?;
    let two = job(ctx.config(2, 1), |rt| stencil_minimod(rt, &spec))?;
    let a = one[0].field.as_ref().unwrap();
    let b = two[0].field.as_ref().unwrap();
    ensure(
        a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
        || "fields differ".into(),
    )?;
    ensure(a.iter().any(|&v| v != 0.0), || "field is all zero".into())?;
    Ok("16^3, 10 steps: 1 rank == 2 ranks bitwise".into())
}

fn benchmark_accounting(ctx: &Ctx) -> std::result::Result<String, String> {
    let spec = BenchSpec {
        kind: BenchKind::Bandwidth,
        sizes: vec![64, 1024, 4096],
        iters: 5,
        warmup: 1,
    };
    let out = job(ctx.config(2, 1), |rt| bench_p2p(rt, &spec))?;
    for row in &out[0] {
        let want = row.size_bytes * row.iters as u64;
        ensure(row.bytes_moved == want, || {
            format!("{} bytes for {want}", row.bytes_moved)
        })?;
    }
    Ok("bytes per row == size x iters".into())
}

fn node_assignment(_: &Ctx) -> std::result::Result<String, String> {
    ensure(block_node_map(4, 2) == vec![0, 0, 1, 1], || {
        "4 over 2".into()
    })?;
    ensure(block_node_map(5, 2) == block_node_map(5, 2), || {
        "not repeatable".into()
    })?;
    Ok("block map repeatable".into())
}

fn clean_teardown(ctx: &Ctx) -> std::result::Result<String, String> {
    let start = Instant::now();
    let res = run_local(ctx.config(3, 1), |rt| {
        if rt.rank() == 1 {
            return Err(Error::InvalidConfig("injected rank failure".into()));
        }
        rt.barrier(&rt.world())
    });
    let took = start.elapsed();
    ensure(matches!(res, Err(Error::InvalidConfig(_))), || {
        format!("{res:?}")
    })?;
    ensure(took < Duration::from_secs(5), || {
        format!("teardown took {took:?}")
    })?;
    Ok(format!(
        "failing rank released peers in {:.0} ms",
        took.as_secs_f64() * 1e3
    ))
}
