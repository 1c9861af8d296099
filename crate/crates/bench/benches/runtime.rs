use std::hint::black_box;
use std::time::{Duration, Instant};

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use diomp::memory::{Allocator, Direction};
use diomp::stream::StreamPool;
use diomp::{AllocatorKind, DType, GlobalAddress, LocalBuf, PathKind, ReduceOp, TransferKind};
use diomp_bench::{grid_config, pair_config, timed};

fn allocator(c: &mut Criterion) {
    let sizes = [64u64, 300, 4096, 777, 65536, 16, 9000, 1 << 20];
    let mut group = c.benchmark_group("allocator");
    for kind in [AllocatorKind::Linear, AllocatorKind::Buddy] {
        group.bench_function(kind.to_string(), |b| {
            let mut a = Allocator::new(kind, 0, 64 << 20, 256, Direction::Upward);
            b.iter(|| {
                let blocks: Vec<_> = sizes.iter().map(|&s| a.allocate(s).unwrap()).collect();
                for blk in blocks.iter().rev() {
                    a.release(blk.offset).unwrap();
                }
                black_box(blocks.len())
            })
        });
    }
    group.finish();
}

fn put_fence(c: &mut Criterion) {
    let mut group = c.benchmark_group("put_fence");
    group.sample_size(10).measurement_time(Duration::from_secs(3));
    for path in [
        PathKind::IntraProcess,
        PathKind::PeerFabric,
        PathKind::IntraNodeIPC,
        PathKind::InterNode,
    ] {
        for size in [8u64, 65536] {
            group.throughput(Throughput::Bytes(size));
            let id = BenchmarkId::new(format!("{path:?}"), size);
            group.bench_with_input(id, &size, |b, &size| {
                b.iter_custom(|iters| {
                    let cfg = pair_config(path);
                    let (dst_rank, dst_dev) = (cfg.nranks - 1, cfg.devices_per_rank - 1);
                    timed(cfg, |rt| {
                        let bufs = rt.alloc_symmetric_all_devices(size)?;
                        let payload = vec![0xA5u8; size as usize];
                        let dst = GlobalAddress::new(dst_rank, dst_dev, bufs[0].addr.offset);
                        let world = rt.world();
                        rt.barrier(&world)?;
                        let start = Instant::now();
                        if rt.rank() == 0 {
                            for _ in 0..iters {
                                rt.put(dst, LocalBuf::Host(&payload), TransferKind::H2D)?;
                                rt.fence_all()?;
                            }
                        }
                        let elapsed = start.elapsed();
                        rt.barrier(&world)?;
                        Ok(elapsed)
                    })
                })
            });
        }
    }
    group.finish();
}

fn allreduce(c: &mut Criterion) {
    const COUNT: u64 = 1 << 18;
    let mut group = c.benchmark_group("allreduce_f32_1MiB");
    group.sample_size(10).measurement_time(Duration::from_secs(5));
    group.throughput(Throughput::Bytes(COUNT * 4));
    for (ranks, devices) in [(1u32, 4u16), (4, 1), (2, 2)] {
        group.bench_function(format!("{ranks}x{devices}"), |b| {
            b.iter_custom(|iters| {
                timed(grid_config(ranks, devices), |rt| {
                    let comm = rt.comm_for(&rt.world())?;
                    let bufs = rt.alloc_symmetric_all_devices(COUNT * 4)?;
                    let ones: Vec<u8> = (0..COUNT).flat_map(|_| 1.0f32.to_le_bytes()).collect();
                    for b in &bufs {
                        rt.write_local(b.addr, &ones)?;
                    }
                    let buf = bufs[0].addr;
                    rt.barrier(&rt.world())?;
                    let start = Instant::now();
                    for _ in 0..iters {
                        rt.allreduce(&comm, buf, buf, COUNT, DType::F32, ReduceOp::Max)?;
                    }
                    Ok(start.elapsed())
                })
            })
        });
    }
    group.finish();
}

fn streams(c: &mut Criterion) {
    let mut group = c.benchmark_group("stream_pool");
    for max in [1usize, 8] {
        group.bench_function(format!("acquire_submit_release/max{max}"), |b| {
            let pool = StreamPool::new(0, max, Duration::ZERO);
            b.iter(|| {
                let s = pool.acquire();
                let ev = s.submit_fn(|| Ok(())).unwrap();
                ev.wait().unwrap();
                s.release();
            });
            pool.sync_all();
        });
    }
    group.finish();
}

criterion_group!(benches, allocator, put_fence, allreduce, streams);
criterion_main!(benches);
