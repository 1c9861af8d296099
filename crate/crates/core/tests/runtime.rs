use std::time::Duration;

use diomp::collectives::{from_bytes, to_bytes};
use diomp::{
    run_local, DType, Error, GetDst, LaunchConfig, LocalBuf, PathKind, ReduceOp, TransferKind,
    TransportKind,
};

fn quick(n: u32, devices: u16) -> LaunchConfig {
    LaunchConfig::new(n, devices).with_timeout(Duration::from_secs(20))
}

#[test]
fn ring_of_puts_lands_on_the_neighbour() {
    let got = run_local(quick(4, 1), |rt| {
        let rec = rt.alloc_symmetric(8, 0)?;
        let next = (rt.rank() + 1) % rt.nranks();
        let dst = rt.translate(rec.addr, next)?;
        rt.put_bytes(dst, &(rt.rank() as u64 + 100).to_le_bytes())?;
        rt.fence_all()?;
        rt.barrier(&rt.world())?;
        let v = rt.read_local(rec.addr, 8)?;
        Ok(u64::from_le_bytes(v.try_into().unwrap()))
    })
    .unwrap();
    assert_eq!(got, vec![103, 100, 101, 102]);
}

#[test]
fn inter_node_pairs_use_tcp() {
    let cfg = quick(2, 1)
        .with_node_count(2)
        .with_transport(TransportKind::Tcp);
    let out = run_local(cfg, |rt| {
        let rec = rt.alloc_symmetric(1 << 20, 0)?;
        let peer = 1 - rt.rank();
        let data: Vec<u8> = (0..1 << 20)
            .map(|i| (i as u32 * 7 + rt.rank()) as u8)
            .collect();
        rt.put(
            rt.translate(rec.addr, peer)?,
            LocalBuf::Host(&data),
            TransferKind::H2D,
        )?
        .wait()?;
        rt.barrier(&rt.world())?;
        let h = rt.get(
            rt.translate(rec.addr, peer)?,
            1 << 20,
            GetDst::Host,
            TransferKind::D2H,
        )?;
        h.wait()?;
        let back = h.take_bytes().unwrap();
        Ok((back == data, rt.path_stats().ops(PathKind::InterNode)))
    })
    .unwrap();
    for (same, inter) in out {
        assert!(same);
        assert_eq!(inter, 2);
    }
}

#[test]
fn allreduce_sums_ranks() {
    let out = run_local(quick(3, 1), |rt| {
        let rec = rt.alloc_symmetric(8 * 1000, 0)?;
        let vals: Vec<i64> = (0..1000).map(|i| i * (rt.rank() as i64 + 1)).collect();
        rt.write_local(rec.addr, &to_bytes(&vals))?;
        let comm = rt.comm_for(&rt.world())?;
        rt.allreduce(&comm, rec.addr, rec.addr, 1000, DType::I64, ReduceOp::Sum)?;
        Ok(from_bytes::<i64>(&rt.read_local(rec.addr, 8000)?))
    })
    .unwrap();
    let want: Vec<i64> = (0..1000).map(|i| i * 6).collect();
    for v in out {
        assert_eq!(v, want);
    }
}

#[test]
fn stale_cell_after_free() {
    let out = run_local(quick(2, 1), |rt| {
        let cell = rt.alloc_asymmetric(64 * (rt.rank() as u64 + 1), 0)?;
        let peer = 1 - rt.rank();
        let p = rt.resolve_cell(&cell, peer)?;
        rt.free_cell(&cell)?;
        let after = rt.resolve_cell(&cell, peer);
        Ok((p.size, matches!(after, Err(Error::StaleCell(_)))))
    })
    .unwrap();
    assert_eq!(out, vec![(128, true), (64, true)]);
}
