//! Halo exchange with one-sided puts.

use super::stencil::Slab;
use crate::error::Result;
use crate::runtime::{LocalBuf, Runtime, TransferKind};

/// Pushes each local slab's boundary planes straight into the neighbours'
/// halos, then waits for delivery and for the neighbours to do the same.
pub fn exchange_halos(rt: &Runtime, slab: &Slab, field: u64) -> Result<()> {
    let world = rt.world();
    let (r, len) = (slab.radius, slab.halo_bytes());
    for p in (0..slab.ring.len()).filter(|&p| slab.ring[p].rank == rt.rank()) {
        if let Some(left) = slab.left(p) {
            let src = LocalBuf::Device(slab.addr(p, field, r), len);
            rt.put(
                slab.addr(left, field, slab.right_halo(left)),
                src,
                TransferKind::D2D,
            )?;
        }
        if let Some(right) = slab.right(p) {
            let src = LocalBuf::Device(slab.addr(p, field, slab.last_interior(p)), len);
            rt.put(slab.addr(right, field, 0), src, TransferKind::D2D)?;
        }
    }
    rt.fence(&world)?;
    rt.barrier(&world)
}
