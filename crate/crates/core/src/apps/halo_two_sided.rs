//! Halo exchange emulating matched two-sided messaging: every boundary
//! slab is packed, sent, received by a matching call on the neighbour and
//! unpacked into the halo.

use super::stencil::Slab;
use crate::error::{Error, Result};
use crate::ids::derive_id;
use crate::runtime::Runtime;

const TO_LEFT: u64 = 0;
const TO_RIGHT: u64 = 1;

fn tag(step: u64, dir: u64, receiver: usize) -> u64 {
    derive_id("halo", &[step, dir, receiver as u64])
}

/// Sends both boundary slabs of every local position, then receives the
/// neighbours' slabs into the halos.
pub fn exchange_halos(rt: &Runtime, slab: &Slab, field: u64, step: u64) -> Result<()> {
    let (r, len) = (slab.radius, slab.halo_bytes());
    let mine: Vec<usize> = (0..slab.ring.len())
        .filter(|&p| slab.ring[p].rank == rt.rank())
        .collect();
    let transport = rt.transport();
    let mut sends = Vec::new();
    for &p in &mine {
        if let Some(left) = slab.left(p) {
            let packed = rt.read_local(slab.addr(p, field, r), len)?;
            let dst = slab.ring[left].rank;
            sends.push(transport.send_staged(dst, tag(step, TO_LEFT, left), packed)?);
        }
        if let Some(right) = slab.right(p) {
            let packed = rt.read_local(slab.addr(p, field, slab.last_interior(p)), len)?;
            let dst = slab.ring[right].rank;
            sends.push(transport.send_staged(dst, tag(step, TO_RIGHT, right), packed)?);
        }
    }
    for &p in &mine {
        if let Some(right) = slab.right(p) {
            let src = slab.ring[right].rank;
            let data = transport.recv(src, tag(step, TO_LEFT, p), rt.timeout())?;
            if data.len() as u64 != len {
                return Err(Error::ShapeMismatch(format!(
                    "halo from position {right} has {} bytes, expected {len}",
                    data.len()
                )));
            }
            rt.write_local(slab.addr(p, field, slab.right_halo(p)), &data)?;
        }
        if let Some(left) = slab.left(p) {
            let src = slab.ring[left].rank;
            let data = transport.recv(src, tag(step, TO_RIGHT, p), rt.timeout())?;
            if data.len() as u64 != len {
                return Err(Error::ShapeMismatch(format!(
                    "halo from position {left} has {} bytes, expected {len}",
                    data.len()
                )));
            }
            rt.write_local(slab.addr(p, field, 0), &data)?;
        }
    }
    for s in sends {
        s.wait()?;
    }
    Ok(())
}
