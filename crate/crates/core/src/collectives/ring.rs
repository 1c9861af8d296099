//! Ring broadcast, reduce and allreduce.
//!
//! Data moves in chunks of at most 1 MiB. Each chunk carries a 16-byte
//! preamble (element type, op, element count) so mismatched calls fail
//! instead of mixing buffers. Hops between endpoints of the same rank never
//! touch the transport.
//!
//! Combination order is fixed by ring position, so float results are
//! reproducible bit for bit:
//! * reduce folds `x[r+1], x[r+2], ..., x[r-1]` and finally the root's own
//!   `x[r]`, each step computing `incoming (op) own`;
//! * allreduce segment `k` folds `x[k], x[k+1], ..., x[k-1]` the same way
//!   during reduce-scatter, then is copied around during allgather.

use std::collections::HashMap;

use super::ops::{combine_bytes, DType, ReduceOp};
use super::Communicator;
use crate::error::{Error, Result};
use crate::ids::derive_id;
use crate::memory::GlobalAddress;
use crate::runtime::Runtime;
use crate::transport::CompletionHandle;

const PREAMBLE: usize = 16;
const CHUNK: usize = 1 << 20;
const RAW_BYTES: u8 = 0xff;

#[derive(Clone, Copy)]
struct Shape {
    dtype: u8,
    op: u8,
    count: u64,
}

impl Shape {
    fn encode(self) -> [u8; PREAMBLE] {
        let mut out = [0u8; PREAMBLE];
        out[0] = self.dtype;
        out[1] = self.op;
        out[8..].copy_from_slice(&self.count.to_le_bytes());
        out
    }
}

/// One collective call's traffic: tags, local shortcuts and pending ACKs.
struct Mover<'a> {
    rt: &'a Runtime,
    comm: &'a Communicator,
    seq: u64,
    shape: Shape,
    local: HashMap<u64, Vec<u8>>,
    acks: Vec<CompletionHandle>,
}

impl<'a> Mover<'a> {
    fn new(rt: &'a Runtime, comm: &'a Communicator, shape: Shape) -> Self {
        Mover {
            rt,
            comm,
            seq: comm.next_seq(),
            shape,
            local: HashMap::new(),
            acks: Vec::new(),
        }
    }

    fn tag(&self, phase: u64, step: u64, chunk: u64, to: usize) -> u64 {
        let [lo, hi] = self.comm.unique_id().halves();
        derive_id(
            "collective",
            &[lo, hi, self.seq, phase, step, chunk, to as u64],
        )
    }

    fn send(&mut self, tag: u64, to: usize, data: &[u8]) -> Result<()> {
        let dst = self.comm.ring()[to].rank;
        if dst == self.rt.rank() {
            self.local.insert(tag, data.to_vec());
            return Ok(());
        }
        let mut frame = Vec::with_capacity(PREAMBLE + data.len());
        frame.extend_from_slice(&self.shape.encode());
        frame.extend_from_slice(data);
        let h = self.rt.transport().send_staged(dst, tag, frame)?;
        self.acks.push(h);
        Ok(())
    }

    fn recv(&mut self, tag: u64, from: usize, len: usize) -> Result<Vec<u8>> {
        let src = self.comm.ring()[from].rank;
        if src == self.rt.rank() {
            return self
                .local
                .remove(&tag)
                .ok_or_else(|| Error::TransportFailure("local ring hop delivered nothing".into()));
        }
        let mut frame = self
            .rt
            .transport()
            .recv(src, tag, self.rt.timeout())
            .map_err(|e| match e {
                Error::HandshakeTimeout(m) => {
                    Error::PeerFailure(format!("collective stalled: {m}"))
                }
                other => other,
            })?;
        if frame.len() < PREAMBLE || frame[..PREAMBLE] != self.shape.encode() {
            return Err(Error::TypeMismatch(format!(
                "ring position {from} sent a chunk for a different call (dtype/op/count differ)"
            )));
        }
        if frame.len() - PREAMBLE != len {
            return Err(Error::ShapeMismatch(format!(
                "expected a {len}-byte chunk from position {from}, got {}",
                frame.len() - PREAMBLE
            )));
        }
        frame.drain(..PREAMBLE);
        Ok(frame)
    }

    fn finish(self) -> Result<()> {
        for h in self.acks {
            h.wait()?;
        }
        Ok(())
    }
}

fn chunk_bytes(rt: &Runtime, elem: usize) -> usize {
    let cap = (rt.config().fragment_bytes as usize).saturating_sub(PREAMBLE);
    let c = CHUNK.min(cap);
    (c / elem).max(1) * elem
}

/// `(start, len)` of chunk `c` inside a `total`-byte range.
fn chunk_range(total: usize, chunk: usize, c: usize) -> Option<(usize, usize)> {
    let start = c * chunk;
    (start < total).then(|| (start, chunk.min(total - start)))
}

fn chunks_in(total: usize, chunk: usize) -> usize {
    total.div_ceil(chunk)
}

impl Runtime {
    fn check_buffers(&self, comm: &Communicator, offset: u64, len: u64) -> Result<()> {
        if len == 0 {
            return Ok(());
        }
        for &p in comm.my_positions() {
            self.local_memory().check(comm.buffer_at(p, offset), len)?;
        }
        Ok(())
    }

    fn check_comm(&self, comm: &Communicator) -> Result<()> {
        self.check_open()?;
        self.live_group(comm.group())?;
        if comm.my_positions().is_empty() {
            return Err(Error::NotMember {
                rank: self.rank(),
                group: comm.group().id(),
            });
        }
        Ok(())
    }

    /// Copies `nbytes` at ring position `root` into the same offset on every
    /// member. `buf.offset` names the buffer; each member endpoint uses its
    /// own device.
    pub fn bcast(
        &self,
        comm: &Communicator,
        buf: GlobalAddress,
        nbytes: u64,
        root: usize,
    ) -> Result<()> {
        self.check_comm(comm)?;
        let n = comm.size();
        if root >= n {
            return Err(Error::RootOutOfRange { root, size: n });
        }
        self.check_buffers(comm, buf.offset, nbytes)?;
        if n == 1 || nbytes == 0 {
            return Ok(());
        }
        let total = nbytes as usize;
        let chunk = chunk_bytes(self, 1);
        let shape = Shape {
            dtype: RAW_BYTES,
            op: 0,
            count: nbytes,
        };
        let mut mv = Mover::new(self, comm, shape);
        // Chain index j = distance from the root along the ring.
        let mut mine: Vec<(usize, usize)> = comm
            .my_positions()
            .iter()
            .map(|&p| ((p + n - root) % n, p))
            .collect();
        mine.sort_unstable();
        for c in 0..chunks_in(total, chunk) {
            let (start, len) = chunk_range(total, chunk, c).expect("chunk in range");
            for &(j, p) in &mine {
                let at = comm.buffer_at(p, buf.offset + start as u64);
                let data = if j == 0 {
                    self.read_local(at, len as u64)?
                } else {
                    let prev = (p + n - 1) % n;
                    let data = mv.recv(mv.tag(0, 0, c as u64, p), prev, len)?;
                    self.write_local(at, &data)?;
                    data
                };
                if j + 1 < n {
                    let next = (p + 1) % n;
                    mv.send(mv.tag(0, 0, c as u64, next), next, &data)?;
                }
            }
        }
        mv.finish()
    }

    /// Combines `count` elements of every member's `send` buffer into the
    /// root's `recv` buffer. Other members' `recv` buffers are untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn reduce(
        &self,
        comm: &Communicator,
        send: GlobalAddress,
        recv: GlobalAddress,
        count: u64,
        dtype: DType,
        op: ReduceOp,
        root: usize,
    ) -> Result<()> {
        self.check_comm(comm)?;
        let n = comm.size();
        if root >= n {
            return Err(Error::RootOutOfRange { root, size: n });
        }
        let total = count as usize * dtype.size();
        self.check_buffers(comm, send.offset, total as u64)?;
        self.check_buffers(comm, recv.offset, total as u64)?;
        if total == 0 {
            return Ok(());
        }
        let chunk = chunk_bytes(self, dtype.size());
        let shape = Shape {
            dtype: dtype.code(),
            op: op.code(),
            count,
        };
        let mut mv = Mover::new(self, comm, shape);
        // Chain index j: the member right after the root starts (j = 0) and
        // the root itself finishes (j = n - 1).
        let mut mine: Vec<(usize, usize)> = comm
            .my_positions()
            .iter()
            .map(|&p| ((p + n - root - 1) % n, p))
            .collect();
        mine.sort_unstable();
        for c in 0..chunks_in(total, chunk) {
            let (start, len) = chunk_range(total, chunk, c).expect("chunk in range");
            for &(j, p) in &mine {
                let mut acc =
                    self.read_local(comm.buffer_at(p, send.offset + start as u64), len as u64)?;
                if j > 0 {
                    let prev = (p + n - 1) % n;
                    let incoming = mv.recv(mv.tag(1, 0, c as u64, p), prev, len)?;
                    combine_bytes(dtype, op, &incoming, &mut acc)?;
                }
                if p == root {
                    self.write_local(comm.buffer_at(p, recv.offset + start as u64), &acc)?;
                } else {
                    let next = (p + 1) % n;
                    mv.send(mv.tag(1, 0, c as u64, next), next, &acc)?;
                }
            }
        }
        mv.finish()
    }

    /// Ring reduce-scatter followed by ring allgather; every member's `recv`
    /// ends up with the combined vector. `send` and `recv` may alias.
    pub fn allreduce(
        &self,
        comm: &Communicator,
        send: GlobalAddress,
        recv: GlobalAddress,
        count: u64,
        dtype: DType,
        op: ReduceOp,
    ) -> Result<()> {
        self.check_comm(comm)?;
        let n = comm.size();
        let esize = dtype.size();
        let total = count as usize * esize;
        self.check_buffers(comm, send.offset, total as u64)?;
        self.check_buffers(comm, recv.offset, total as u64)?;
        if total == 0 {
            return Ok(());
        }
        for &p in comm.my_positions() {
            if send.offset != recv.offset {
                let bytes = self.read_local(comm.buffer_at(p, send.offset), total as u64)?;
                self.write_local(comm.buffer_at(p, recv.offset), &bytes)?;
            }
        }
        if n == 1 {
            return Ok(());
        }
        let seg = |k: usize| -> (usize, usize) {
            let k = k % n;
            let lo = k * count as usize / n;
            let hi = (k + 1) * count as usize / n;
            (lo * esize, (hi - lo) * esize)
        };
        let chunk = chunk_bytes(self, esize);
        let max_chunks = (0..n)
            .map(|k| chunks_in(seg(k).1, chunk))
            .max()
            .unwrap_or(0);
        let shape = Shape {
            dtype: dtype.code(),
            op: op.code(),
            count,
        };
        let mut mv = Mover::new(self, comm, shape);
        let mine = comm.my_positions().to_vec();
        for phase in 0..2u64 {
            for step in 0..n - 1 {
                for c in 0..max_chunks {
                    for &p in &mine {
                        // Reduce-scatter sends segment p - s, allgather p + 1 - s.
                        let k = if phase == 0 {
                            p + n - step
                        } else {
                            p + 1 + n - step
                        };
                        let (base, seg_len) = seg(k);
                        let Some((start, len)) = chunk_range(seg_len, chunk, c) else {
                            continue;
                        };
                        let next = (p + 1) % n;
                        let at = comm.buffer_at(p, recv.offset + (base + start) as u64);
                        let data = self.read_local(at, len as u64)?;
                        mv.send(mv.tag(2 + phase, step as u64, c as u64, next), next, &data)?;
                    }
                    for &p in &mine {
                        let k = if phase == 0 {
                            p + 2 * n - 1 - step
                        } else {
                            p + n - step
                        };
                        let (base, seg_len) = seg(k);
                        let Some((start, len)) = chunk_range(seg_len, chunk, c) else {
                            continue;
                        };
                        let prev = (p + n - 1) % n;
                        let incoming =
                            mv.recv(mv.tag(2 + phase, step as u64, c as u64, p), prev, len)?;
                        let at = comm.buffer_at(p, recv.offset + (base + start) as u64);
                        if phase == 0 {
                            let seg_dev = self.segment(at.device)?;
                            seg_dev.with_slice_mut(at.offset, len as u64, |own| {
                                combine_bytes(dtype, op, &incoming, own)
                            })??;
                        } else {
                            self.write_local(at, &incoming)?;
                        }
                    }
                }
            }
        }
        mv.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_the_range() {
        assert_eq!(chunks_in(0, 4), 0);
        assert_eq!(chunks_in(9, 4), 3);
        assert_eq!(chunk_range(9, 4, 2), Some((8, 1)));
        assert_eq!(chunk_range(9, 4, 3), None);
    }

    #[test]
    fn preamble_layout() {
        let s = Shape {
            dtype: 2,
            op: 1,
            count: 0x0102,
        };
        let b = s.encode();
        assert_eq!(&b[..2], &[2, 1]);
        assert_eq!(&b[8..10], &[0x02, 0x01]);
    }
}
