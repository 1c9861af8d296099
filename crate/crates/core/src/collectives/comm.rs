use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ids::derive_id;
use crate::memory::GlobalAddress;
use crate::runtime::{Group, Runtime};
use crate::transport::{Endpoint, Opcode};

/// 128-bit communicator identity chosen by the root rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UniqueId(pub u128);

impl UniqueId {
    pub(crate) fn fresh() -> Self {
        UniqueId(rand::random())
    }

    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_le_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; 16] = bytes.try_into().map_err(|_| Error::TruncatedFrame {
            needed: 16,
            available: bytes.len() as u64,
        })?;
        Ok(UniqueId(u128::from_le_bytes(arr)))
    }

    pub(crate) fn halves(self) -> [u64; 2] {
        [self.0 as u64, (self.0 >> 64) as u64]
    }
}

impl fmt::Display for UniqueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

/// Collective channel over the endpoints of one group.
#[derive(Debug)]
pub struct Communicator {
    group: Group,
    unique_id: UniqueId,
    ring: Vec<Endpoint>,
    my_positions: Vec<usize>,
    seq: AtomicU64,
}

impl Communicator {
    fn new(group: Group, unique_id: UniqueId, me: u32) -> Self {
        let members = group.members();
        let root_rank = members
            .iter()
            .map(|e| e.rank)
            .min()
            .expect("non-empty group");
        let lead = members
            .iter()
            .position(|e| e.rank == root_rank)
            .expect("root owns a member");
        let ring: Vec<Endpoint> = members[lead..]
            .iter()
            .chain(&members[..lead])
            .copied()
            .collect();
        let my_positions = ring
            .iter()
            .enumerate()
            .filter(|(_, e)| e.rank == me)
            .map(|(i, _)| i)
            .collect();
        Communicator {
            group,
            unique_id,
            ring,
            my_positions,
            seq: AtomicU64::new(0),
        }
    }

    pub fn group(&self) -> &Group {
        &self.group
    }

    pub fn unique_id(&self) -> UniqueId {
        self.unique_id
    }

    /// Member endpoints in ring order; position 0 belongs to the root rank.
    pub fn ring(&self) -> &[Endpoint] {
        &self.ring
    }

    /// Ring positions of the caller's endpoints, ascending.
    pub fn my_positions(&self) -> &[usize] {
        &self.my_positions
    }

    pub fn size(&self) -> usize {
        self.ring.len()
    }

    /// Ring position of `(rank, device)`.
    pub fn position_of(&self, rank: u32, device: u16) -> Option<usize> {
        self.ring
            .iter()
            .position(|e| e.rank == rank && e.device == device)
    }

    /// Where the symmetric buffer at `offset` lives on ring position `pos`.
    pub fn buffer_at(&self, pos: usize, offset: u64) -> GlobalAddress {
        let ep = self.ring[pos];
        GlobalAddress::new(ep.rank, ep.device, offset)
    }

    pub(crate) fn next_seq(&self) -> u64 {
        self.seq.fetch_add(1, Ordering::AcqRel)
    }
}

impl Runtime {
    /// Collective over the ranks owning members of `g`: the lowest such
    /// rank draws a [`UniqueId`] and sends it to the others.
    pub fn comm_bootstrap(&self, g: &Group) -> Result<Arc<Communicator>> {
        self.check_open()?;
        let g = self.live_group(g)?;
        if !g.has_rank(self.rank()) {
            return Err(Error::NotMember {
                rank: self.rank(),
                group: g.id(),
            });
        }
        let ranks = g.ranks();
        let root = ranks[0];
        let call = {
            let mut calls = self.inner.bootstrap_calls.lock();
            let c = calls.entry(g.id()).or_insert(0);
            *c += 1;
            *c
        };
        let tag = derive_id("comm-bootstrap", &[g.id(), call]);
        let id = if self.rank() == root {
            let id = UniqueId::fresh();
            for &r in &ranks[1..] {
                self.transport()
                    .notify(r, Opcode::Bootstrap, tag, id.to_bytes().to_vec())?;
            }
            id
        } else {
            UniqueId::from_bytes(&self.transport().recv(root, tag, self.timeout())?)?
        };
        self.inner.bootstraps.fetch_add(1, Ordering::Relaxed);
        Ok(Arc::new(Communicator::new(g, id, self.rank())))
    }

    /// The cached communicator of `g`, bootstrapping it on first use.
    pub fn comm_for(&self, g: &Group) -> Result<Arc<Communicator>> {
        let g = self.live_group(g)?;
        if let Some(c) = self.inner.comms.lock().get(&g.id()) {
            return Ok(c.clone());
        }
        let comm = self.comm_bootstrap(&g)?;
        self.inner.comms.lock().insert(g.id(), comm.clone());
        Ok(comm)
    }

    /// Number of communicator bootstraps this rank has taken part in.
    pub fn bootstrap_count(&self) -> u64 {
        self.inner.bootstraps.load(Ordering::Relaxed)
    }

    /// Broadcasts `nbytes` at `var` from the group's first endpoint to every
    /// member, through the group's cached communicator.
    pub fn device_bcast(&self, var: GlobalAddress, nbytes: u64, g: &Group) -> Result<()> {
        let comm = self.comm_for(g)?;
        let first = g.members()[0];
        let root = comm
            .position_of(first.rank, first.device)
            .expect("first member is in the ring");
        self.bcast(&comm, var, nbytes, root)
    }
}
