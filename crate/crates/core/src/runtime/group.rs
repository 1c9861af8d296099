use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Runtime;
use crate::error::{Error, Result};
use crate::ids::{derive_id, digest_bytes};
use crate::transport::{Endpoint, Opcode};

/// Id of the group holding every endpoint.
pub const WORLD_GROUP_ID: u64 = 0;

/// Ordered set of device endpoints.
///
/// Groups made by create and merge are sorted by `(rank, device)`; groups
/// produced by split keep the `(key, rank, device)` order of the split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    id: u64,
    members: Arc<[Endpoint]>,
    parent: Option<u64>,
}

impl Group {
    pub(crate) fn new(id: u64, members: Vec<Endpoint>, parent: Option<u64>) -> Self {
        Group {
            id,
            members: members.into(),
            parent,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn members(&self) -> &[Endpoint] {
        &self.members
    }

    pub fn parent(&self) -> Option<u64> {
        self.parent
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Distinct ranks owning at least one member, ascending.
    pub fn ranks(&self) -> Vec<u32> {
        let mut r: Vec<u32> = self.members.iter().map(|e| e.rank).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn contains(&self, ep: &Endpoint) -> bool {
        self.members.iter().any(|m| m.key() == ep.key())
    }

    pub fn has_rank(&self, rank: u32) -> bool {
        self.members.iter().any(|m| m.rank == rank)
    }

    /// Position of `(rank, device)` in member order.
    pub fn position(&self, rank: u32, device: u16) -> Option<usize> {
        self.members.iter().position(|m| m.key() == (rank, device))
    }
}

#[derive(Debug, Default)]
pub(crate) struct GroupTable {
    live: BTreeMap<u64, Group>,
    create_calls: HashMap<u64, u64>,
    next_ordinal: u64,
    merge_calls: HashMap<(u64, u64), u64>,
    split_calls: HashMap<u64, u64>,
    barrier_epochs: HashMap<u64, u64>,
}

impl GroupTable {
    pub(crate) fn with_world(world: Group) -> Self {
        let mut t = GroupTable::default();
        t.live.insert(world.id, world);
        t
    }

    pub(crate) fn get(&self, id: u64) -> Option<&Group> {
        self.live.get(&id)
    }

    pub(crate) fn insert(&mut self, g: Group) {
        self.live.insert(g.id, g);
    }

    pub(crate) fn remove(&mut self, id: u64) -> Option<Group> {
        self.live.remove(&id)
    }

    pub(crate) fn next_barrier_epoch(&mut self, id: u64) -> u64 {
        let e = self.barrier_epochs.entry(id).or_insert(0);
        *e += 1;
        *e
    }

    /// Canonical digest of every live group, for cross-rank comparison.
    pub(crate) fn digest(&self) -> u64 {
        let mut bytes = Vec::new();
        for (id, g) in &self.live {
            bytes.extend_from_slice(&id.to_le_bytes());
            for m in g.members() {
                bytes.extend_from_slice(&m.rank.to_le_bytes());
                bytes.extend_from_slice(&m.device.to_le_bytes());
            }
            bytes.push(0xff);
        }
        digest_bytes(&bytes)
    }

    pub(crate) fn len(&self) -> usize {
        self.live.len()
    }
}

fn membership_digest(members: &[Endpoint]) -> u64 {
    let mut bytes = Vec::with_capacity(members.len() * 6);
    for m in members {
        bytes.extend_from_slice(&m.rank.to_le_bytes());
        bytes.extend_from_slice(&m.device.to_le_bytes());
    }
    digest_bytes(&bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitVote {
    entries: Vec<(u32, u16, i64, i64)>,
}

impl Runtime {
    pub(crate) fn live_group(&self, g: &Group) -> Result<Group> {
        self.inner
            .groups
            .lock()
            .get(g.id)
            .filter(|live| live.members == g.members)
            .cloned()
            .ok_or(Error::StaleGroup(g.id))
    }

    fn require_member(&self, g: &Group) -> Result<()> {
        if g.has_rank(self.rank()) {
            Ok(())
        } else {
            Err(Error::NotMember {
                rank: self.rank(),
                group: g.id,
            })
        }
    }

    fn canonical_members(&self, members: &[Endpoint]) -> Result<Vec<Endpoint>> {
        let topo = self.topology();
        let mut out = members
            .iter()
            .map(|ep| topo.endpoint(ep.rank, ep.device))
            .collect::<Result<Vec<_>>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::InvalidConfig(
                "a group needs at least one member".into(),
            ));
        }
        Ok(out)
    }

    /// Collective among the ranks owning `members`. Every owner must call
    /// with the same membership; the agreed id is identical on all of them.
    pub fn group_create(&self, members: &[Endpoint]) -> Result<Group> {
        self.check_open()?;
        let members = self.canonical_members(members)?;
        let candidate = Group::new(0, members.clone(), Some(WORLD_GROUP_ID));
        self.require_member(&candidate)?;
        let digest = membership_digest(&members);
        let (call, proposal) = {
            let mut t = self.inner.groups.lock();
            let call = t.create_calls.entry(digest).or_insert(0);
            *call += 1;
            (*call, t.next_ordinal)
        };
        let tag = derive_id("group-create", &[digest, call]);
        let votes = self
            .exchange(&candidate.ranks(), tag, proposal.to_le_bytes().to_vec())
            .map_err(|e| match e {
                Error::HandshakeTimeout(msg) => Error::CollectiveMismatch(format!(
                    "group_create did not agree across owners: {msg}"
                )),
                other => other,
            })?;
        let ordinal = votes
            .iter()
            .map(|v| u64::from_le_bytes(v[..8].try_into().unwrap()))
            .max()
            .unwrap_or(proposal);
        let id = derive_id("group", &[WORLD_GROUP_ID, ordinal, digest]);
        let group = Group::new(id, members, Some(WORLD_GROUP_ID));
        let mut t = self.inner.groups.lock();
        t.next_ordinal = t.next_ordinal.max(ordinal + 1);
        t.insert(group.clone());
        Ok(group)
    }

    /// Sorted, duplicate-free union of two live groups under a new id.
    /// Local: every rank that performs the same merges gets the same ids.
    pub fn group_merge(&self, g1: &Group, g2: &Group) -> Result<Group> {
        self.check_open()?;
        self.live_group(g1)?;
        self.live_group(g2)?;
        let mut members: Vec<Endpoint> = g1.members().iter().chain(g2.members()).copied().collect();
        members.sort();
        members.dedup();
        let mut t = self.inner.groups.lock();
        let n = t.merge_calls.entry((g1.id, g2.id)).or_insert(0);
        *n += 1;
        let id = derive_id("group-merge", &[g1.id, g2.id, *n]);
        let group = Group::new(id, members, Some(g1.id));
        t.insert(group.clone());
        Ok(group)
    }

    /// Collective over the owners of `g`. `color_key` supplies `(color, key)`
    /// for each of the caller's endpoints in `g`; members sharing a color
    /// form one group ordered by `(key, rank, device)`. Returns the groups
    /// that contain at least one of the caller's endpoints, by color.
    pub fn group_split(
        &self,
        g: &Group,
        color_key: impl Fn(&Endpoint) -> (i64, i64),
    ) -> Result<Vec<Group>> {
        self.check_open()?;
        let g = self.live_group(g)?;
        self.require_member(&g)?;
        let me = self.rank();
        let call = {
            let mut t = self.inner.groups.lock();
            let n = t.split_calls.entry(g.id).or_insert(0);
            *n += 1;
            *n
        };
        let vote = SplitVote {
            entries: g
                .members()
                .iter()
                .filter(|m| m.rank == me)
                .map(|m| {
                    let (color, key) = color_key(m);
                    (m.rank, m.device, color, key)
                })
                .collect(),
        };
        let tag = derive_id("group-split", &[g.id, call]);
        let votes = self
            .exchange(&g.ranks(), tag, serde_json::to_vec(&vote)?)
            .map_err(|e| match e {
                Error::HandshakeTimeout(msg) => {
                    Error::CollectiveMismatch(format!("group_split did not agree: {msg}"))
                }
                other => other,
            })?;
        let mut colored: BTreeMap<i64, Vec<(i64, Endpoint)>> = BTreeMap::new();
        for raw in votes {
            let vote: SplitVote = serde_json::from_slice(&raw)?;
            for (rank, device, color, key) in vote.entries {
                let ep = self.topology().endpoint(rank, device)?;
                if !g.contains(&ep) {
                    return Err(Error::CollectiveMismatch(format!(
                        "split vote names {ep}, which is not in group {:#x}",
                        g.id
                    )));
                }
                colored.entry(color).or_default().push((key, ep));
            }
        }
        let total: usize = colored.values().map(Vec::len).sum();
        if total != g.len() {
            return Err(Error::CollectiveMismatch(format!(
                "split of group {:#x} received {total} of {} endpoints",
                g.id,
                g.len()
            )));
        }
        let mut mine = Vec::new();
        let mut t = self.inner.groups.lock();
        for (color, mut entries) in colored {
            entries.sort_by_key(|(key, ep)| (*key, ep.rank, ep.device));
            let members: Vec<Endpoint> = entries.into_iter().map(|(_, ep)| ep).collect();
            let id = derive_id("group-split", &[g.id, call, color as u64]);
            let group = Group::new(id, members, Some(g.id));
            if group.has_rank(me) {
                t.insert(group.clone());
                mine.push(group);
            }
        }
        Ok(mine)
    }

    /// Retires a group locally; later use reports `StaleGroup`.
    pub fn group_free(&self, g: &Group) -> Result<()> {
        if g.id == WORLD_GROUP_ID {
            return Err(Error::InvalidConfig(
                "the world group cannot be freed".into(),
            ));
        }
        self.live_group(g)?;
        self.inner.groups.lock().remove(g.id);
        self.inner.comms.lock().remove(&g.id);
        Ok(())
    }

    /// Digest of this rank's live group table.
    pub fn group_table_digest(&self) -> u64 {
        self.inner.groups.lock().digest()
    }

    pub fn live_group_count(&self) -> usize {
        self.inner.groups.lock().len()
    }

    /// Dissemination barrier over the ranks that own members of `g`.
    pub fn barrier(&self, g: &Group) -> Result<()> {
        self.check_open()?;
        self.barrier_inner(g)
    }

    pub(crate) fn barrier_inner(&self, g: &Group) -> Result<()> {
        let g = self.live_group(g)?;
        self.require_member(&g)?;
        let ranks = g.ranks();
        let n = ranks.len();
        if n == 1 {
            return Ok(());
        }
        let epoch = self.inner.groups.lock().next_barrier_epoch(g.id);
        let me = ranks
            .binary_search(&self.rank())
            .expect("caller is a member");
        let transport = &self.inner.transport;
        let mut dist = 1;
        let mut round = 0u64;
        while dist < n {
            let tag = derive_id("barrier", &[g.id, epoch, round]);
            let to = ranks[(me + dist) % n];
            let from = ranks[(me + n - dist) % n];
            transport.notify(to, Opcode::Barrier, tag, Vec::new())?;
            transport
                .recv(from, tag, self.inner.config.timeout)
                .map_err(|e| match e {
                    Error::HandshakeTimeout(msg) => {
                        Error::PeerFailure(format!("barrier on group {:#x} stalled: {msg}", g.id))
                    }
                    other => other,
                })?;
            dist *= 2;
            round += 1;
        }
        Ok(())
    }
}
