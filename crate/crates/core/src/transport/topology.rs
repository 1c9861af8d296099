use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A device bound to a rank, placed on a (simulated) node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub rank: u32,
    pub device: u16,
    pub node_id: u32,
}

impl Endpoint {
    pub fn key(&self) -> (u32, u16) {
        (self.rank, self.device)
    }
}

impl Ord for Endpoint {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl PartialOrd for Endpoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}d{}@n{}", self.rank, self.device, self.node_id)
    }
}

/// Level of the communication hierarchy a transfer travels through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PathKind {
    /// Same process, no peer fabric between the two devices (or the same device).
    IntraProcess,
    /// Same process, devices connected by the peer fabric.
    PeerFabric,
    /// Different processes on one node.
    IntraNodeIPC,
    /// Different nodes.
    InterNode,
}

impl PathKind {
    pub const ALL: [PathKind; 4] = [
        PathKind::IntraProcess,
        PathKind::PeerFabric,
        PathKind::IntraNodeIPC,
        PathKind::InterNode,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the path stays inside one address space.
    pub fn is_local(self) -> bool {
        matches!(self, PathKind::IntraProcess | PathKind::PeerFabric)
    }
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathKind::IntraProcess => "intra-process",
            PathKind::PeerFabric => "peer-fabric",
            PathKind::IntraNodeIPC => "intra-node-ipc",
            PathKind::InterNode => "inter-node",
        })
    }
}

/// What each rank reports about itself during the init handshake.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankInfo {
    pub rank: u32,
    pub node_id: u32,
    pub process_id: u64,
    pub devices: u16,
}

/// Identical on every rank once discovery completes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyMap {
    ranks: Vec<RankInfo>,
    devices_per_rank: u16,
    /// Row-major `devices_per_rank`² peer capability between devices of one process.
    peer_matrix: Vec<bool>,
}

impl TopologyMap {
    /// Builds the map from every rank's self-report.
    pub fn discover(mut infos: Vec<RankInfo>, peer_matrix: Vec<bool>) -> Result<Self> {
        infos.sort_by_key(|i| i.rank);
        for (expected, info) in infos.iter().enumerate() {
            if info.rank as usize != expected {
                return Err(Error::ConfigMismatch(format!(
                    "rank table has a gap or duplicate at rank {expected}"
                )));
            }
        }
        let devices = infos.first().map(|i| i.devices).unwrap_or(1);
        if let Some(bad) = infos.iter().find(|i| i.devices != devices) {
            return Err(Error::ConfigMismatch(format!(
                "rank {} binds {} devices, rank 0 binds {}",
                bad.rank, bad.devices, devices
            )));
        }
        let d = devices as usize;
        if peer_matrix.len() != d * d {
            return Err(Error::InvalidConfig(format!("peer matrix must be {d}x{d}")));
        }
        for i in 0..d {
            for j in 0..d {
                if peer_matrix[i * d + j] != peer_matrix[j * d + i] {
                    return Err(Error::InvalidConfig("peer matrix must be symmetric".into()));
                }
            }
        }
        Ok(TopologyMap {
            ranks: infos,
            devices_per_rank: devices,
            peer_matrix,
        })
    }

    /// Uniform peer matrix: every distinct device pair is (or is not) peer capable.
    pub fn uniform_peer_matrix(devices: u16, enabled: bool) -> Vec<bool> {
        let d = devices as usize;
        (0..d * d).map(|k| enabled && k / d != k % d).collect()
    }

    /// A map built straight from a node list, one process per rank.
    pub fn from_nodes(nodes: &[u32], devices: u16, peer_access: bool) -> Self {
        let infos = nodes
            .iter()
            .enumerate()
            .map(|(r, &node_id)| RankInfo {
                rank: r as u32,
                node_id,
                process_id: r as u64,
                devices,
            })
            .collect();
        Self::discover(infos, Self::uniform_peer_matrix(devices, peer_access))
            .expect("well-formed node list")
    }

    pub fn nranks(&self) -> u32 {
        self.ranks.len() as u32
    }

    pub fn devices_per_rank(&self) -> u16 {
        self.devices_per_rank
    }

    pub fn rank_info(&self, rank: u32) -> Option<&RankInfo> {
        self.ranks.get(rank as usize)
    }

    pub fn node_of(&self, rank: u32) -> Option<u32> {
        self.rank_info(rank).map(|i| i.node_id)
    }

    pub fn endpoint(&self, rank: u32, device: u16) -> Result<Endpoint> {
        match self.rank_info(rank) {
            Some(info) if device < self.devices_per_rank => Ok(Endpoint {
                rank,
                device,
                node_id: info.node_id,
            }),
            _ => Err(Error::UnknownEndpoint { rank, device }),
        }
    }

    pub fn contains(&self, ep: &Endpoint) -> bool {
        self.endpoint(ep.rank, ep.device)
            .is_ok_and(|known| known.node_id == ep.node_id)
    }

    /// Every endpoint, sorted by `(rank, device)`.
    pub fn endpoints(&self) -> Vec<Endpoint> {
        self.ranks
            .iter()
            .flat_map(|info| {
                (0..self.devices_per_rank).map(move |device| Endpoint {
                    rank: info.rank,
                    device,
                    node_id: info.node_id,
                })
            })
            .collect()
    }

    pub fn peer_capable(&self, a: u16, b: u16) -> bool {
        let d = self.devices_per_rank as usize;
        self.peer_matrix
            .get(a as usize * d + b as usize)
            .copied()
            .unwrap_or(false)
    }

    pub fn classify(&self, a: &Endpoint, b: &Endpoint) -> Result<PathKind> {
        for ep in [a, b] {
            if !self.contains(ep) {
                return Err(Error::UnknownEndpoint {
                    rank: ep.rank,
                    device: ep.device,
                });
            }
        }
        let pa = &self.ranks[a.rank as usize];
        let pb = &self.ranks[b.rank as usize];
        Ok(if pa.process_id == pb.process_id {
            if a.device != b.device && self.peer_capable(a.device, b.device) {
                PathKind::PeerFabric
            } else {
                PathKind::IntraProcess
            }
        } else if pa.node_id == pb.node_id {
            PathKind::IntraNodeIPC
        } else {
            PathKind::InterNode
        })
    }

    /// Canonical byte form, used to compare maps across ranks.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("topology serializes")
    }
}

/// Classifies the route between two endpoints.
pub fn classify_path(a: &Endpoint, b: &Endpoint, topo: &TopologyMap) -> Result<PathKind> {
    topo.classify(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn launcher_nodes_are_echoed() {
        let t = TopologyMap::from_nodes(&[0, 0, 1, 1], 1, true);
        let eps = t.endpoints();
        assert_eq!(eps.len(), 4);
        assert_eq!(eps[0].node_id, eps[1].node_id);
        assert_eq!(eps[2].node_id, 1);
    }

    #[test]
    fn single_rank_full_peer_matrix() {
        let t = TopologyMap::from_nodes(&[0], 4, true);
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(t.peer_capable(a, b), a != b);
            }
        }
    }

    #[test]
    fn four_way_hierarchy() {
        let t = TopologyMap::from_nodes(&[0, 0, 1], 2, true);
        let ep = |r, d| t.endpoint(r, d).unwrap();
        assert_eq!(
            t.classify(&ep(0, 0), &ep(0, 0)).unwrap(),
            PathKind::IntraProcess
        );
        assert_eq!(
            t.classify(&ep(0, 0), &ep(0, 1)).unwrap(),
            PathKind::PeerFabric
        );
        assert_eq!(
            t.classify(&ep(0, 1), &ep(1, 0)).unwrap(),
            PathKind::IntraNodeIPC
        );
        assert_eq!(
            t.classify(&ep(1, 0), &ep(2, 1)).unwrap(),
            PathKind::InterNode
        );

        let no_peer = TopologyMap::from_nodes(&[0], 2, false);
        let a = no_peer.endpoint(0, 0).unwrap();
        let b = no_peer.endpoint(0, 1).unwrap();
        assert_eq!(no_peer.classify(&a, &b).unwrap(), PathKind::IntraProcess);
    }

    #[test]
    fn classification_is_total_and_symmetric() {
        let t = TopologyMap::from_nodes(&[0, 1, 0, 2, 1], 3, true);
        let eps = t.endpoints();
        for a in &eps {
            for b in &eps {
                assert_eq!(t.classify(a, b).unwrap(), t.classify(b, a).unwrap());
            }
        }
    }

    #[test]
    fn unknown_endpoints_are_rejected() {
        let t = TopologyMap::from_nodes(&[0, 0], 1, true);
        let ghost = Endpoint {
            rank: 5,
            device: 0,
            node_id: 0,
        };
        let real = t.endpoint(0, 0).unwrap();
        assert!(matches!(
            t.classify(&real, &ghost),
            Err(Error::UnknownEndpoint { rank: 5, .. })
        ));
        assert!(t.endpoint(0, 1).is_err());
    }

    #[test]
    fn discovery_rejects_inconsistent_reports() {
        let info = |rank, devices| RankInfo {
            rank,
            node_id: 0,
            process_id: rank as u64,
            devices,
        };
        assert!(TopologyMap::discover(vec![info(0, 1), info(1, 2)], vec![false]).is_err());
        assert!(TopologyMap::discover(vec![info(0, 1), info(2, 1)], vec![false]).is_err());
        assert!(TopologyMap::discover(vec![info(1, 1), info(0, 1)], vec![false]).is_ok());
    }
}
