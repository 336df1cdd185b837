//! Service model, multicast tree, and the QoS-constrained join.

mod join;
mod service;
mod tree;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::{MilestoneSet, MilestoneVector};
use crate::ddht::{DdhtEntry, DdhtError, Notification, PathMetric, PeersMetric, ZoneSpace};
use crate::underlay::{PhysicalTopology, RouterId, UNBOUNDED_MBPS};

pub use join::{join, Heuristic, JoinOptions, JoinOutcome, JoinReport, JoinTrace, Measurement, RejectReason};
pub use service::{PeerId, QosRequirement, ServiceRequest, ServiceSpec, TransformId};
pub use tree::{MulticastTree, TreeDoc, TreeError};

/// What a peer is in the overlay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeerRole {
    Server,
    Receiver,
    /// Hosts transforms for others and receives nothing itself.
    Helper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeerNode {
    pub id: PeerId,
    pub router: RouterId,
    pub role: PeerRole,
    /// Present for receivers only.
    pub request: Option<ServiceRequest>,
    /// Maximum number of children.
    pub capacity: u32,
    pub hosted_components: BTreeSet<TransformId>,
    pub component_slots: u32,
    pub milestone_vector: MilestoneVector,
}

impl PeerNode {
    pub fn server(id: PeerId, router: RouterId, capacity: u32, vector: MilestoneVector) -> Self {
        PeerNode {
            id,
            router,
            role: PeerRole::Server,
            request: None,
            capacity,
            hosted_components: BTreeSet::new(),
            component_slots: 0,
            milestone_vector: vector,
        }
    }

    pub fn receiver(
        id: PeerId,
        router: RouterId,
        request: ServiceRequest,
        capacity: u32,
        vector: MilestoneVector,
    ) -> Self {
        PeerNode {
            id,
            router,
            role: PeerRole::Receiver,
            request: Some(request),
            capacity,
            hosted_components: BTreeSet::new(),
            component_slots: 0,
            milestone_vector: vector,
        }
    }

    pub fn helper(
        id: PeerId,
        router: RouterId,
        hosted: impl IntoIterator<Item = TransformId>,
        slots: u32,
        capacity: u32,
        vector: MilestoneVector,
    ) -> Self {
        PeerNode {
            id,
            router,
            role: PeerRole::Helper,
            request: None,
            capacity,
            hosted_components: hosted.into_iter().collect(),
            component_slots: slots,
            milestone_vector: vector,
        }
    }

    pub fn with_components(mut self, hosted: impl IntoIterator<Item = TransformId>, slots: u32) -> Self {
        self.hosted_components = hosted.into_iter().collect();
        self.component_slots = slots;
        self
    }
}

/// QoS as observed at a peer over the current underlay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QosObservation {
    Delivered {
        delay_ms: f64,
        bandwidth_mbps: f64,
    },
    /// The path to the root crosses a failed element or no longer exists.
    Disrupted,
}

impl QosObservation {
    pub fn delivered(self) -> Option<(f64, f64)> {
        match self {
            QosObservation::Delivered { delay_ms, bandwidth_mbps } => Some((delay_ms, bandwidth_mbps)),
            QosObservation::Disrupted => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OverlayError {
    #[error("unknown peer {0}")]
    UnknownPeer(PeerId),
    #[error("peer {0} already exists")]
    DuplicatePeer(PeerId),
    #[error("peer {0} is already attached")]
    AlreadyAttached(PeerId),
    #[error("peer {0} has no service request")]
    NoRequest(PeerId),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Ddht(#[from] DdhtError),
}

/// Result of a departure.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LeaveOutcome {
    /// Children left without a parent, ascending.
    pub orphans: Vec<PeerId>,
    /// Helpers released because they no longer served anyone.
    pub released_helpers: Vec<PeerId>,
    pub notifications: Vec<Notification>,
}

/// All overlay state: the peers, the tree, and the global-state store.
#[derive(Debug, Clone)]
pub struct Overlay {
    peers: BTreeMap<PeerId, PeerNode>,
    pub tree: MulticastTree,
    pub space: ZoneSpace,
    milestones: MilestoneSet,
    leave_warnings: u64,
}

impl Overlay {
    /// Overlay with only the server, whose entry is published at once.
    pub fn new(
        server: PeerNode,
        space: ZoneSpace,
        milestones: MilestoneSet,
        topo: &PhysicalTopology,
    ) -> Result<Self, OverlayError> {
        let root = server.id;
        let mut ov = Overlay {
            peers: BTreeMap::from([(root, server)]),
            tree: MulticastTree::new(root),
            space,
            milestones,
            leave_warnings: 0,
        };
        ov.publish(root, topo)?;
        Ok(ov)
    }

    pub fn server(&self) -> PeerId {
        self.tree.root()
    }

    pub fn milestones(&self) -> &MilestoneSet {
        &self.milestones
    }

    pub fn peer(&self, id: PeerId) -> Option<&PeerNode> {
        self.peers.get(&id)
    }

    pub fn peers(&self) -> impl Iterator<Item = &PeerNode> {
        self.peers.values()
    }

    /// Departures of peers that were not on the tree.
    pub fn leave_warnings(&self) -> u64 {
        self.leave_warnings
    }

    /// Registers a peer. Helpers are published to the store immediately so
    /// joins can find them; receivers are published once they attach.
    pub fn add_peer(&mut self, node: PeerNode, topo: &PhysicalTopology) -> Result<(), OverlayError> {
        if self.peers.contains_key(&node.id) {
            return Err(OverlayError::DuplicatePeer(node.id));
        }
        let id = node.id;
        let helper = node.role == PeerRole::Helper;
        self.peers.insert(id, node);
        if helper {
            self.publish(id, topo)?;
        }
        Ok(())
    }

    /// Free component slots of `p`.
    pub fn free_slots(&self, p: PeerId) -> u32 {
        let Some(node) = self.peers.get(&p) else { return 0 };
        node.component_slots.saturating_sub(self.tree.applied(p).len() as u32)
    }

    pub fn has_spare_capacity(&self, p: PeerId) -> bool {
        self.peers.get(&p).is_some_and(|n| (self.tree.child_count(p) as u32) < n.capacity)
    }

    /// The store entry describing `p` as it is now.
    pub fn entry_for(&self, p: PeerId) -> Option<DdhtEntry> {
        let node = self.peers.get(&p)?;
        let path_metric = self.tree.annotated_path(p).map(|(delay_ms, bottleneck_mbps)| PathMetric {
            delay_ms,
            bottleneck_mbps,
            produced: self.tree.produced(p).cloned().unwrap_or_default(),
        });
        Some(DdhtEntry {
            peer_id: p,
            milestone_vector: node.milestone_vector.clone(),
            peers_metric: PeersMetric {
                capacity: node.capacity,
                load: self.tree.child_count(p) as u32,
                services: node.hosted_components.clone(),
                free_slots: self.free_slots(p),
            },
            path_metric,
        })
    }

    /// Writes `p`'s current entry to the store and returns the predicate
    /// notifications the change triggers.
    pub fn publish(&mut self, p: PeerId, _topo: &PhysicalTopology) -> Result<Vec<Notification>, OverlayError> {
        let entry = self.entry_for(p).ok_or(OverlayError::UnknownPeer(p))?;
        let event = self.space.insert_entry(entry)?;
        Ok(self.space.evaluate_predicates(&event))
    }

    /// Republishes `p` and every member of its subtree.
    pub fn publish_subtree(&mut self, p: PeerId, topo: &PhysicalTopology) -> Result<Vec<Notification>, OverlayError> {
        let mut out = self.publish(p, topo)?;
        for d in self.tree.descendants(p) {
            out.extend(self.publish(d, topo)?);
        }
        Ok(out)
    }

    /// Root-to-`p` QoS over the current underlay, using the routes stored on
    /// the tree edges.
    pub fn realized_qos(&self, p: PeerId, topo: &PhysicalTopology) -> QosObservation {
        let Some(path) = self.tree.path_to_root(p) else {
            return QosObservation::Disrupted;
        };
        for q in &path {
            match self.peers.get(q) {
                Some(node) if topo.is_router_live(node.router) => {}
                _ => return QosObservation::Disrupted,
            }
        }
        let mut delay = 0.0;
        let mut bw = UNBOUNDED_MBPS;
        for c in path.iter().rev().skip(1) {
            let r = self.tree.edge_route(*c).expect("attached edges carry routes");
            if !topo.is_route_live(r) {
                return QosObservation::Disrupted;
            }
            delay += r.total_delay_ms;
            bw = bw.min(r.bottleneck_mbps);
        }
        QosObservation::Delivered { delay_ms: delay, bandwidth_mbps: bw }
    }

    /// Removes a departing (or dead) peer from the tree and the store.
    ///
    /// Its children become detached subtree tops. Helpers left without
    /// children are released back to the pool of free component hosts.
    pub fn leave(&mut self, p: PeerId, topo: &PhysicalTopology) -> Result<LeaveOutcome, OverlayError> {
        if !self.peers.contains_key(&p) {
            return Err(OverlayError::UnknownPeer(p));
        }
        let mut out = LeaveOutcome::default();
        if !self.tree.is_member(p) {
            self.leave_warnings += 1;
            log::warn!("{p} left without being on the tree");
            self.space.remove_entry(p);
            self.peers.remove(&p);
            return Ok(out);
        }
        let parent = self.tree.parent_of(p);
        out.orphans = self.tree.remove(p)?;
        self.space.remove_entry(p);
        self.peers.remove(&p);
        for &o in &out.orphans {
            out.notifications.extend(self.publish_subtree(o, topo)?);
        }
        if let Some(parent) = parent {
            let (released, notes) = self.after_child_loss(parent, topo)?;
            out.released_helpers = released;
            out.notifications.extend(notes);
        }
        Ok(out)
    }

    /// Republishes `parent` after it lost a child, releasing idle helpers
    /// up the chain.
    pub(crate) fn after_child_loss(
        &mut self,
        parent: PeerId,
        topo: &PhysicalTopology,
    ) -> Result<(Vec<PeerId>, Vec<Notification>), OverlayError> {
        let mut released = Vec::new();
        let mut notes = Vec::new();
        let mut cur = parent;
        loop {
            let idle_helper = self.peers.get(&cur).is_some_and(|n| n.role == PeerRole::Helper)
                && self.tree.child_count(cur) == 0
                && self.tree.is_member(cur);
            if !idle_helper {
                notes.extend(self.publish(cur, topo)?);
                break;
            }
            let up = self.tree.parent_of(cur);
            self.tree.remove(cur)?;
            notes.extend(self.publish(cur, topo)?);
            released.push(cur);
            match up {
                Some(u) => cur = u,
                None => break,
            }
        }
        Ok((released, notes))
    }

    /// Takes a helper off the tree. Its children become detached tops and
    /// are returned ascending.
    pub fn release_helper(&mut self, h: PeerId, topo: &PhysicalTopology) -> Result<LeaveOutcome, OverlayError> {
        let mut out = LeaveOutcome::default();
        if !self.tree.is_member(h) {
            return Ok(out);
        }
        let parent = self.tree.parent_of(h);
        out.orphans = self.tree.remove(h)?;
        out.notifications.extend(self.publish(h, topo)?);
        for &o in &out.orphans {
            out.notifications.extend(self.publish_subtree(o, topo)?);
        }
        out.released_helpers.push(h);
        if let Some(parent) = parent {
            let (released, notes) = self.after_child_loss(parent, topo)?;
            out.released_helpers.extend(released);
            out.notifications.extend(notes);
        }
        Ok(out)
    }

    /// Removes a peer that is not on the tree (e.g. permanently rejected)
    /// from the overlay entirely.
    pub fn forget(&mut self, p: PeerId) {
        self.space.remove_entry(p);
        self.peers.remove(&p);
    }

    /// Path from the root to `p` with its QoS summary.
    pub fn service_path(&self, p: PeerId, topo: &PhysicalTopology) -> Option<ServicePath> {
        let mut chain = self.tree.path_to_root(p)?;
        chain.reverse();
        let (cumulative_delay_ms, bottleneck_mbps) = match self.realized_qos(p, topo) {
            QosObservation::Delivered { delay_ms, bandwidth_mbps } => (delay_ms, bandwidth_mbps),
            QosObservation::Disrupted => self.tree.annotated_path(p)?,
        };
        Some(ServicePath { chain, produced_spec: self.tree.produced(p)?.clone(), cumulative_delay_ms, bottleneck_mbps })
    }

    /// Checks tree structure plus the per-peer capacity, slot, and spec rules.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.tree.check_integrity().map_err(|e| e.to_string())?;
        for node in self.peers.values() {
            let p = node.id;
            if self.tree.child_count(p) as u32 > node.capacity {
                return Err(format!("{p} has {} children, capacity {}", self.tree.child_count(p), node.capacity));
            }
            if self.tree.applied(p).len() as u32 > node.component_slots {
                return Err(format!(
                    "{p} runs {} components, slots {}",
                    self.tree.applied(p).len(),
                    node.component_slots
                ));
            }
            if let (Some(req), true) = (&node.request, self.tree.is_attached(p)) {
                if self.tree.produced(p) != Some(&req.spec) {
                    return Err(format!("{p} receives {:?} but asked for {}", self.tree.produced(p), req.spec));
                }
            }
            let entry = self.space.entry(p);
            if let Some(e) = entry {
                if e.is_on_tree() != self.tree.is_attached(p) {
                    return Err(format!("{p} store entry disagrees with attachment"));
                }
                if e.peers_metric.load > e.peers_metric.capacity {
                    return Err(format!("{p} store entry over capacity"));
                }
            }
        }
        for p in self.tree.members() {
            if !self.peers.contains_key(&p) {
                return Err(format!("tree member {p} is not a known peer"));
            }
        }
        Ok(())
    }
}

/// A delivery chain from the server to one peer.
#[derive(Debug, Clone, PartialEq)]
pub struct ServicePath {
    /// Server first, tail last.
    pub chain: Vec<PeerId>,
    pub produced_spec: ServiceSpec,
    pub cumulative_delay_ms: f64,
    pub bottleneck_mbps: f64,
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::coords::{milestone_vector, select_milestones};
    use crate::ddht::{InfraNodeId, SpaceConfig};

    pub fn overlay_on(topo: &PhysicalTopology, server_router: u32, server_capacity: u32) -> Overlay {
        let ms = select_milestones(topo, topo.router_count().min(2), 1).unwrap();
        let space = ZoneSpace::create_space(ms.dimension(), InfraNodeId(0), SpaceConfig::default());
        let v = milestone_vector(topo, RouterId(server_router), &ms).unwrap();
        Overlay::new(PeerNode::server(PeerId(0), RouterId(server_router), server_capacity, v), space, ms, topo).unwrap()
    }

    pub fn vec_of(ov: &Overlay, topo: &PhysicalTopology, router: u32) -> MilestoneVector {
        milestone_vector(topo, RouterId(router), ov.milestones()).unwrap()
    }

    pub fn qos(delay: f64) -> QosRequirement {
        QosRequirement { max_delay_ms: delay, min_bandwidth_mbps: 1.0 }
    }
}
