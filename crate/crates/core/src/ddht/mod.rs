//! CAN-style global-state store keyed by milestone vectors.
//!
//! The milestone space `[0, B)^M` is tiled by axis-aligned zones, each owned
//! by one infrastructure node. Every peer known to the system has one
//! [`DdhtEntry`] stored in the zone that contains its milestone vector. A zone
//! that grows past the split threshold is halved along its longest axis.
//! Zones never merge.

mod predicate;
mod routing;

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::MilestoneVector;
use crate::servicetree::{PeerId, ServiceSpec, TransformId};

pub use predicate::{Notification, PredicateKind, PredicateRegistration};
pub use routing::{classify, Candidate, CandidateClass};

pub const DEFAULT_SPLIT_THRESHOLD: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InfraNodeId(pub u32);

impl fmt::Display for InfraNodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DdhtError {
    #[error("vector has dimension {got}, space has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("peer {0} is not on the tree")]
    NotOnTree(PeerId),
    #[error("improvement threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
}

/// Capacity, load and the transforms a peer can host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeersMetric {
    pub capacity: u32,
    pub load: u32,
    pub services: BTreeSet<TransformId>,
    pub free_slots: u32,
}

/// Root-to-peer path characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMetric {
    pub delay_ms: f64,
    pub bottleneck_mbps: f64,
    pub produced: ServiceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdhtEntry {
    pub peer_id: PeerId,
    pub milestone_vector: MilestoneVector,
    pub peers_metric: PeersMetric,
    pub path_metric: Option<PathMetric>,
}

impl DdhtEntry {
    pub fn has_spare_capacity(&self) -> bool {
        self.peers_metric.load < self.peers_metric.capacity
    }

    pub fn is_on_tree(&self) -> bool {
        self.path_metric.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdhtEventKind {
    Inserted,
    Updated,
    Removed,
}

/// A change to the store, fed to [`ZoneSpace::evaluate_predicates`].
#[derive(Debug, Clone, PartialEq)]
pub struct DdhtEvent {
    pub kind: DdhtEventKind,
    pub entry: DdhtEntry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Zone {
    /// Half-open `[lo, hi)` per axis.
    pub bounds: Vec<(f64, f64)>,
    pub owner: InfraNodeId,
    entries: BTreeMap<PeerId, DdhtEntry>,
    registrations: BTreeMap<PeerId, PredicateRegistration>,
}

impl Zone {
    pub fn contains(&self, point: &[f64]) -> bool {
        self.bounds.iter().zip(point).all(|(&(lo, hi), &x)| lo <= x && x < hi)
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| hi - lo).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &DdhtEntry> {
        self.entries.values()
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn registrations(&self) -> impl Iterator<Item = &PredicateRegistration> {
        self.registrations.values()
    }

    /// Euclidean distance from `point` to the closed box.
    pub(crate) fn box_distance(&self, point: &[f64]) -> f64 {
        self.bounds
            .iter()
            .zip(point)
            .map(|(&(lo, hi), &x)| {
                let gap = if x < lo {
                    lo - x
                } else if x > hi {
                    x - hi
                } else {
                    0.0
                };
                gap * gap
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceConfig {
    /// Upper bound `B` of every axis.
    pub outer_bound: f64,
    pub split_threshold: usize,
    /// Infrastructure nodes that take ownership of new zones, round-robin.
    pub infra_pool: Vec<InfraNodeId>,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig { outer_bound: 1000.0, split_threshold: DEFAULT_SPLIT_THRESHOLD, infra_pool: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct ZoneSpace {
    dimension: usize,
    outer: f64,
    split_threshold: usize,
    pool: Vec<InfraNodeId>,
    next_owner: usize,
    zones: Vec<Zone>,
    locator: BTreeMap<PeerId, usize>,
    reg_locator: BTreeMap<PeerId, usize>,
    clamped: u64,
    control_hops: Cell<u64>,
}

impl ZoneSpace {
    /// A single zone covering `[0, B)^dimension` owned by `initial_owner`.
    pub fn create_space(dimension: usize, initial_owner: InfraNodeId, config: SpaceConfig) -> Self {
        assert!(dimension >= 1, "milestone space needs at least one axis");
        assert!(config.outer_bound > 0.0 && config.outer_bound.is_finite());
        let mut pool = config.infra_pool;
        if !pool.contains(&initial_owner) {
            pool.insert(0, initial_owner);
        }
        let next_owner = pool.iter().position(|&o| o == initial_owner).expect("present") + 1;
        ZoneSpace {
            dimension,
            outer: config.outer_bound,
            split_threshold: config.split_threshold.max(1),
            pool,
            next_owner,
            zones: vec![Zone {
                bounds: vec![(0.0, config.outer_bound); dimension],
                owner: initial_owner,
                entries: BTreeMap::new(),
                registrations: BTreeMap::new(),
            }],
            locator: BTreeMap::new(),
            reg_locator: BTreeMap::new(),
            clamped: 0,
            control_hops: Cell::new(0),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn outer_bound(&self) -> f64 {
        self.outer
    }

    pub fn outer_volume(&self) -> f64 {
        self.outer.powi(self.dimension as i32)
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn zone_count(&self) -> usize {
        self.zones.len()
    }

    /// Number of vector components clamped into the box so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamped
    }

    /// Simulated routing hops spent by inserts, removals and lookups.
    pub fn control_hops(&self) -> u64 {
        self.control_hops.get()
    }

    fn charge(&self, hops: u32) {
        self.control_hops.set(self.control_hops.get() + hops as u64);
    }

    pub fn entry_count(&self) -> usize {
        self.locator.len()
    }

    pub fn entry(&self, peer: PeerId) -> Option<&DdhtEntry> {
        self.locator.get(&peer).and_then(|&z| self.zones[z].entries.get(&peer))
    }

    /// All entries, ordered by peer id.
    pub fn entries(&self) -> impl Iterator<Item = &DdhtEntry> {
        self.locator.iter().map(|(p, &z)| &self.zones[z].entries[p])
    }

    pub fn zone_of(&self, peer: PeerId) -> Option<usize> {
        self.locator.get(&peer).copied()
    }

    /// Maps a vector into the half-open outer box.
    pub fn clamp(&self, v: &[f64]) -> (Vec<f64>, bool) {
        let below_outer = f64::from_bits(self.outer.to_bits() - 1);
        let mut changed = false;
        let out = v
            .iter()
            .map(|&x| {
                if x.is_nan() || x < 0.0 {
                    changed = true;
                    0.0
                } else if x >= self.outer {
                    changed = true;
                    below_outer
                } else {
                    x
                }
            })
            .collect();
        (out, changed)
    }

    fn check_dimension(&self, v: &MilestoneVector) -> Result<(), DdhtError> {
        if v.dimension() != self.dimension {
            return Err(DdhtError::DimensionMismatch { expected: self.dimension, got: v.dimension() });
        }
        Ok(())
    }

    /// Index of the zone containing `point` (which must lie inside the box).
    pub fn locate(&self, point: &[f64]) -> usize {
        let (p, _) = self.clamp(point);
        self.zones.iter().position(|z| z.contains(&p)).expect("zones tile the outer box")
    }

    /// Every zone containing `point`; exactly one when the tiling is intact.
    pub fn locate_all(&self, point: &[f64]) -> Vec<usize> {
        self.zones.iter().enumerate().filter(|(_, z)| z.contains(point)).map(|(i, _)| i).collect()
    }

    /// Stores `entry` under its (clamped) milestone vector, replacing any
    /// previous entry for the same peer, and splits the owning zone when it
    /// exceeds the threshold.
    pub fn insert_entry(&mut self, mut entry: DdhtEntry) -> Result<DdhtEvent, DdhtError> {
        self.check_dimension(&entry.milestone_vector)?;
        let (clamped, changed) = self.clamp(&entry.milestone_vector.0);
        if changed {
            self.clamped += 1;
            log::warn!("milestone vector of {} clamped into the key space", entry.peer_id);
        }
        entry.milestone_vector = MilestoneVector(clamped);
        let kind = match self.locator.remove(&entry.peer_id) {
            Some(old) => {
                self.zones[old].entries.remove(&entry.peer_id);
                DdhtEventKind::Updated
            }
            None => DdhtEventKind::Inserted,
        };
        let (z, hops) = self.route_to_zone(&entry.milestone_vector);
        self.charge(hops);
        self.zones[z].entries.insert(entry.peer_id, entry.clone());
        self.locator.insert(entry.peer_id, z);
        if self.zones[z].entries.len() > self.split_threshold {
            self.split(z);
        }
        Ok(DdhtEvent { kind, entry })
    }

    /// Removes a peer's entry and any predicate it registered. Absent ids are a no-op.
    pub fn remove_entry(&mut self, peer: PeerId) -> Option<DdhtEvent> {
        if let Some(rz) = self.reg_locator.remove(&peer) {
            self.zones[rz].registrations.remove(&peer);
        }
        let z = self.locator.remove(&peer)?;
        let entry = self.zones[z].entries.remove(&peer).expect("locator in sync");
        let (_, hops) = self.route_to_zone(&entry.milestone_vector);
        self.charge(hops);
        Some(DdhtEvent { kind: DdhtEventKind::Removed, entry })
    }

    fn split(&mut self, z: usize) {
        let zone = &self.zones[z];
        let mut axis = 0;
        let mut widest = f64::NEG_INFINITY;
        for (i, (lo, hi)) in zone.bounds.iter().enumerate() {
            if hi - lo > widest {
                widest = hi - lo;
                axis = i;
            }
        }
        let (lo, hi) = zone.bounds[axis];
        let mid = 0.5 * (lo + hi);
        if !(lo < mid && mid < hi) {
            return;
        }
        let owner = self.pool[self.next_owner % self.pool.len()];
        self.next_owner += 1;

        let new_index = self.zones.len();
        let zone = &mut self.zones[z];
        let mut upper_bounds = zone.bounds.clone();
        upper_bounds[axis] = (mid, hi);
        zone.bounds[axis] = (lo, mid);

        let moved: Vec<PeerId> =
            zone.entries.values().filter(|e| e.milestone_vector.0[axis] >= mid).map(|e| e.peer_id).collect();
        let mut upper_entries = BTreeMap::new();
        for p in moved {
            upper_entries.insert(p, zone.entries.remove(&p).expect("listed"));
            self.locator.insert(p, new_index);
        }
        let moved_regs: Vec<PeerId> =
            zone.registrations.values().filter(|r| r.reference_vector.0[axis] >= mid).map(|r| r.subscriber).collect();
        let mut upper_regs = BTreeMap::new();
        for p in moved_regs {
            upper_regs.insert(p, zone.registrations.remove(&p).expect("listed"));
            self.reg_locator.insert(p, new_index);
        }
        self.zones.push(Zone { bounds: upper_bounds, owner, entries: upper_entries, registrations: upper_regs });
    }

    pub fn to_doc(&self) -> SpaceDoc {
        SpaceDoc {
            dimension: self.dimension,
            zones: self
                .zones
                .iter()
                .map(|z| ZoneDoc {
                    bounds: z.bounds.iter().map(|&(lo, hi)| [lo, hi]).collect(),
                    owner: z.owner,
                    entries: z.entries.values().cloned().collect(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("space serializes")
    }
}

/// Dump format: `{"dimension": M, "zones": [{"bounds": [[lo,hi],...], "owner": id, "entries": [...]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceDoc {
    pub dimension: usize,
    pub zones: Vec<ZoneDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneDoc {
    pub bounds: Vec<[f64; 2]>,
    pub owner: InfraNodeId,
    pub entries: Vec<DdhtEntry>,
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn fresh_space_is_one_zone() {
        let s = space(2, 100.0);
        assert_eq!(s.zone_count(), 1);
        assert_eq!(s.zones()[0].bounds, vec![(0.0, 100.0), (0.0, 100.0)]);
        assert_eq!(s.zones()[0].owner, InfraNodeId(0));
        assert_eq!(s.locate(&[42.0, 99.0]), 0);
        assert_eq!(s.zones()[0].volume(), s.outer_volume());
    }

    #[test]
    fn first_insert_lands_in_the_only_zone() {
        let mut s = space(2, 100.0);
        let ev = s.insert_entry(entry(1, &[10.0, 20.0])).unwrap();
        assert_eq!(ev.kind, DdhtEventKind::Inserted);
        assert_eq!(s.zones()[0].entry_count(), 1);
    }

    #[test]
    fn ninth_insert_splits_longest_axis() {
        let mut s = space(2, 100.0);
        for i in 0..9 {
            s.insert_entry(entry(i, &[10.0 + i as f64, 80.0])).unwrap();
        }
        assert_eq!(s.zone_count(), 2);
        // ties on width go to axis 0
        assert_eq!(s.zones()[0].bounds, vec![(0.0, 50.0), (0.0, 100.0)]);
        assert_eq!(s.zones()[1].bounds, vec![(50.0, 100.0), (0.0, 100.0)]);
        assert_eq!(s.zones()[1].owner, InfraNodeId(1));
        for e in s.entries() {
            assert_eq!(s.locate_all(&e.milestone_vector.0).len(), 1);
            assert!(s.zones()[s.zone_of(e.peer_id).unwrap()].contains(&e.milestone_vector.0));
        }
    }

    #[test]
    fn upsert_keeps_one_entry() {
        let mut s = space(2, 100.0);
        s.insert_entry(entry(7, &[1.0, 1.0])).unwrap();
        let mut e = entry(7, &[90.0, 90.0]);
        e.peers_metric.load = 3;
        let ev = s.insert_entry(e).unwrap();
        assert_eq!(ev.kind, DdhtEventKind::Updated);
        assert_eq!(s.entry_count(), 1);
        assert_eq!(s.entry(PeerId(7)).unwrap().peers_metric.load, 3);
    }

    #[test]
    fn remove_absent_is_noop() {
        let mut s = space(2, 100.0);
        s.insert_entry(entry(1, &[1.0, 1.0])).unwrap();
        assert!(s.remove_entry(PeerId(99)).is_none());
        assert_eq!(s.entry_count(), 1);
        assert!(s.remove_entry(PeerId(1)).is_some());
        assert_eq!(s.entry_count(), 0);
    }

    #[test]
    fn out_of_box_vectors_are_clamped_and_counted() {
        let mut s = space(2, 100.0);
        s.insert_entry(entry(1, &[150.0, -3.0])).unwrap();
        assert_eq!(s.clamp_count(), 1);
        let v = &s.entry(PeerId(1)).unwrap().milestone_vector.0;
        assert!(v[0] < 100.0 && v[0] > 99.999);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn dimension_is_checked() {
        let mut s = space(2, 100.0);
        assert_eq!(s.insert_entry(entry(1, &[1.0])).unwrap_err(), DdhtError::DimensionMismatch { expected: 2, got: 1 });
    }

    #[test]
    fn identical_vectors_do_not_split_forever() {
        let mut s = space(2, 100.0);
        for i in 0..40 {
            s.insert_entry(entry(i, &[5.0, 5.0])).unwrap();
        }
        let total: f64 = s.zones().iter().map(Zone::volume).sum();
        assert!((total - s.outer_volume()).abs() <= 1e-9 * s.outer_volume());
        assert_eq!(s.entry_count(), 40);
    }
}
