use std::collections::{BTreeSet, VecDeque};

use super::{DdhtEntry, Zone, ZoneSpace};
use crate::coords::{euclid, MilestoneVector};
use crate::servicetree::{PeerId, ServiceRequest};

/// Why an entry was returned by a candidate lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CandidateClass {
    /// On-tree, already produces the requested spec, has spare capacity.
    Direct,
    /// On-tree producing a proper prefix of the request, or off-tree with a
    /// free slot for one of the requested transforms.
    Constructive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub entry: DdhtEntry,
    pub class: CandidateClass,
    pub distance: f64,
}

impl Candidate {
    fn rank_cmp(&self, other: &Candidate) -> std::cmp::Ordering {
        self.class
            .cmp(&other.class)
            .then(self.distance.total_cmp(&other.distance))
            .then(self.entry.peer_id.cmp(&other.entry.peer_id))
    }
}

/// Candidate filter shared by the zone walk and by brute-force checks.
pub fn classify(entry: &DdhtEntry, req: &ServiceRequest) -> Option<CandidateClass> {
    if !entry.has_spare_capacity() {
        return None;
    }
    match &entry.path_metric {
        Some(pm) if pm.produced == req.spec => Some(CandidateClass::Direct),
        Some(pm) if pm.produced.is_proper_prefix_of(&req.spec) => Some(CandidateClass::Constructive),
        Some(_) => None,
        None => {
            let hosts = entry.peers_metric.free_slots > 0
                && req.spec.chain.iter().any(|t| entry.peers_metric.services.contains(t));
            hosts.then_some(CandidateClass::Constructive)
        }
    }
}

fn intervals_overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0.max(b.0) < a.1.min(b.1)
}

/// Zones sharing an (M-1)-dimensional face.
fn are_neighbors(a: &Zone, b: &Zone) -> bool {
    let mut abutting = 0;
    for (&ia, &ib) in a.bounds.iter().zip(&b.bounds) {
        if ia.1 == ib.0 || ib.1 == ia.0 {
            abutting += 1;
        } else if !intervals_overlap(ia, ib) {
            return false;
        }
    }
    abutting == 1
}

impl ZoneSpace {
    pub fn neighbors(&self, z: usize) -> Vec<usize> {
        (0..self.zones.len()).filter(|&o| o != z && are_neighbors(&self.zones[z], &self.zones[o])).collect()
    }

    /// Greedy CAN routing from the bootstrap zone (index 0) to the zone
    /// owning `key`. Returns the zone index and the number of hops taken.
    pub fn route_to_zone(&self, key: &MilestoneVector) -> (usize, u32) {
        let (key, _) = self.clamp(&key.0);
        let mut cur = 0usize;
        let mut hops = 0u32;
        let score = |z: usize| {
            let zone = &self.zones[z];
            (zone.box_distance(&key), euclid(&zone.center(), &key))
        };
        while !self.zones[cur].contains(&key) {
            let here = score(cur);
            let best = self
                .neighbors(cur)
                .into_iter()
                .map(|n| (score(n), n))
                .min_by(|(a, na), (b, nb)| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(na.cmp(nb)));
            match best {
                Some(((bd, bc), n)) if (bd, bc) < here => {
                    cur = n;
                    hops += 1;
                }
                _ => {
                    // greedy stalled on a boundary; finish with a shortest hop walk
                    let (target, extra) = self.bfs_to_containing(cur, &key);
                    return (target, hops + extra);
                }
            }
        }
        (cur, hops)
    }

    fn bfs_to_containing(&self, from: usize, key: &[f64]) -> (usize, u32) {
        let mut dist = vec![u32::MAX; self.zones.len()];
        dist[from] = 0;
        let mut queue = VecDeque::from([from]);
        while let Some(z) = queue.pop_front() {
            if self.zones[z].contains(key) {
                return (z, dist[z]);
            }
            for n in self.neighbors(z) {
                if dist[n] == u32::MAX {
                    dist[n] = dist[z] + 1;
                    queue.push_back(n);
                }
            }
        }
        unreachable!("zones tile the outer box and their adjacency is connected")
    }

    /// Up to `k` entries able to serve `req`, direct providers first, each
    /// class nearest-first in milestone space (ties by peer id).
    ///
    /// The walk starts at the zone owning the requester's vector and expands
    /// ring by ring over zone adjacency. It stops early once the best `k` are
    /// all direct and no unvisited zone can hold anything closer.
    pub fn lookup_candidates(
        &self,
        requester: &MilestoneVector,
        req: &ServiceRequest,
        k: usize,
        exclude: &BTreeSet<PeerId>,
    ) -> Vec<Candidate> {
        if k == 0 || self.locator.is_empty() {
            return Vec::new();
        }
        let key = &requester.0;
        let (start, mut hops) = self.route_to_zone(requester);
        let mut visited = vec![false; self.zones.len()];
        visited[start] = true;
        let mut ring = vec![start];
        let mut found: Vec<Candidate> = Vec::new();
        loop {
            for &z in &ring {
                for e in self.zones[z].entries.values() {
                    if exclude.contains(&e.peer_id) {
                        continue;
                    }
                    if let Some(class) = classify(e, req) {
                        found.push(Candidate { entry: e.clone(), class, distance: euclid(key, &e.milestone_vector.0) });
                    }
                }
            }
            found.sort_by(Candidate::rank_cmp);
            found.truncate(k);

            let mut next = Vec::new();
            for &z in &ring {
                for n in self.neighbors(z) {
                    if !visited[n] {
                        visited[n] = true;
                        next.push(n);
                    }
                }
            }
            next.sort_unstable();
            if next.is_empty() {
                break;
            }
            if found.len() == k && found.iter().all(|c| c.class == CandidateClass::Direct) {
                let kth = found[k - 1].distance;
                let frontier_lb = (0..self.zones.len())
                    .filter(|&z| !visited[z] || next.contains(&z))
                    .map(|z| self.zones[z].box_distance(key))
                    .fold(f64::INFINITY, f64::min);
                if frontier_lb > kth {
                    break;
                }
            }
            hops += next.len() as u32;
            ring = next;
        }
        self.charge(hops);
        found
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::servicetree::{QosRequirement, ServiceSpec};

    fn req(spec: ServiceSpec) -> ServiceRequest {
        ServiceRequest { spec, qos: QosRequirement { max_delay_ms: 1000.0, min_bandwidth_mbps: 1.0 } }
    }

    fn split_space() -> ZoneSpace {
        let mut s = space(2, 100.0);
        for i in 0..9 {
            s.insert_entry(entry(i, &[10.0 + 9.0 * i as f64, 30.0])).unwrap();
        }
        assert_eq!(s.zone_count(), 2);
        s
    }

    #[test]
    fn single_zone_routes_in_zero_hops() {
        let s = space(2, 100.0);
        assert_eq!(s.route_to_zone(&MilestoneVector(vec![70.0, 70.0])), (0, 0));
    }

    #[test]
    fn far_zone_is_one_hop() {
        let s = split_space();
        assert_eq!(s.route_to_zone(&MilestoneVector(vec![90.0, 10.0])), (1, 1));
        assert_eq!(s.route_to_zone(&MilestoneVector(vec![10.0, 10.0])), (0, 0));
    }

    #[test]
    fn neighbor_relation_needs_a_shared_face() {
        let mut s = space(2, 100.0);
        // force several splits with spread-out points
        for i in 0..60u32 {
            let x = (i * 37 % 100) as f64;
            let y = (i * 61 % 100) as f64;
            s.insert_entry(entry(i, &[x, y])).unwrap();
        }
        for z in 0..s.zone_count() {
            for n in s.neighbors(z) {
                assert!(s.neighbors(n).contains(&z));
            }
        }
    }

    #[test]
    fn empty_space_yields_nothing() {
        let s = space(2, 100.0);
        let got =
            s.lookup_candidates(&MilestoneVector(vec![1.0, 1.0]), &req(ServiceSpec::origin()), 3, &BTreeSet::new());
        assert!(got.is_empty());
    }

    #[test]
    fn nearest_direct_provider_wins() {
        let mut s = space(2, 100.0);
        s.insert_entry(on_tree(1, &[5.0, 0.0], 10.0, ServiceSpec::origin())).unwrap();
        s.insert_entry(on_tree(2, &[2.0, 0.0], 10.0, ServiceSpec::origin())).unwrap();
        let got =
            s.lookup_candidates(&MilestoneVector(vec![0.0, 0.0]), &req(ServiceSpec::origin()), 1, &BTreeSet::new());
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].entry.peer_id, PeerId(2));
        assert_eq!(got[0].distance, 2.0);
    }

    #[test]
    fn direct_ranks_before_constructive() {
        let mut s = space(2, 100.0);
        s.insert_entry(on_tree(1, &[1.0, 0.0], 10.0, ServiceSpec::origin())).unwrap();
        s.insert_entry(on_tree(2, &[50.0, 50.0], 10.0, ServiceSpec::new([3]))).unwrap();
        let mut host = entry(3, &[0.0, 1.0]);
        host.peers_metric.free_slots = 1;
        host.peers_metric.services.insert(crate::servicetree::TransformId(3));
        s.insert_entry(host).unwrap();
        let got =
            s.lookup_candidates(&MilestoneVector(vec![0.0, 0.0]), &req(ServiceSpec::new([3])), 5, &BTreeSet::new());
        let ids: Vec<_> = got.iter().map(|c| (c.entry.peer_id.0, c.class)).collect();
        assert_eq!(
            ids,
            vec![(2, CandidateClass::Direct), (1, CandidateClass::Constructive), (3, CandidateClass::Constructive)]
        );
    }

    #[test]
    fn full_and_excluded_entries_are_skipped() {
        let mut s = space(2, 100.0);
        let mut full = on_tree(1, &[1.0, 0.0], 10.0, ServiceSpec::origin());
        full.peers_metric.load = full.peers_metric.capacity;
        s.insert_entry(full).unwrap();
        s.insert_entry(on_tree(2, &[2.0, 0.0], 10.0, ServiceSpec::origin())).unwrap();
        let got = s.lookup_candidates(
            &MilestoneVector(vec![0.0, 0.0]),
            &req(ServiceSpec::origin()),
            5,
            &BTreeSet::from([PeerId(2)]),
        );
        assert!(got.is_empty());
    }

    #[test]
    fn insert_then_remove_empties_lookup() {
        let mut s = space(2, 100.0);
        s.insert_entry(on_tree(1, &[1.0, 0.0], 10.0, ServiceSpec::origin())).unwrap();
        s.remove_entry(PeerId(1));
        let got =
            s.lookup_candidates(&MilestoneVector(vec![0.0, 0.0]), &req(ServiceSpec::origin()), 5, &BTreeSet::new());
        assert!(got.is_empty());
    }
}
