//! Random DDHT instances checked against a brute-force candidate scan.

use std::collections::BTreeSet;

use qmcast::coords::MilestoneVector;
use qmcast::ddht::{CandidateClass, DdhtEntry, InfraNodeId, PathMetric, PeersMetric, SpaceConfig, ZoneSpace};
use qmcast::servicetree::{PeerId, QosRequirement, ServiceRequest, ServiceSpec, TransformId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BOUND: f64 = 100.0;

pub fn space(dim: usize, threshold: usize) -> ZoneSpace {
    ZoneSpace::create_space(
        dim,
        InfraNodeId(0),
        SpaceConfig { outer_bound: BOUND, split_threshold: threshold, infra_pool: (0..4).map(InfraNodeId).collect() },
    )
}

pub fn random_spec(rng: &mut ChaCha8Rng) -> ServiceSpec {
    match rng.gen_range(0..4) {
        0 => ServiceSpec::origin(),
        1 => ServiceSpec::new([1]),
        2 => ServiceSpec::new([2]),
        _ => ServiceSpec::new([1, 2]),
    }
}

pub fn random_entry(rng: &mut ChaCha8Rng, id: u32, dim: usize) -> DdhtEntry {
    // coarse grid so distance ties actually happen
    let v = (0..dim).map(|_| rng.gen_range(0..20) as f64 * 5.0).collect();
    let capacity = rng.gen_range(0..3);
    let on_tree = rng.gen_bool(0.7);
    let services: BTreeSet<TransformId> = [1, 2].into_iter().filter(|_| rng.gen_bool(0.3)).map(TransformId).collect();
    DdhtEntry {
        peer_id: PeerId(id),
        milestone_vector: MilestoneVector(v),
        peers_metric: PeersMetric {
            capacity,
            load: rng.gen_range(0..=capacity),
            services,
            free_slots: rng.gen_range(0..2),
        },
        path_metric: on_tree.then(|| PathMetric {
            delay_ms: rng.gen_range(0.0..100.0),
            bottleneck_mbps: 10.0,
            produced: random_spec(rng),
        }),
    }
}

/// Scan of every stored entry, with its own copy of the candidate filter.
pub fn brute_force(
    s: &ZoneSpace,
    q: &[f64],
    req: &ServiceRequest,
    k: usize,
    exclude: &BTreeSet<PeerId>,
) -> Vec<(PeerId, CandidateClass)> {
    let mut all: Vec<(CandidateClass, f64, PeerId)> = Vec::new();
    for e in s.entries() {
        if exclude.contains(&e.peer_id) || e.peers_metric.load >= e.peers_metric.capacity {
            continue;
        }
        let class = match &e.path_metric {
            Some(pm) if pm.produced == req.spec => Some(CandidateClass::Direct),
            Some(pm) => {
                let p = &pm.produced.chain;
                let r = &req.spec.chain;
                (p.len() < r.len() && r[..p.len()] == p[..]).then_some(CandidateClass::Constructive)
            }
            None => (e.peers_metric.free_slots > 0
                && req.spec.chain.iter().any(|t| e.peers_metric.services.contains(t)))
            .then_some(CandidateClass::Constructive),
        };
        if let Some(c) = class {
            let d = q.iter().zip(&e.milestone_vector.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            all.push((c, d, e.peer_id));
        }
    }
    all.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().take(k).map(|(c, _, p)| (p, c)).collect()
}

/// Builds one random instance and returns the number of mismatching queries.
pub fn oracle_instance(seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(1..=4);
    let mut s = space(dim, rng.gen_range(1..=8));
    let n = rng.gen_range(0..=64u32);
    for id in 0..n {
        s.insert_entry(random_entry(&mut rng, id, dim)).unwrap();
    }
    for id in 0..n {
        if rng.gen_bool(0.1) {
            s.remove_entry(PeerId(id));
        }
    }
    let mut mismatches = 0;
    for _ in 0..4 {
        let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..BOUND)).collect();
        let req = ServiceRequest {
            spec: random_spec(&mut rng),
            qos: QosRequirement { max_delay_ms: 100.0, min_bandwidth_mbps: 1.0 },
        };
        let k = rng.gen_range(1..=8);
        let exclude: BTreeSet<PeerId> = (0..n).filter(|_| rng.gen_bool(0.1)).map(PeerId).collect();
        let got: Vec<(PeerId, CandidateClass)> = s
            .lookup_candidates(&MilestoneVector(q.clone()), &req, k, &exclude)
            .into_iter()
            .map(|c| (c.entry.peer_id, c.class))
            .collect();
        if got != brute_force(&s, &q, &req, k, &exclude) {
            mismatches += 1;
        }
    }
    mismatches
}
