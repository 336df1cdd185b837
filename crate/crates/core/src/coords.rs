//! Milestone (landmark) selection and milestone vectors.
//!
//! A peer's milestone vector is its RTT to each milestone router, in the fixed
//! order of the [`MilestoneSet`]. The raw vectors are used as coordinates and
//! as keys of the global-state store; no embedding step is applied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::underlay::{PhysicalTopology, RouterId, RttProbe, Unmeasurable};

#[derive(Debug, Error, PartialEq)]
pub enum CoordError {
    #[error("cannot select {requested} milestones from {available} live routers")]
    TooManyMilestones { requested: usize, available: usize },
    #[error("milestone count must be at least 1")]
    NoMilestones,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("milestone unmeasurable: {0}")]
    Unmeasurable(#[from] Unmeasurable),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MilestoneSet {
    milestones: Vec<RouterId>,
}

impl MilestoneSet {
    pub fn new(milestones: Vec<RouterId>) -> Self {
        MilestoneSet { milestones }
    }

    pub fn routers(&self) -> &[RouterId] {
        &self.milestones
    }

    pub fn dimension(&self) -> usize {
        self.milestones.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MilestoneVector(pub Vec<f64>);

impl MilestoneVector {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }
}

/// Farthest-point milestone selection.
///
/// A random live router seeds the sweep but is not itself kept: the first
/// milestone is the router farthest from the seed, and every further milestone
/// is the router maximizing its minimum RTT to those already chosen. Ties go to
/// the lowest router id.
pub fn select_milestones(topo: &PhysicalTopology, count: usize, seed: u64) -> Result<MilestoneSet, CoordError> {
    if count == 0 {
        return Err(CoordError::NoMilestones);
    }
    let live: Vec<RouterId> = topo.routers().filter(|&r| topo.is_router_live(r)).collect();
    if count > live.len() {
        return Err(CoordError::TooManyMilestones { requested: count, available: live.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = live[rng.gen_range(0..live.len())];

    // min RTT from each candidate to the current reference set
    let mut score: Vec<Option<f64>> = live.iter().map(|&r| topo.rtt(start, r).ok()).collect();
    let mut chosen: Vec<RouterId> = Vec::with_capacity(count);
    while chosen.len() < count {
        let mut best: Option<(f64, RouterId)> = None;
        for (i, &r) in live.iter().enumerate() {
            if chosen.contains(&r) {
                continue;
            }
            let Some(s) = score[i] else { continue };
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, r));
            }
        }
        // unreachable leftovers only happen on partitioned topologies
        let pick = match best {
            Some((_, r)) => r,
            None => *live.iter().find(|r| !chosen.contains(r)).expect("count <= live"),
        };
        if chosen.is_empty() {
            // the seed was only a starting point; restart distances from the pick
            score = live.iter().map(|&r| topo.rtt(pick, r).ok()).collect();
        } else {
            for (i, &r) in live.iter().enumerate() {
                let d = topo.rtt(pick, r).ok();
                score[i] = match (score[i], d) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                };
            }
        }
        chosen.push(pick);
    }
    Ok(MilestoneSet::new(chosen))
}

/// Noise-free milestone vector of a router.
pub fn milestone_vector(
    topo: &PhysicalTopology,
    router: RouterId,
    milestones: &MilestoneSet,
) -> Result<MilestoneVector, CoordError> {
    let comps = milestones.routers().iter().map(|&m| topo.rtt(router, m)).collect::<Result<Vec<_>, _>>()?;
    Ok(MilestoneVector(comps))
}

/// Milestone vector measured through a (possibly noisy) probe. Negative noisy
/// samples are floored at zero.
pub fn measure_milestone_vector(
    topo: &PhysicalTopology,
    router: RouterId,
    milestones: &MilestoneSet,
    probe: &mut RttProbe,
) -> Result<MilestoneVector, CoordError> {
    let comps = milestones
        .routers()
        .iter()
        .map(|&m| probe.measure(topo, router, m).map(|v| v.max(0.0)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MilestoneVector(comps))
}

/// Euclidean distance in milestone space.
pub fn milestone_distance(u: &MilestoneVector, v: &MilestoneVector) -> Result<f64, CoordError> {
    if u.dimension() != v.dimension() {
        return Err(CoordError::DimensionMismatch(u.dimension(), v.dimension()));
    }
    Ok(euclid(&u.0, &v.0))
}

pub(crate) fn euclid(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}
