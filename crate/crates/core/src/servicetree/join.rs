use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Overlay, OverlayError, PeerId, ServicePath, ServiceSpec, TransformId};
use crate::ddht::{Candidate, CandidateClass, Notification};
use crate::underlay::{PhysicalTopology, RoutePath, RouterId};

pub const DEFAULT_CANDIDATES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct JoinOptions {
    /// Number of candidates requested from the store.
    pub k: usize,
    /// Peers that must not be used (e.g. a parent that stopped answering).
    pub exclude: BTreeSet<PeerId>,
    /// Only the server is considered as a parent and only the joiner itself
    /// may host missing transforms. Used as the recovery baseline.
    pub root_only: bool,
}

impl Default for JoinOptions {
    fn default() -> Self {
        JoinOptions { k: DEFAULT_CANDIDATES, exclude: BTreeSet::new(), root_only: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heuristic {
    /// Attached under a peer that already produces the requested spec.
    Reuse,
    /// Built a new path by adding transforms below a prefix producer.
    Transform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    NoCandidates,
    QosInfeasible,
    Capacity,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::NoCandidates => "no-candidates",
            RejectReason::QosInfeasible => "qos-infeasible",
            RejectReason::Capacity => "capacity",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JoinOutcome {
    Attached { parent: PeerId, path: ServicePath, heuristic: Heuristic },
    Rejected(RejectReason),
}

/// One candidate as measured by the joiner.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub candidate: PeerId,
    pub class: CandidateClass,
    pub rtt_ms: f64,
    /// Candidate's root delay plus the last hop, for on-tree candidates
    /// whose own path is intact.
    pub total_delay_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct JoinTrace {
    pub candidates: Vec<(PeerId, CandidateClass)>,
    pub measurements: Vec<Measurement>,
    /// `(from, to, rtt_ms)` measured between candidates while building a path.
    pub pair_measurements: Vec<(PeerId, PeerId, f64)>,
    /// Direct candidates that met QoS and had a free child slot.
    pub feasible_direct: Vec<PeerId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinReport {
    pub outcome: JoinOutcome,
    /// Simulated time the join took: the candidate probes, any
    /// candidate-to-candidate measurements, and the attach handshake.
    pub latency_ms: f64,
    pub trace: JoinTrace,
    pub notifications: Vec<Notification>,
}

struct Probe {
    id: PeerId,
    class: CandidateClass,
    router: RouterId,
    hop: RoutePath,
    /// Realized root delay and bottleneck when the candidate is attached and intact.
    upstream: Option<(f64, f64)>,
    produced: Option<ServiceSpec>,
}

struct Plan {
    parent: PeerId,
    total: f64,
    /// Nodes below the parent in order, with the transforms each applies and
    /// the route of the edge into it. The joiner is last.
    legs: Vec<(PeerId, Vec<TransformId>, RoutePath)>,
}

/// Attaches `peer` to the tree following the three-step procedure: look up
/// candidates near it in milestone space, measure them, then reuse an
/// existing path (H1) or build one through component hosts (H2, H3).
pub fn join(
    ov: &mut Overlay,
    topo: &PhysicalTopology,
    peer: PeerId,
    opts: &JoinOptions,
) -> Result<JoinReport, OverlayError> {
    let node = ov.peer(peer).ok_or(OverlayError::UnknownPeer(peer))?.clone();
    let req = node.request.clone().ok_or(OverlayError::NoRequest(peer))?;
    if ov.tree.is_attached(peer) {
        return Err(OverlayError::AlreadyAttached(peer));
    }
    ov.tree.clear_applied(peer);
    let mut trace = JoinTrace::default();

    // (i) candidates
    let candidates: Vec<Candidate> = if opts.root_only {
        let root = ov.server();
        ov.space
            .entry(root)
            .filter(|_| !opts.exclude.contains(&root))
            .and_then(|e| {
                crate::ddht::classify(e, &req).map(|class| Candidate { entry: e.clone(), class, distance: 0.0 })
            })
            .into_iter()
            .collect()
    } else {
        let mut exclude = opts.exclude.clone();
        exclude.insert(peer);
        exclude.extend(ov.tree.descendants(peer));
        ov.space.lookup_candidates(&node.milestone_vector, &req, opts.k, &exclude)
    };
    trace.candidates = candidates.iter().map(|c| (c.entry.peer_id, c.class)).collect();
    if candidates.is_empty() {
        return Ok(JoinReport {
            outcome: JoinOutcome::Rejected(RejectReason::NoCandidates),
            latency_ms: 0.0,
            trace,
            notifications: Vec::new(),
        });
    }

    // (ii) measurements to every candidate
    let mut probes = Vec::new();
    for c in &candidates {
        let id = c.entry.peer_id;
        let Some(cnode) = ov.peer(id) else { continue };
        let Some(hop) = topo.shortest_route(cnode.router, node.router) else { continue };
        let attached = ov.tree.is_attached(id);
        let upstream = if attached { ov.realized_qos(id, topo).delivered() } else { None };
        trace.measurements.push(Measurement {
            candidate: id,
            class: c.class,
            rtt_ms: 2.0 * hop.total_delay_ms,
            total_delay_ms: upstream.map(|(d, _)| d + hop.total_delay_ms),
        });
        probes.push(Probe {
            id,
            class: c.class,
            router: cnode.router,
            hop,
            upstream,
            produced: if attached { ov.tree.produced(id).cloned() } else { None },
        });
    }
    let probe_latency = trace.measurements.iter().map(|m| m.rtt_ms).fold(0.0, f64::max);
    let mut capacity_blocked = false;

    // (iii) H1: reuse a direct provider
    let mut best: Option<Plan> = None;
    for p in &probes {
        if p.produced.as_ref() != Some(&req.spec) {
            continue;
        }
        let Some((d, b)) = p.upstream else { continue };
        let total = d + p.hop.total_delay_ms;
        if !req.qos.admits(total, b.min(p.hop.bottleneck_mbps)) {
            continue;
        }
        if !ov.has_spare_capacity(p.id) {
            capacity_blocked = true;
            continue;
        }
        trace.feasible_direct.push(p.id);
        if best.as_ref().is_none_or(|b| (total, p.id) < (b.total, b.parent)) {
            best = Some(Plan { parent: p.id, total, legs: vec![(peer, Vec::new(), p.hop.clone())] });
        }
    }
    if let Some(plan) = best {
        return apply(ov, topo, peer, plan, Heuristic::Reuse, probe_latency, trace);
    }

    // H2: extend a prefix producer through component hosts, placed by H3
    let hosts: Vec<&Probe> = probes
        .iter()
        .filter(|p| !opts.root_only && !ov.tree.is_member(p.id) && p.class == CandidateClass::Constructive)
        .collect();
    let mut pair_latency: f64 = 0.0;
    let mut best: Option<Plan> = None;
    let mut prefixes: Vec<&Probe> = probes
        .iter()
        .filter(|p| p.produced.as_ref().is_some_and(|s| s.is_proper_prefix_of(&req.spec)) && p.upstream.is_some())
        .collect();
    prefixes.sort_by_key(|p| p.id);
    for c in prefixes {
        let (c_delay, c_bw) = c.upstream.expect("filtered");
        // the direct last hop bounds any detour through hosts from below
        let could_meet = req.qos.admits(c_delay + c.hop.total_delay_ms, c_bw);
        if !ov.has_spare_capacity(c.id) {
            capacity_blocked |= could_meet;
            continue;
        }
        let done = c.produced.as_ref().expect("filtered").chain.len();
        let missing = &req.spec.chain[done..];
        let assignment =
            assign_hosts(ov, &node, &hosts, missing, true).or_else(|| assign_hosts(ov, &node, &hosts, missing, false));
        let Some(assignment) = assignment else {
            capacity_blocked |= could_meet;
            continue;
        };
        let mut legs = Vec::new();
        let mut prev = (c.id, c.router);
        let mut total = c_delay;
        let mut bw = c_bw;
        let mut reachable = true;
        let mut steps: Vec<(PeerId, Vec<TransformId>)> = assignment;
        if steps.last().map(|s| s.0) != Some(peer) {
            steps.push((peer, Vec::new()));
        }
        for (h, ts) in steps {
            let router = ov.peer(h).expect("host is known").router;
            let route = if h == peer {
                match hosts.iter().find(|p| p.id == prev.0) {
                    Some(p) => p.hop.clone(),
                    None if prev.0 == c.id => c.hop.clone(),
                    None => match topo.shortest_route(prev.1, router) {
                        Some(r) => r,
                        None => {
                            reachable = false;
                            break;
                        }
                    },
                }
            } else {
                let Some(r) = topo.shortest_route(prev.1, router) else {
                    reachable = false;
                    break;
                };
                trace.pair_measurements.push((prev.0, h, 2.0 * r.total_delay_ms));
                pair_latency = pair_latency.max(2.0 * r.total_delay_ms);
                r
            };
            total += route.total_delay_ms;
            bw = bw.min(route.bottleneck_mbps);
            legs.push((h, ts, route));
            prev = (h, router);
        }
        if !reachable || !req.qos.admits(total, bw) {
            continue;
        }
        if best.as_ref().is_none_or(|b| (total, c.id) < (b.total, b.parent)) {
            best = Some(Plan { parent: c.id, total, legs });
        }
    }
    if let Some(plan) = best {
        return apply(ov, topo, peer, plan, Heuristic::Transform, probe_latency + pair_latency, trace);
    }

    let reason = if capacity_blocked { RejectReason::Capacity } else { RejectReason::QosInfeasible };
    Ok(JoinReport {
        outcome: JoinOutcome::Rejected(reason),
        latency_ms: probe_latency + pair_latency,
        trace,
        notifications: Vec::new(),
    })
}

/// Greedy host choice for each missing transform, nearest host to the
/// joiner first (the joiner itself counts as distance zero). A host may take
/// several consecutive transforms; once the joiner is used it must be last.
fn assign_hosts(
    ov: &Overlay,
    joiner: &super::PeerNode,
    hosts: &[&Probe],
    missing: &[TransformId],
    allow_self: bool,
) -> Option<Vec<(PeerId, Vec<TransformId>)>> {
    let mut used: BTreeMap<PeerId, u32> = BTreeMap::new();
    let mut steps: Vec<(PeerId, Vec<TransformId>)> = Vec::new();
    for &t in missing {
        let last = steps.last().map(|s| s.0);
        let taken = |id: PeerId| used.get(&id).copied().unwrap_or(0);
        let mut choice: Option<(f64, PeerId)> = None;
        if allow_self && joiner.hosted_components.contains(&t) && joiner.component_slots > taken(joiner.id) {
            choice = Some((0.0, joiner.id));
        }
        if last != Some(joiner.id) {
            for h in hosts {
                let Some(hn) = ov.peer(h.id) else { continue };
                let usable = hn.capacity > 0
                    && hn.hosted_components.contains(&t)
                    && ov.free_slots(h.id) > taken(h.id)
                    && (last == Some(h.id) || !used.contains_key(&h.id));
                let key = (h.hop.total_delay_ms, h.id);
                if usable && choice.is_none_or(|c| key < c) {
                    choice = Some(key);
                }
            }
        }
        let (_, id) = choice?;
        *used.entry(id).or_default() += 1;
        match steps.last_mut() {
            Some((h, ts)) if *h == id => ts.push(t),
            _ => steps.push((id, vec![t])),
        }
    }
    Some(steps)
}

fn apply(
    ov: &mut Overlay,
    topo: &PhysicalTopology,
    peer: PeerId,
    plan: Plan,
    heuristic: Heuristic,
    measure_latency: f64,
    trace: JoinTrace,
) -> Result<JoinReport, OverlayError> {
    let mut prev = plan.parent;
    let mut handshake = 0.0;
    let mut placed = Vec::new();
    for (h, ts, route) in plan.legs {
        if h == peer {
            handshake = 2.0 * route.total_delay_ms;
        }
        ov.tree.attach(h, prev, route, ts)?;
        placed.push(h);
        prev = h;
    }
    let direct_parent = ov.tree.parent_of(peer).expect("just attached");
    let mut notifications = ov.publish(plan.parent, topo)?;
    for h in placed {
        if h == peer {
            notifications.extend(ov.publish_subtree(h, topo)?);
        } else {
            notifications.extend(ov.publish(h, topo)?);
        }
    }
    let path = ov.service_path(peer, topo).expect("attached");
    Ok(JoinReport {
        outcome: JoinOutcome::Attached { parent: direct_parent, path, heuristic },
        latency_ms: measure_latency + handshake,
        trace,
        notifications,
    })
}
