//! Tree maintenance: complaint-driven repair when a peer's QoS degrades, and
//! predicate-driven parent switching when a better parent shows up.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::MilestoneVector;
use crate::ddht::{Notification, PredicateKind, PredicateRegistration};
use crate::servicetree::{
    join, JoinOptions, JoinOutcome, JoinReport, Overlay, OverlayError, PeerId, QosObservation, RejectReason,
    ServiceRequest,
};
use crate::underlay::PhysicalTopology;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("tolerance must be >= 0, got {0}")]
    Tolerance(f64),
    #[error("switch hysteresis must lie in (0, 1), got {0}")]
    Hysteresis(f64),
    #[error("parent response timeout must be > 0, got {0}")]
    Timeout(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepairPolicy {
    /// Fractional QoS degradation tolerated before complaining.
    pub tolerance: f64,
    pub parent_response_timeout_ms: f64,
    /// Required fractional delay improvement before switching parents.
    pub switch_hysteresis: f64,
}

impl Default for RepairPolicy {
    fn default() -> Self {
        RepairPolicy { tolerance: 0.1, parent_response_timeout_ms: 500.0, switch_hysteresis: 0.1 }
    }
}

impl RepairPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(PolicyError::Tolerance(self.tolerance));
        }
        if !(self.switch_hysteresis > 0.0 && self.switch_hysteresis < 1.0) {
            return Err(PolicyError::Hysteresis(self.switch_hysteresis));
        }
        if !(self.parent_response_timeout_ms > 0.0 && self.parent_response_timeout_ms.is_finite()) {
            return Err(PolicyError::Timeout(self.parent_response_timeout_ms));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Complaint {
    pub complainant: PeerId,
    pub milestone_vector: MilestoneVector,
    pub request: ServiceRequest,
    pub observed: QosObservation,
    pub timestamp_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MonitorResult {
    Ok,
    Violation(Complaint),
}

/// True when `observed` is outside the requirement widened by `tolerance`.
pub fn violates(req: &ServiceRequest, observed: QosObservation, tolerance: f64) -> bool {
    match observed {
        QosObservation::Disrupted => true,
        QosObservation::Delivered { delay_ms, bandwidth_mbps } => {
            delay_ms > (1.0 + tolerance) * req.qos.max_delay_ms
                || bandwidth_mbps < (1.0 - tolerance) * req.qos.min_bandwidth_mbps
        }
    }
}

/// Compares a receiver's realized QoS with its requirement. Peers without a
/// request (the server, helpers) never complain; a receiver that is not
/// attached is disrupted.
pub fn monitor(
    ov: &Overlay,
    topo: &PhysicalTopology,
    peer: PeerId,
    policy: &RepairPolicy,
    now_ms: f64,
) -> MonitorResult {
    let Some(node) = ov.peer(peer) else { return MonitorResult::Ok };
    let Some(request) = node.request.clone() else { return MonitorResult::Ok };
    let observed = ov.realized_qos(peer, topo);
    if !violates(&request, observed, policy.tolerance) {
        return MonitorResult::Ok;
    }
    MonitorResult::Violation(Complaint {
        complainant: peer,
        milestone_vector: node.milestone_vector.clone(),
        request,
        observed,
        timestamp_ms: now_ms,
    })
}

/// What the parent did with a complaint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParentResponse {
    /// A recomputed route brought the child back within tolerance.
    Repaired { latency_ms: f64 },
    /// The parent answered but a fresh route does not help.
    Insufficient { latency_ms: f64 },
    /// No parent, a dead parent, or a parent whose own path is broken.
    Unresponsive,
}

/// The parent answers iff it is live and its own path to the root is
/// intact. It then re-derives the edge route to the child; the exchange
/// costs one round trip over the new route.
pub fn try_parent_repair(
    ov: &mut Overlay,
    topo: &PhysicalTopology,
    complaint: &Complaint,
    policy: &RepairPolicy,
) -> ParentResponse {
    let child = complaint.complainant;
    let Some(parent) = ov.tree.parent_of(child) else { return ParentResponse::Unresponsive };
    let (Some(pn), Some(cn)) = (ov.peer(parent), ov.peer(child)) else { return ParentResponse::Unresponsive };
    if !topo.is_router_live(pn.router) || ov.realized_qos(parent, topo).delivered().is_none() {
        return ParentResponse::Unresponsive;
    }
    let Some(route) = topo.shortest_route(pn.router, cn.router) else {
        return ParentResponse::Unresponsive;
    };
    let latency_ms = 2.0 * route.total_delay_ms;
    ov.tree.set_route(child, route);
    if violates(&complaint.request, ov.realized_qos(child, topo), policy.tolerance) {
        ParentResponse::Insufficient { latency_ms }
    } else {
        ParentResponse::Repaired { latency_ms }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RepairOutcome {
    ParentRepaired,
    Switched { new_parent: PeerId },
    Rejoined { parent: PeerId },
    OrphanRejected(RejectReason),
}

impl fmt::Display for RepairOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RepairOutcome::ParentRepaired => write!(f, "parent-repaired"),
            RepairOutcome::Switched { new_parent } => write!(f, "switched:{new_parent}"),
            RepairOutcome::Rejoined { parent } => write!(f, "rejoined:{parent}"),
            RepairOutcome::OrphanRejected(r) => write!(f, "orphan-rejected:{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairRecord {
    pub peer: PeerId,
    pub outcome: RepairOutcome,
    /// Simulated ms from the complaint to restored service (or to the final
    /// rejection).
    pub latency_ms: f64,
    pub join: Option<JoinReport>,
    pub notifications: Vec<Notification>,
}

/// Cuts `peer` from its parent (if any) and runs a full join, never using
/// `avoid`. The subtree below `peer` moves with it.
pub fn rejoin(
    ov: &mut Overlay,
    topo: &PhysicalTopology,
    peer: PeerId,
    avoid: Option<PeerId>,
    opts: &JoinOptions,
) -> Result<RepairRecord, OverlayError> {
    let old_parent = ov.tree.detach(peer);
    let mut notifications = Vec::new();
    if let Some(p) = old_parent {
        if ov.peer(p).is_some() {
            notifications.extend(ov.after_child_loss(p, topo)?.1);
        }
    }
    notifications.extend(ov.publish_subtree(peer, topo)?);
    let mut opts = opts.clone();
    opts.exclude.extend(avoid);
    let report = join(ov, topo, peer, &opts)?;
    let outcome = match &report.outcome {
        JoinOutcome::Attached { .. } => {
            let parent = ov.tree.parent_of(peer).expect("attached");
            if Some(parent) == old_parent {
                RepairOutcome::Rejoined { parent }
            } else {
                RepairOutcome::Switched { new_parent: parent }
            }
        }
        JoinOutcome::Rejected(r) => RepairOutcome::OrphanRejected(*r),
    };
    notifications.extend(report.notifications.iter().cloned());
    Ok(RepairRecord { peer, outcome, latency_ms: report.latency_ms, join: Some(report), notifications })
}

/// Full complaint handling in one step: parent-local repair, else wait out
/// the parent timeout (only if the parent did not answer) and rejoin
/// avoiding an unresponsive parent.
pub fn handle_complaint(
    ov: &mut Overlay,
    topo: &PhysicalTopology,
    complaint: &Complaint,
    policy: &RepairPolicy,
    opts: &JoinOptions,
) -> Result<RepairRecord, OverlayError> {
    let peer = complaint.complainant;
    let parent = ov.tree.parent_of(peer);
    let (wait, avoid) = match try_parent_repair(ov, topo, complaint, policy) {
        ParentResponse::Repaired { latency_ms } => {
            let notifications = ov.publish_subtree(peer, topo)?;
            return Ok(RepairRecord {
                peer,
                outcome: RepairOutcome::ParentRepaired,
                latency_ms,
                join: None,
                notifications,
            });
        }
        ParentResponse::Insufficient { latency_ms } => (latency_ms, None),
        ParentResponse::Unresponsive => (policy.parent_response_timeout_ms, parent),
    };
    let mut rec = rejoin(ov, topo, peer, avoid, opts)?;
    rec.latency_ms += wait;
    Ok(rec)
}

/// (Re)registers the closer-parent predicate with `peer`'s current delay.
pub fn register_closer_parent(ov: &mut Overlay, topo: &PhysicalTopology, peer: PeerId, policy: &RepairPolicy) -> bool {
    let Some((delay, _)) = ov.realized_qos(peer, topo).delivered() else { return false };
    let Some(node) = ov.peer(peer) else { return false };
    if node.request.is_none() {
        return false;
    }
    let reg = PredicateRegistration {
        subscriber: peer,
        kind: PredicateKind::CloserParentAvailable,
        threshold: policy.switch_hysteresis,
        reference_delay_ms: delay,
        reference_vector: node.milestone_vector.clone(),
    };
    ov.space.register_predicate(reg).is_ok()
}

/// Re-registers `top` and every receiver below it, so each reference delay
/// is the subscriber's current one after the subtree moved. Returns how many
/// registrations were written.
pub fn refresh_closer_parent(ov: &mut Overlay, topo: &PhysicalTopology, top: PeerId, policy: &RepairPolicy) -> usize {
    let mut members = vec![top];
    members.extend(ov.tree.descendants(top));
    members.into_iter().filter(|&p| register_closer_parent(ov, topo, p, policy)).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IgnoreReason {
    SubscriberGone,
    CandidateGone,
    AlreadyParent,
    Descendant,
    NoCapacity,
    NotBetter,
    Qos,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SwitchDecision {
    Switched { from: Option<PeerId>, to: PeerId, old_delay_ms: f64, new_delay_ms: f64 },
    Ignored(IgnoreReason),
}

/// The subscriber measures the proposed parent and switches iff the true
/// delay beats `(1 - delta)` of its current delay, the candidate has room,
/// is not below the subscriber, and the new path meets QoS.
pub fn on_notification(
    ov: &mut Overlay,
    topo: &PhysicalTopology,
    note: &Notification,
    policy: &RepairPolicy,
) -> Result<(SwitchDecision, Vec<Notification>), OverlayError> {
    let ignored = |r| Ok((SwitchDecision::Ignored(r), Vec::new()));
    let sub = note.subscriber;
    let cand = note.candidate.peer_id;
    let Some(sn) = ov.peer(sub).cloned() else { return ignored(IgnoreReason::SubscriberGone) };
    let Some(req) = sn.request.clone() else { return ignored(IgnoreReason::SubscriberGone) };
    let Some((cur_delay, _)) = ov.realized_qos(sub, topo).delivered() else {
        return ignored(IgnoreReason::SubscriberGone);
    };
    let Some(cn) = ov.peer(cand).cloned() else { return ignored(IgnoreReason::CandidateGone) };
    let Some((c_delay, c_bw)) = ov.realized_qos(cand, topo).delivered() else {
        return ignored(IgnoreReason::CandidateGone);
    };
    if ov.tree.produced(cand) != Some(&req.spec) {
        return ignored(IgnoreReason::CandidateGone);
    }
    if ov.tree.parent_of(sub) == Some(cand) {
        return ignored(IgnoreReason::AlreadyParent);
    }
    if ov.tree.is_in_subtree(cand, sub) {
        return ignored(IgnoreReason::Descendant);
    }
    if !ov.has_spare_capacity(cand) {
        return ignored(IgnoreReason::NoCapacity);
    }
    let Some(hop) = topo.shortest_route(cn.router, sn.router) else {
        return ignored(IgnoreReason::CandidateGone);
    };
    let new_delay = c_delay + hop.total_delay_ms;
    if !(new_delay < (1.0 - policy.switch_hysteresis) * cur_delay) {
        return ignored(IgnoreReason::NotBetter);
    }
    if !req.qos.admits(new_delay, c_bw.min(hop.bottleneck_mbps)) {
        return ignored(IgnoreReason::Qos);
    }

    let from = ov.tree.detach(sub);
    ov.tree.clear_applied(sub);
    ov.tree.attach(sub, cand, hop, Vec::new())?;
    let mut notes = Vec::new();
    if let Some(p) = from {
        notes.extend(ov.after_child_loss(p, topo)?.1);
    }
    notes.extend(ov.publish(cand, topo)?);
    notes.extend(ov.publish_subtree(sub, topo)?);
    register_closer_parent(ov, topo, sub, policy);
    Ok((SwitchDecision::Switched { from, to: cand, old_delay_ms: cur_delay, new_delay_ms: new_delay }, notes))
}
