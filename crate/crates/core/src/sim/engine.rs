use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scenario::{Monitoring, Scenario, ScenarioError};
use super::workload::{failure_schedule, generate_workload, stream_rng, PeerPlan, Stream};
use crate::adapt::{self, MonitorResult, ParentResponse, SwitchDecision};
use crate::coords::{select_milestones, CoordError, MilestoneVector};
use crate::ddht::{InfraNodeId, Notification, SpaceConfig, ZoneSpace};
use crate::metrics::{self, fmt_g6, write_csv_row, Counters, MetricsReport, RecoveryRecord, TreeMetrics};
use crate::servicetree::{
    join, JoinOptions, JoinOutcome, JoinReport, Overlay, OverlayError, PeerId, PeerNode, PeerRole, QosObservation,
    RejectReason, TreeDoc,
};
use crate::underlay::{generate_topology, Element, PhysicalTopology, RouterId, RttProbe, UnderlayError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Underlay(#[from] UnderlayError),
    #[error(transparent)]
    Coords(#[from] CoordError),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
}

/// How repairs are carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Complaints, parent-local repair, timeouts, full rejoin.
    Adaptive,
    /// Every failure repair is an immediate fresh join restricted to the
    /// server. Orphans of a graceful departure still join normally.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub mode: Mode,
    /// Check tree and overlay invariants after every event.
    pub check_invariants: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { mode: Mode::Adaptive, check_invariants: false }
    }
}

/// One row of `events.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time_ms: f64,
    pub seq: u64,
    pub kind: &'static str,
    pub peer: Option<PeerId>,
    pub detail: String,
}

pub const EVENTS_HEADER: [&str; 5] = ["time_ms", "seq", "kind", "peer", "detail"];

impl EventRecord {
    pub fn write_csv<W: Write>(w: &mut W, events: &[EventRecord]) -> io::Result<()> {
        write_csv_row(w, &EVENTS_HEADER.map(String::from))?;
        for e in events {
            write_csv_row(
                w,
                &[
                    fmt_g6(e.time_ms),
                    e.seq.to_string(),
                    e.kind.to_string(),
                    e.peer.map(|p| p.0.to_string()).unwrap_or_default(),
                    e.detail.clone(),
                ],
            )?;
        }
        Ok(())
    }
}

/// QoS observed right after a successful join.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissionRecord {
    pub time_ms: f64,
    pub peer: PeerId,
    pub delay_ms: f64,
    pub bandwidth_mbps: f64,
    pub max_delay_ms: f64,
    pub min_bandwidth_mbps: f64,
}

impl AdmissionRecord {
    pub fn satisfied(&self) -> bool {
        self.delay_ms <= self.max_delay_ms && self.bandwidth_mbps >= self.min_bandwidth_mbps
    }
}

/// Terminal state of every receiver that arrived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Conservation {
    pub arrivals: u64,
    pub attached: u64,
    pub departed: u64,
    pub rejected: u64,
    pub pending: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.arrivals == self.attached + self.departed + self.rejected + self.pending
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub events: Vec<EventRecord>,
    pub overlay: Overlay,
    pub topology: PhysicalTopology,
    pub admissions: Vec<AdmissionRecord>,
    pub conservation: Conservation,
    /// `(event seq, message)` for every failed per-event check.
    pub invariant_violations: Vec<(u64, String)>,
}

impl RunOutput {
    /// The final tree as written to `tree.json`.
    pub fn tree_doc(&self) -> TreeDoc {
        self.overlay.tree.to_doc(|p| self.overlay.peer(p).map(|n| n.router))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone)]
enum EventKind {
    Arrival(usize),
    Departure(PeerId),
    Failure(usize),
    PollTick,
    Complaint(PeerId),
    ComplaintTimeout(PeerId),
    Notification(Box<Notification>),
    Retry(PeerId),
    Rejoin(PeerId),
}

impl EventKind {
    fn name(&self) -> &'static str {
        match self {
            EventKind::Arrival(_) => "peer-arrival",
            EventKind::Departure(_) => "peer-departure",
            EventKind::Failure(_) => "element-failure",
            EventKind::PollTick => "poll-tick",
            EventKind::Complaint(_) => "complaint",
            EventKind::ComplaintTimeout(_) => "complaint-timeout",
            EventKind::Notification(_) => "notification-delivery",
            EventKind::Retry(_) => "retry",
            EventKind::Rejoin(_) => "rejoin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Active,
    Departed,
    Rejected,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    failure_id: usize,
    since_ms: f64,
}

struct Engine<'a> {
    sc: &'a Scenario,
    mode: Mode,
    check: bool,
    topo: PhysicalTopology,
    ov: Overlay,
    plans: Vec<PeerPlan>,
    failures: Vec<(f64, Element)>,
    probe: RttProbe,
    queue: BTreeMap<(Time, u64), EventKind>,
    next_seq: u64,
    now: f64,
    tick_at: Option<f64>,
    status: BTreeMap<PeerId, Status>,
    /// Peers whose single retry is spent.
    retried: BTreeSet<PeerId>,
    /// Scheduled retries, flagged when the failed attempt was a repair.
    retry_kind: BTreeMap<PeerId, bool>,
    awaiting_timeout: BTreeSet<PeerId>,
    pending: BTreeMap<PeerId, Pending>,
    recoveries: Vec<RecoveryRecord>,
    unrecovered: usize,
    counters: Counters,
    admissions: Vec<AdmissionRecord>,
    events: Vec<EventRecord>,
    samples: Vec<TreeMetrics>,
    next_sample: f64,
    violations: Vec<(u64, String)>,
}

/// Runs `sc` to completion.
pub fn run(sc: &Scenario, opts: RunOptions) -> Result<RunOutput, SimError> {
    sc.validate()?;
    let topo = generate_topology(sc.topology.routers, &sc.topology.params, sc.seed)?;
    let milestones = select_milestones(&topo, sc.policy.milestones, sc.seed)?;
    let outer = (4.0 * topo.max_shortest_delay_ms()).max(1.0);
    let space = ZoneSpace::create_space(
        milestones.dimension(),
        InfraNodeId(0),
        SpaceConfig {
            outer_bound: outer,
            split_threshold: sc.policy.split_threshold,
            infra_pool: (0..sc.policy.infra_nodes).map(InfraNodeId).collect(),
        },
    );
    let mut probe = RttProbe::new(sc.policy.probe_noise, stream_rng(sc.seed, Stream::Noise));
    let vector =
        |probe: &mut RttProbe, topo: &PhysicalTopology, r: RouterId| measure(probe, topo, &milestones, r, outer);

    let server_router = RouterId(sc.server.router);
    let server =
        PeerNode::server(PeerId(0), server_router, sc.server.capacity, vector(&mut probe, &topo, server_router));
    let mut ov = Overlay::new(server, space, milestones.clone(), &topo)?;

    let mut wrng = stream_rng(sc.seed, Stream::Workload);
    let workload = generate_workload(sc, &mut wrng);
    for h in &workload.helpers {
        let v = vector(&mut probe, &topo, h.router);
        let node = PeerNode::helper(
            h.id,
            h.router,
            sc.helpers.transforms.iter().copied(),
            sc.helpers.slots,
            sc.helpers.capacity,
            v,
        );
        ov.add_peer(node, &topo)?;
    }
    let failures = failure_schedule(sc, &topo, &mut stream_rng(sc.seed, Stream::Topology));

    let mut eng = Engine {
        sc,
        mode: opts.mode,
        check: opts.check_invariants,
        topo,
        ov,
        plans: workload.peers,
        failures,
        probe,
        queue: BTreeMap::new(),
        next_seq: 0,
        now: 0.0,
        tick_at: None,
        status: BTreeMap::new(),
        retried: BTreeSet::new(),
        retry_kind: BTreeMap::new(),
        awaiting_timeout: BTreeSet::new(),
        pending: BTreeMap::new(),
        recoveries: Vec::new(),
        unrecovered: 0,
        counters: Counters::default(),
        admissions: Vec::new(),
        events: Vec::new(),
        samples: Vec::new(),
        next_sample: sc.policy.sample_interval_ms,
        violations: Vec::new(),
    };
    for i in 0..eng.plans.len() {
        let p = &eng.plans[i];
        let (arr, dep, id) = (p.arrival_ms, p.departure_ms, p.id);
        eng.schedule(arr, EventKind::Arrival(i));
        eng.schedule(dep, EventKind::Departure(id));
    }
    for i in 0..eng.failures.len() {
        eng.schedule(eng.failures[i].0, EventKind::Failure(i));
    }
    eng.run_loop()?;
    Ok(eng.finish())
}

fn measure(
    probe: &mut RttProbe,
    topo: &PhysicalTopology,
    milestones: &crate::coords::MilestoneSet,
    r: RouterId,
    unreachable: f64,
) -> MilestoneVector {
    MilestoneVector(
        milestones
            .routers()
            .iter()
            .map(|&m| probe.measure(topo, r, m).map(|x| x.max(0.0)).unwrap_or(unreachable))
            .collect(),
    )
}

impl Engine<'_> {
    fn schedule(&mut self, t: f64, kind: EventKind) {
        if t > self.sc.duration_ms {
            return;
        }
        self.queue.insert((Time(t), self.next_seq), kind);
        self.next_seq += 1;
    }

    fn log(&mut self, seq: u64, kind: &'static str, peer: Option<PeerId>, detail: String) {
        self.events.push(EventRecord { time_ms: self.now, seq, kind, peer, detail });
    }

    fn run_loop(&mut self) -> Result<(), SimError> {
        while let Some(((Time(t), seq), kind)) = self.queue.pop_first() {
            debug_assert!(t >= self.now, "clock moved backwards");
            self.sample_until(t);
            self.now = t;
            let name = kind.name();
            let peer = self.handle(seq, kind)?;
            if self.check {
                self.check_now(seq, name, peer);
            }
        }
        self.sample_until(self.sc.duration_ms);
        Ok(())
    }

    fn sample_until(&mut self, t: f64) {
        while self.next_sample <= t && self.next_sample <= self.sc.duration_ms {
            let m = metrics::tree_metrics(&self.ov, &self.topo);
            if !m.empty {
                self.samples.push(m);
            }
            self.next_sample += self.sc.policy.sample_interval_ms;
        }
    }

    fn check_now(&mut self, seq: u64, name: &str, _peer: Option<PeerId>) {
        if let Err(e) = self.ov.check_invariants() {
            self.violations.push((seq, format!("after {name}: {e}")));
        }
    }

    fn handle(&mut self, seq: u64, kind: EventKind) -> Result<Option<PeerId>, SimError> {
        match kind {
            EventKind::Arrival(i) => self.on_arrival(seq, i),
            EventKind::Departure(p) => self.on_departure(seq, p),
            EventKind::Failure(i) => self.on_failure(seq, i).map(|_| None),
            EventKind::PollTick => {
                self.tick_at = None;
                let n = self.detect();
                self.log(seq, "poll-tick", None, format!("complaints={n}"));
                Ok(None)
            }
            EventKind::Complaint(p) => self.on_complaint(seq, p).map(|_| Some(p)),
            EventKind::ComplaintTimeout(p) => self.on_timeout(seq, p).map(|_| Some(p)),
            EventKind::Notification(n) => self.on_notification(seq, &n).map(|_| Some(n.subscriber)),
            EventKind::Retry(p) => self.on_retry(seq, p).map(|_| Some(p)),
            EventKind::Rejoin(p) => self.on_rejoin(seq, p).map(|_| Some(p)),
        }
    }

    fn active(&self, p: PeerId) -> bool {
        self.status.get(&p) == Some(&Status::Active)
    }

    fn join_opts(&self, root_only: bool) -> JoinOptions {
        JoinOptions { k: self.sc.policy.k, exclude: BTreeSet::new(), root_only }
    }

    fn baseline(&self) -> bool {
        self.mode == Mode::Baseline
    }

    fn deliver(&mut self, notes: Vec<Notification>) {
        if !self.sc.policy.maintenance {
            return;
        }
        for n in notes {
            self.schedule(self.now, EventKind::Notification(Box::new(n)));
        }
    }

    fn on_arrival(&mut self, seq: u64, i: usize) -> Result<Option<PeerId>, SimError> {
        let plan = self.plans[i].clone();
        self.counters.arrivals += 1;
        self.status.insert(plan.id, Status::Active);
        let v = measure(&mut self.probe, &self.topo, self.ov.milestones(), plan.router, self.ov.space.outer_bound());
        let node = PeerNode::receiver(plan.id, plan.router, plan.request.clone(), plan.capacity, v)
            .with_components(plan.hosted.iter().copied(), plan.slots);
        self.ov.add_peer(node, &self.topo)?;
        let opts = self.join_opts(false);
        let report = join(&mut self.ov, &self.topo, plan.id, &opts)?;
        let detail = self.after_join(plan.id, &report, 0.0, false)?;
        self.log(
            seq,
            "peer-arrival",
            Some(plan.id),
            format!("router={} spec={} {detail}", plan.router.0, plan.request.spec),
        );
        Ok(Some(plan.id))
    }

    /// Bookkeeping after any join attempt. `extra` is time already spent
    /// before the join started (e.g. a parent round trip).
    fn after_join(&mut self, p: PeerId, report: &JoinReport, extra: f64, repair: bool) -> Result<String, SimError> {
        match &report.outcome {
            JoinOutcome::Attached { parent, path, heuristic } => {
                self.counters.joins += 1;
                self.retried.remove(&p);
                let req = self.ov.peer(p).and_then(|n| n.request.clone()).expect("receiver");
                if let QosObservation::Delivered { delay_ms, bandwidth_mbps } = self.ov.realized_qos(p, &self.topo) {
                    self.admissions.push(AdmissionRecord {
                        time_ms: self.now,
                        peer: p,
                        delay_ms,
                        bandwidth_mbps,
                        max_delay_ms: req.qos.max_delay_ms,
                        min_bandwidth_mbps: req.qos.min_bandwidth_mbps,
                    });
                }
                if self.sc.policy.maintenance {
                    adapt::refresh_closer_parent(&mut self.ov, &self.topo, p, &self.sc.policy.repair);
                }
                self.deliver(report.notifications.clone());
                let restored_at = self.now + extra + report.latency_ms;
                self.restore(restored_at);
                Ok(format!(
                    "attached parent={} via={:?} delay={} latency={}",
                    parent.0,
                    heuristic,
                    fmt_g6(path.cumulative_delay_ms),
                    fmt_g6(extra + report.latency_ms)
                ))
            }
            JoinOutcome::Rejected(r) => {
                match r {
                    RejectReason::NoCandidates => self.counters.rejected_no_candidates += 1,
                    RejectReason::QosInfeasible => self.counters.rejected_qos += 1,
                    RejectReason::Capacity => self.counters.rejected_capacity += 1,
                }
                if self.retried.insert(p) {
                    self.retry_kind.insert(p, repair);
                    self.schedule(self.now + self.sc.policy.retry_backoff_ms, EventKind::Retry(p));
                    Ok(format!("rejected={r} retry-scheduled"))
                } else {
                    self.reject_permanently(p)?;
                    Ok(format!("rejected={r} permanent"))
                }
            }
        }
    }

    fn reject_permanently(&mut self, p: PeerId) -> Result<(), SimError> {
        self.counters.permanent_rejections += 1;
        self.status.insert(p, Status::Rejected);
        self.drop_pending(p);
        self.remove_peer(p, true)
    }

    fn drop_pending(&mut self, p: PeerId) {
        if self.pending.remove(&p).is_some() {
            self.unrecovered += 1;
        }
        self.awaiting_timeout.remove(&p);
        self.retry_kind.remove(&p);
    }

    /// Takes `p` out of the overlay. With `graceful`, its children are told
    /// and rejoin at once; otherwise they find out through monitoring.
    fn remove_peer(&mut self, p: PeerId, graceful: bool) -> Result<(), SimError> {
        if !self.ov.tree.is_member(p) {
            self.ov.forget(p);
            return Ok(());
        }
        let out = self.ov.leave(p, &self.topo)?;
        self.deliver(out.notifications);
        if graceful {
            for o in out.orphans {
                if self.active(o) {
                    self.schedule(self.now, EventKind::Rejoin(o));
                }
            }
        }
        Ok(())
    }

    fn on_departure(&mut self, seq: u64, p: PeerId) -> Result<Option<PeerId>, SimError> {
        if !self.active(p) {
            self.log(seq, "peer-departure", Some(p), "ignored".into());
            return Ok(Some(p));
        }
        self.counters.departures += 1;
        self.status.insert(p, Status::Departed);
        self.drop_pending(p);
        let children = self.ov.tree.child_count(p);
        self.remove_peer(p, true)?;
        self.log(seq, "peer-departure", Some(p), format!("orphans={children}"));
        Ok(Some(p))
    }

    fn receivers_ok(&self) -> BTreeSet<PeerId> {
        self.status
            .iter()
            .filter(|(p, s)| **s == Status::Active && self.ov.tree.is_attached(**p))
            .map(|(p, _)| *p)
            .filter(|&p| {
                matches!(adapt::monitor(&self.ov, &self.topo, p, &self.sc.policy.repair, self.now), MonitorResult::Ok)
            })
            .collect()
    }

    fn on_failure(&mut self, seq: u64, i: usize) -> Result<(), SimError> {
        let element = self.failures[i].1;
        let ok_before = self.receivers_ok();
        self.counters.failures += 1;
        if let Err(e) = self.topo.fail_element(element) {
            self.log(seq, "element-failure", None, format!("{element} skipped: {e}"));
            return Ok(());
        }
        let mut killed = Vec::new();
        if let Element::Router(r) = element {
            let victims: Vec<PeerId> =
                self.ov.peers().filter(|n| n.router == r && n.role != PeerRole::Server).map(|n| n.id).collect();
            for p in victims {
                if self.active(p) {
                    self.counters.killed += 1;
                    self.counters.departures += 1;
                    self.status.insert(p, Status::Departed);
                    self.drop_pending(p);
                }
                self.remove_peer(p, false)?;
                killed.push(p.0.to_string());
            }
        }
        let mut hit = 0;
        for p in ok_before {
            if !self.active(p) {
                continue;
            }
            if let MonitorResult::Violation(_) =
                adapt::monitor(&self.ov, &self.topo, p, &self.sc.policy.repair, self.now)
            {
                self.pending.entry(p).or_insert(Pending { failure_id: i, since_ms: self.now });
                hit += 1;
            }
        }
        self.log(
            seq,
            "element-failure",
            None,
            format!("{element} id={i} affected={hit} killed=[{}]", killed.join(" ")),
        );
        match self.sc.policy.monitoring {
            Monitoring::Lazy => {
                self.detect();
            }
            Monitoring::Poll => {
                let every = self.sc.policy.poll_interval_ms;
                let t = ((self.now / every).floor() + 1.0) * every;
                if self.tick_at.is_none_or(|at| at > t) {
                    self.tick_at = Some(t);
                    self.schedule(t, EventKind::PollTick);
                }
            }
        }
        Ok(())
    }

    /// Every active receiver on the tree checks its QoS; violators complain.
    fn detect(&mut self) -> usize {
        let peers: Vec<PeerId> = self
            .status
            .iter()
            .filter(|(_, s)| **s == Status::Active)
            .map(|(p, _)| *p)
            .filter(|p| {
                self.ov.tree.is_member(*p) && !self.awaiting_timeout.contains(p) && !self.retry_kind.contains_key(p)
            })
            .collect();
        let mut n = 0;
        for p in peers {
            if let MonitorResult::Violation(_) =
                adapt::monitor(&self.ov, &self.topo, p, &self.sc.policy.repair, self.now)
            {
                self.counters.complaints += 1;
                self.schedule(self.now, EventKind::Complaint(p));
                n += 1;
            }
        }
        n
    }

    fn on_complaint(&mut self, seq: u64, p: PeerId) -> Result<(), SimError> {
        if !self.active(p) || !self.ov.tree.is_member(p) || self.awaiting_timeout.contains(&p) {
            self.log(seq, "complaint", Some(p), "stale".into());
            return Ok(());
        }
        let complaint = match adapt::monitor(&self.ov, &self.topo, p, &self.sc.policy.repair, self.now) {
            MonitorResult::Ok => {
                self.log(seq, "complaint", Some(p), "resolved".into());
                return Ok(());
            }
            MonitorResult::Violation(c) => c,
        };
        if self.baseline() {
            let opts = self.join_opts(true);
            let rec = adapt::rejoin(&mut self.ov, &self.topo, p, None, &opts)?;
            self.deliver(rec.notifications.clone());
            let detail = self.after_join(p, rec.join.as_ref().expect("joined"), 0.0, true)?;
            self.log(seq, "complaint", Some(p), format!("root-rejoin {detail}"));
            return Ok(());
        }
        match adapt::try_parent_repair(&mut self.ov, &self.topo, &complaint, &self.sc.policy.repair) {
            ParentResponse::Repaired { latency_ms } => {
                self.counters.parent_repairs += 1;
                let notes = self.ov.publish_subtree(p, &self.topo)?;
                self.deliver(notes);
                if self.sc.policy.maintenance {
                    adapt::refresh_closer_parent(&mut self.ov, &self.topo, p, &self.sc.policy.repair);
                }
                self.restore(self.now + latency_ms);
                self.log(seq, "complaint", Some(p), format!("parent-repaired latency={}", fmt_g6(latency_ms)));
            }
            ParentResponse::Insufficient { latency_ms } => {
                let opts = self.join_opts(false);
                let rec = adapt::rejoin(&mut self.ov, &self.topo, p, None, &opts)?;
                self.deliver(rec.notifications.clone());
                let detail = self.after_join(p, rec.join.as_ref().expect("joined"), latency_ms, true)?;
                self.log(seq, "complaint", Some(p), format!("repair-insufficient {} {detail}", rec.outcome));
            }
            ParentResponse::Unresponsive => {
                self.awaiting_timeout.insert(p);
                let t = self.now + self.sc.policy.repair.parent_response_timeout_ms;
                self.schedule(t, EventKind::ComplaintTimeout(p));
                self.log(seq, "complaint", Some(p), "parent-unresponsive".into());
            }
        }
        Ok(())
    }

    fn on_timeout(&mut self, seq: u64, p: PeerId) -> Result<(), SimError> {
        self.awaiting_timeout.remove(&p);
        if !self.active(p) || !self.ov.tree.is_member(p) {
            self.log(seq, "complaint-timeout", Some(p), "stale".into());
            return Ok(());
        }
        if let MonitorResult::Ok = adapt::monitor(&self.ov, &self.topo, p, &self.sc.policy.repair, self.now) {
            self.log(seq, "complaint-timeout", Some(p), "resolved".into());
            return Ok(());
        }
        let avoid = self.ov.tree.parent_of(p);
        let opts = self.join_opts(false);
        let rec = adapt::rejoin(&mut self.ov, &self.topo, p, avoid, &opts)?;
        self.deliver(rec.notifications.clone());
        let detail = self.after_join(p, rec.join.as_ref().expect("joined"), 0.0, true)?;
        self.log(seq, "complaint-timeout", Some(p), format!("{} {detail}", rec.outcome));
        Ok(())
    }

    fn on_retry(&mut self, seq: u64, p: PeerId) -> Result<(), SimError> {
        let Some(repair) = self.retry_kind.remove(&p) else {
            self.log(seq, "retry", Some(p), "stale".into());
            return Ok(());
        };
        if !self.active(p) || self.ov.tree.is_attached(p) {
            self.log(seq, "retry", Some(p), "stale".into());
            return Ok(());
        }
        self.counters.retries += 1;
        let root_only = repair && self.baseline();
        let opts = self.join_opts(root_only);
        let report = join(&mut self.ov, &self.topo, p, &opts)?;
        let detail = self.after_join(p, &report, 0.0, repair)?;
        self.log(seq, "retry", Some(p), detail);
        Ok(())
    }

    fn on_rejoin(&mut self, seq: u64, p: PeerId) -> Result<(), SimError> {
        if !self.active(p)
            || self.ov.tree.is_attached(p)
            || self.ov.tree.parent_of(p).is_some()
            || self.retry_kind.contains_key(&p)
        {
            self.log(seq, "rejoin", Some(p), "stale".into());
            return Ok(());
        }
        let opts = self.join_opts(false);
        let report = join(&mut self.ov, &self.topo, p, &opts)?;
        let detail = self.after_join(p, &report, 0.0, false)?;
        self.log(seq, "rejoin", Some(p), detail);
        Ok(())
    }

    fn on_notification(&mut self, seq: u64, note: &Notification) -> Result<(), SimError> {
        self.counters.notifications += 1;
        let p = note.subscriber;
        if !self.active(p) || self.awaiting_timeout.contains(&p) {
            self.log(seq, "notification-delivery", Some(p), "stale".into());
            return Ok(());
        }
        let (decision, notes) = adapt::on_notification(&mut self.ov, &self.topo, note, &self.sc.policy.repair)?;
        let detail = match decision {
            SwitchDecision::Switched { from, to, old_delay_ms, new_delay_ms } => {
                self.counters.switches += 1;
                adapt::refresh_closer_parent(&mut self.ov, &self.topo, p, &self.sc.policy.repair);
                format!(
                    "switched from={} to={} delay={}->{}",
                    from.map(|f| f.0.to_string()).unwrap_or_default(),
                    to.0,
                    fmt_g6(old_delay_ms),
                    fmt_g6(new_delay_ms)
                )
            }
            SwitchDecision::Ignored(r) => format!("ignored candidate={} reason={r:?}", note.candidate.peer_id.0),
        };
        self.deliver(notes);
        self.log(seq, "notification-delivery", Some(p), detail);
        Ok(())
    }

    /// Closes every pending recovery whose peer is back within tolerance.
    fn restore(&mut self, at: f64) {
        let healed: Vec<(PeerId, Pending)> = self
            .pending
            .iter()
            .filter(|(p, _)| {
                matches!(adapt::monitor(&self.ov, &self.topo, **p, &self.sc.policy.repair, self.now), MonitorResult::Ok)
                    && self.ov.tree.is_attached(**p)
            })
            .map(|(p, r)| (*p, *r))
            .collect();
        for (p, r) in healed {
            self.pending.remove(&p);
            self.recoveries.push(RecoveryRecord { failure_id: r.failure_id, peer: p, latency_ms: at - r.since_ms });
        }
    }

    fn finish(mut self) -> RunOutput {
        let mut cons = Conservation { arrivals: self.counters.arrivals, ..Conservation::default() };
        for (&p, s) in &self.status {
            match s {
                Status::Departed => cons.departed += 1,
                Status::Rejected => cons.rejected += 1,
                Status::Active if self.ov.tree.is_attached(p) => cons.attached += 1,
                Status::Active => cons.pending += 1,
            }
        }
        self.unrecovered += self.pending.len();
        self.counters.leave_warnings = self.ov.leave_warnings();
        self.counters.clamped_vectors = self.ov.space.clamp_count();

        let n = self.samples.len();
        let (stress_avg, stretch) = if n == 0 {
            (0.0, 0.0)
        } else {
            (
                self.samples.iter().map(|m| m.stress_avg).sum::<f64>() / n as f64,
                self.samples.iter().map(|m| m.stretch).sum::<f64>() / n as f64,
            )
        };
        let stress_max = self.samples.iter().map(|m| m.stress_max).max().unwrap_or(0);
        let recovery_mean_ms =
            metrics::mean_std(&self.recoveries.iter().map(|r| r.latency_ms).collect::<Vec<_>>()).map(|m| m.0);
        let report = MetricsReport {
            scenario_id: self.sc.scenario_id.clone(),
            seed: self.sc.seed,
            peers_final: cons.attached as usize,
            stress_avg,
            stress_max,
            stretch,
            samples: n,
            final_tree: metrics::tree_metrics(&self.ov, &self.topo),
            recoveries: self.recoveries,
            recovery_mean_ms,
            unrecovered: self.unrecovered,
            speedup: None,
            control_hops: self.ov.space.control_hops(),
            counters: self.counters,
        };
        RunOutput {
            report,
            events: self.events,
            overlay: self.ov,
            topology: self.topo,
            admissions: self.admissions,
            conservation: cons,
            invariant_violations: self.violations,
        }
    }
}
