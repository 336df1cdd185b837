use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::scenario::Scenario;
use crate::servicetree::{PeerId, QosRequirement, ServiceRequest, TransformId};
use crate::underlay::{Element, LinkId, PhysicalTopology, RouterId};

/// Independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Topology,
    Workload,
    Noise,
}

/// Generator for `stream` under `seed`. The topology generator itself
/// uses streams `0..64` of the plain seed, so these sit well above that.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match stream {
        Stream::Topology => 1 << 20,
        Stream::Workload => 2 << 20,
        Stream::Noise => 3 << 20,
    });
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeerPlan {
    pub id: PeerId,
    pub arrival_ms: f64,
    pub departure_ms: f64,
    pub router: RouterId,
    pub request: ServiceRequest,
    pub capacity: u32,
    pub hosted: Vec<TransformId>,
    pub slots: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HelperPlan {
    pub id: PeerId,
    pub router: RouterId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub helpers: Vec<HelperPlan>,
    pub peers: Vec<PeerPlan>,
}

fn exponential(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    let u: f64 = rng.gen();
    -mean * (1.0 - u).ln()
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..r.1)
    }
}

/// Helpers get ids `1..=H`, receivers follow in arrival order.
pub fn generate_workload(sc: &Scenario, rng: &mut ChaCha8Rng) -> Workload {
    let routers = sc.topology.routers as u32;
    let helpers = (0..sc.helpers.count)
        .map(|i| HelperPlan { id: PeerId(1 + i as u32), router: RouterId(rng.gen_range(0..routers)) })
        .collect();

    let p = &sc.peers;
    let mix = WeightedIndex::new(p.spec_mix.iter().map(|w| w.weight)).expect("validated weights");
    let mut hostable: Vec<TransformId> = p.spec_mix.iter().flat_map(|w| w.spec.chain.iter().copied()).collect();
    hostable.sort();
    hostable.dedup();

    let mut t = 0.0;
    let mut peers = Vec::with_capacity(p.count);
    for i in 0..p.count {
        t += exponential(rng, 1000.0 / p.arrival_rate_per_s);
        let session = exponential(rng, 1000.0 * p.mean_session_s);
        let router = RouterId(rng.gen_range(0..routers));
        let spec = p.spec_mix[mix.sample(rng)].spec.clone();
        let qos = QosRequirement {
            max_delay_ms: uniform(rng, p.max_delay_ms),
            min_bandwidth_mbps: uniform(rng, p.min_bandwidth_mbps),
        };
        let capacity = rng.gen_range(p.capacity.0..=p.capacity.1);
        let hosts = rng.gen_bool(p.host_probability);
        peers.push(PeerPlan {
            id: PeerId(1 + sc.helpers.count as u32 + i as u32),
            arrival_ms: t,
            departure_ms: t + session,
            router,
            request: ServiceRequest { spec, qos },
            capacity,
            hosted: if hosts { hostable.clone() } else { Vec::new() },
            slots: if hosts { p.host_slots } else { 0 },
        });
    }
    Workload { helpers, peers }
}

/// Scripted failures plus `random_links` distinct links failed at uniform
/// times inside the window, ordered by time (scripted first on ties).
pub fn failure_schedule(sc: &Scenario, topo: &PhysicalTopology, rng: &mut ChaCha8Rng) -> Vec<(f64, Element)> {
    let mut out: Vec<(f64, Element)> = sc.failures.scripted.iter().map(|f| (f.time_ms, f.element)).collect();
    let n = sc.failures.random_links.min(topo.links().len());
    let picks = rand::seq::index::sample(rng, topo.links().len(), n).into_vec();
    for l in picks {
        let t = uniform(rng, sc.failures.window_ms);
        out.push((t, Element::Link(LinkId(l as u32))));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}
