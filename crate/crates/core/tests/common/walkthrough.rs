//! The two join examples of the tree-construction walkthrough, rebuilt on a
//! six-router underlay:
//!
//! ```text
//!   r0 ---10--- r1 ---10--- r2 --2-- r3
//!    \          |
//!     \--40--- r4 --5-- r5
//! ```
//!
//! server on r0 (one child slot), `a` on r1 receives O, `b` on r2 receives
//! f(O) and applies f itself, `n` on r3 wants f(O). Later the off-tree host
//! `f` appears on r4 and `n'` on r5 wants f(O) within 30 ms.

use qmcast::coords::{milestone_vector, select_milestones};
use qmcast::ddht::{InfraNodeId, SpaceConfig, ZoneSpace};
use qmcast::servicetree::{
    join, JoinOptions, JoinReport, Overlay, PeerId, PeerNode, QosRequirement, ServiceRequest, ServiceSpec, TransformId,
};
use qmcast::underlay::{PhysicalTopology, RouterId};

pub const SERVER: PeerId = PeerId(0);
pub const A: PeerId = PeerId(1);
pub const B: PeerId = PeerId(2);
pub const N: PeerId = PeerId(3);
pub const F: PeerId = PeerId(4);
pub const N_PRIME: PeerId = PeerId(5);
pub const TRANSFORM_F: TransformId = TransformId(1);

pub fn topology() -> PhysicalTopology {
    PhysicalTopology::from_links(
        6,
        &[
            (0, 1, 10.0, 100.0),
            (1, 2, 10.0, 100.0),
            (2, 3, 2.0, 100.0),
            (1, 4, 10.0, 100.0),
            (4, 5, 5.0, 100.0),
            (0, 4, 40.0, 100.0),
        ],
    )
    .unwrap()
}

fn request(spec: ServiceSpec, max_delay_ms: f64) -> ServiceRequest {
    ServiceRequest { spec, qos: QosRequirement { max_delay_ms, min_bandwidth_mbps: 1.0 } }
}

fn f_of_o() -> ServiceSpec {
    ServiceSpec::new([TRANSFORM_F.0])
}

fn joined(ov: &mut Overlay, topo: &PhysicalTopology, node: PeerNode) -> JoinReport {
    let id = node.id;
    ov.add_peer(node, topo).unwrap();
    join(ov, topo, id, &JoinOptions::default()).unwrap()
}

/// Server, `a` and `b` on the tree, then `n` joins. Returns the overlay and
/// `n`'s join report.
pub fn scenario_a(topo: &PhysicalTopology) -> (Overlay, JoinReport) {
    let ms = select_milestones(topo, 3, 1).unwrap();
    let v = |r: u32| milestone_vector(topo, RouterId(r), &ms).unwrap();
    let space = ZoneSpace::create_space(ms.dimension(), InfraNodeId(0), SpaceConfig::default());
    let mut ov = Overlay::new(PeerNode::server(SERVER, RouterId(0), 1, v(0)), space, ms.clone(), topo).unwrap();
    joined(&mut ov, topo, PeerNode::receiver(A, RouterId(1), request(ServiceSpec::origin(), 100.0), 2, v(1)));
    let b = PeerNode::receiver(B, RouterId(2), request(f_of_o(), 100.0), 2, v(2)).with_components([TRANSFORM_F], 1);
    joined(&mut ov, topo, b);
    let rep = joined(&mut ov, topo, PeerNode::receiver(N, RouterId(3), request(f_of_o(), 100.0), 2, v(3)));
    (ov, rep)
}

/// Continues [`scenario_a`]: the host `f` comes up off-tree, then `n'` joins.
pub fn scenario_b(topo: &PhysicalTopology) -> (Overlay, JoinReport) {
    let (mut ov, _) = scenario_a(topo);
    let v = |r: u32| milestone_vector(topo, RouterId(r), ov.milestones()).unwrap();
    let (vf, vn) = (v(4), v(5));
    ov.add_peer(PeerNode::helper(F, RouterId(4), [TRANSFORM_F], 1, 2, vf), topo).unwrap();
    let rep = joined(&mut ov, topo, PeerNode::receiver(N_PRIME, RouterId(5), request(f_of_o(), 30.0), 2, vn));
    (ov, rep)
}
