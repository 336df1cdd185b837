use qmcast::coords::{milestone_vector, select_milestones};
use qmcast::ddht::{InfraNodeId, SpaceConfig, ZoneSpace};
use qmcast::metrics::{recompute_from_dump, tree_metrics};
use qmcast::servicetree::{join, JoinOptions, Overlay, PeerId, PeerNode, QosRequirement, ServiceRequest, ServiceSpec};
use qmcast::underlay::{PhysicalTopology, RouterId};

/// Every peer joins straight under the server, one per listed router.
fn star_overlay(topo: &PhysicalTopology, server: u32, peers: &[u32]) -> Overlay {
    let ms = select_milestones(topo, 2, 1).unwrap();
    let v = |r| milestone_vector(topo, RouterId(r), &ms).unwrap();
    let space = ZoneSpace::create_space(2, InfraNodeId(0), SpaceConfig::default());
    let mut ov =
        Overlay::new(PeerNode::server(PeerId(0), RouterId(server), 16, v(server)), space, ms.clone(), topo).unwrap();
    let req = ServiceRequest {
        spec: ServiceSpec::origin(),
        qos: QosRequirement { max_delay_ms: 1e6, min_bandwidth_mbps: 1.0 },
    };
    let root_only = JoinOptions { root_only: true, ..JoinOptions::default() };
    for (i, &r) in peers.iter().enumerate() {
        let id = PeerId(1 + i as u32);
        ov.add_peer(PeerNode::receiver(id, RouterId(r), req.clone(), 4, v(r)), topo).unwrap();
        join(&mut ov, topo, id, &root_only).unwrap();
        assert_eq!(ov.tree.parent_of(id), Some(PeerId(0)));
    }
    ov
}

/// Cayley enumeration: the minimum total weight over every labelled tree on
/// `n` nodes, decoded from all Prüfer sequences.
fn brute_force_mst(w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    if n < 2 {
        return 0.0;
    }
    if n == 2 {
        return w[0][1];
    }
    let mut best = f64::INFINITY;
    let mut seq = vec![0usize; n - 2];
    loop {
        let mut degree = vec![1usize; n];
        for &s in &seq {
            degree[s] += 1;
        }
        let mut total = 0.0;
        for &s in &seq {
            let leaf = (0..n).find(|&i| degree[i] == 1).unwrap();
            total += w[leaf][s];
            degree[leaf] -= 1;
            degree[s] -= 1;
        }
        let rest: Vec<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
        total += w[rest[0]][rest[1]];
        best = best.min(total);

        let mut i = 0;
        loop {
            if i == seq.len() {
                return best;
            }
            seq[i] += 1;
            if seq[i] < n {
                break;
            }
            seq[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn star_tree_on_a_path_underlay_is_stretched() {
    // r0 - r1 - r2 - r3 - r4, 10 ms per hop
    let links: Vec<_> = (0..4).map(|i| (i, i + 1, 10.0, 100.0)).collect();
    let topo = PhysicalTopology::from_links(5, &links).unwrap();
    let ov = star_overlay(&topo, 0, &[1, 2, 3, 4]);
    let m = tree_metrics(&ov, &topo);

    let routers = [0u32, 1, 2, 3, 4];
    let w: Vec<Vec<f64>> =
        routers.iter().map(|&a| routers.iter().map(|&b| 10.0 * (a as f64 - b as f64).abs()).collect()).collect();
    let mst = brute_force_mst(&w);
    assert_eq!(mst, 40.0);
    // the star pays 10 + 20 + 30 + 40
    assert_eq!(m.stretch, 100.0 / mst);
    assert!(m.stretch > 1.0);
    // first link carries four edges, the next three, then two, then one
    assert_eq!(m.stress_max, 4);
    assert_eq!(m.stress_avg, 10.0 / 4.0);
}

#[test]
fn star_underlay_with_disjoint_routes_has_unit_stress() {
    // hub r0 with five leaves
    let links: Vec<_> = (1..=5).map(|i| (0, i, 3.0 + i as f64, 100.0)).collect();
    let topo = PhysicalTopology::from_links(6, &links).unwrap();
    let ov = star_overlay(&topo, 0, &[1, 2, 3, 4, 5]);
    let m = tree_metrics(&ov, &topo);
    assert_eq!(m.stress_avg, 1.0);
    assert_eq!(m.stress_max, 1);
    assert_eq!(m.edges, 5);
    // every tree edge is a hub spoke, which is also the spanning tree
    assert_eq!(m.stretch, 1.0);
}

#[test]
fn recompute_agrees_with_live_metrics_on_hand_built_tree() {
    let links: Vec<_> = (0..4).map(|i| (i, i + 1, 10.0, 100.0)).collect();
    let topo = PhysicalTopology::from_links(5, &links).unwrap();
    let ov = star_overlay(&topo, 2, &[0, 1, 3, 4]);
    let doc = ov.tree.to_doc(|p| ov.peer(p).map(|n| n.router));
    assert_eq!(recompute_from_dump(&doc, &topo), tree_metrics(&ov, &topo));
}

#[test]
fn prufer_oracle_sanity() {
    // triangle with one heavy side
    let w = vec![vec![0.0, 1.0, 5.0], vec![1.0, 0.0, 2.0], vec![5.0, 2.0, 0.0]];
    assert_eq!(brute_force_mst(&w), 3.0);
}
