use std::collections::{BTreeMap, VecDeque};

use super::TreeMetrics;
use crate::servicetree::{PeerId, TreeDoc};
use crate::underlay::{LinkId, PhysicalTopology, RouterId};

/// Stress and stretch computed from a dumped tree and topology alone.
///
/// Only edges whose whole root path is live count, matching what the
/// simulator measures. The spanning-tree weight is found with Kruskal over
/// all node pairs.
pub fn recompute_from_dump(tree: &TreeDoc, topo: &PhysicalTopology) -> TreeMetrics {
    let mut kids: BTreeMap<PeerId, Vec<PeerId>> = BTreeMap::new();
    let mut edge_delay: BTreeMap<PeerId, f64> = BTreeMap::new();
    for &(p, c, d, _) in &tree.edges {
        kids.entry(p).or_default().push(c);
        edge_delay.insert(c, d);
    }
    let live_router = |p: &PeerId| tree.routers.get(p).is_some_and(|&r| topo.is_router_live(r));
    let hop_links = |c: &PeerId| -> Option<Vec<LinkId>> {
        let hops = tree.routes.get(c)?;
        let mut links = Vec::new();
        for w in hops.windows(2) {
            let l = topo.link_between(w[0], w[1])?;
            if !topo.is_router_live(w[0]) || !topo.is_router_live(w[1]) || !topo.is_link_live(l) {
                return None;
            }
            links.push(l);
        }
        Some(links)
    };

    let mut delivered: BTreeMap<PeerId, Vec<LinkId>> = BTreeMap::new();
    if live_router(&tree.root) {
        let mut queue = VecDeque::from([tree.root]);
        while let Some(p) = queue.pop_front() {
            for c in kids.get(&p).into_iter().flatten() {
                if !live_router(c) {
                    continue;
                }
                if let Some(links) = hop_links(c) {
                    delivered.insert(*c, links);
                    queue.push_back(*c);
                }
            }
        }
    }
    if delivered.is_empty() {
        return TreeMetrics { empty: true, ..TreeMetrics::default() };
    }

    let mut counts: BTreeMap<LinkId, u32> = BTreeMap::new();
    for links in delivered.values() {
        for l in links {
            *counts.entry(*l).or_default() += 1;
        }
    }
    let (stress_avg, stress_max) = if counts.is_empty() {
        (0.0, 0)
    } else {
        let total: u32 = counts.values().sum();
        (total as f64 / counts.len() as f64, *counts.values().max().expect("nonempty"))
    };

    let tree_sum: f64 = delivered.keys().map(|c| edge_delay[c]).sum();
    let mut routers: Vec<RouterId> = vec![tree.routers[&tree.root]];
    routers.extend(delivered.keys().map(|c| tree.routers[c]));
    let mst = kruskal(&routers, topo);
    let stretch = if mst == 0.0 { 1.0 } else { tree_sum / mst };
    TreeMetrics { stress_avg, stress_max, stretch, edges: delivered.len(), empty: false }
}

fn kruskal(routers: &[RouterId], topo: &PhysicalTopology) -> f64 {
    let n = routers.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if let Some(d) = topo.delay_ms(routers[i], routers[j]) {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut chosen = Vec::new();
    for (d, i, j) in pairs {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a] = b;
            chosen.push(d);
        }
    }
    chosen.iter().sum()
}
