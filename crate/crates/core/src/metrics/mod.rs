//! Stress, stretch, recovery speedup, and report formatting.

mod format;
mod recompute;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::servicetree::{Overlay, PeerId, QosObservation};
use crate::underlay::{LinkId, PhysicalTopology, RoutePath, RouterId};

pub use format::{fmt_g6, write_csv_row};
pub use recompute::recompute_from_dump;
pub use report::{Counters, MetricsReport, RecoveryRecord, REPORT_HEADER};

/// Tree quality at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TreeMetrics {
    pub stress_avg: f64,
    pub stress_max: u32,
    pub stretch: f64,
    /// Tree edges counted.
    pub edges: usize,
    /// No edge to measure; the other fields are zero.
    pub empty: bool,
}

/// Edges `(parent, child, route)` into every peer that currently receives
/// service, ordered by child id. These edges form a tree rooted at the server.
pub fn delivering_edges<'a>(ov: &'a Overlay, topo: &PhysicalTopology) -> Vec<(PeerId, PeerId, &'a RoutePath)> {
    ov.tree
        .attached_edges()
        .into_iter()
        .filter(|(_, c, _)| matches!(ov.realized_qos(*c, topo), QosObservation::Delivered { .. }))
        .collect()
}

/// Per-link overlay edge counts: `(mean over used links, max)`.
pub fn stress<'a>(routes: impl IntoIterator<Item = &'a RoutePath>) -> (f64, u32) {
    let mut counts: BTreeMap<LinkId, u32> = BTreeMap::new();
    for r in routes {
        for &l in &r.links {
            *counts.entry(l).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return (0.0, 0);
    }
    let total: u32 = counts.values().sum();
    (total as f64 / counts.len() as f64, counts.values().copied().max().unwrap_or(0))
}

/// Weight of a minimum spanning tree over the complete graph on `routers`,
/// edge weight = shortest-path delay. Weights are summed in ascending order
/// so every minimum spanning tree yields the identical float.
pub fn mst_weight(routers: &[RouterId], topo: &PhysicalTopology) -> Option<f64> {
    let n = routers.len();
    if n < 2 {
        return Some(0.0);
    }
    let mut best = vec![f64::INFINITY; n];
    let mut in_tree = vec![false; n];
    let mut chosen = Vec::with_capacity(n - 1);
    best[0] = 0.0;
    for step in 0..n {
        let (u, _) = (0..n)
            .filter(|&i| !in_tree[i])
            .map(|i| (i, best[i]))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))?;
        if !best[u].is_finite() {
            return None;
        }
        in_tree[u] = true;
        if step > 0 {
            chosen.push(best[u]);
        }
        for v in 0..n {
            if !in_tree[v] {
                let d = topo.delay_ms(routers[u], routers[v]).unwrap_or(f64::INFINITY);
                if d < best[v] {
                    best[v] = d;
                }
            }
        }
    }
    chosen.sort_by(f64::total_cmp);
    Some(chosen.iter().sum())
}

/// Sum of tree edge delays over the minimum spanning tree weight of the same
/// node set. 1 when every node shares one router.
pub fn stretch(edge_delays: &[f64], routers: &[RouterId], topo: &PhysicalTopology) -> Option<f64> {
    let mst = mst_weight(routers, topo)?;
    let tree: f64 = edge_delays.iter().sum();
    if mst == 0.0 {
        return Some(1.0);
    }
    Some(tree / mst)
}

/// Stress and stretch of the part of the tree that currently delivers.
pub fn tree_metrics(ov: &Overlay, topo: &PhysicalTopology) -> TreeMetrics {
    let edges = delivering_edges(ov, topo);
    if edges.is_empty() {
        return TreeMetrics { empty: true, ..TreeMetrics::default() };
    }
    let (stress_avg, stress_max) = stress(edges.iter().map(|e| e.2));
    let delays: Vec<f64> = edges.iter().map(|e| e.2.total_delay_ms).collect();
    let mut routers = vec![ov.peer(ov.server()).expect("server").router];
    routers.extend(edges.iter().map(|e| ov.peer(e.1).expect("member").router));
    let stretch = stretch(&delays, &routers, topo).expect("delivering peers reach the server");
    TreeMetrics { stress_avg, stress_max, stretch, edges: edges.len(), empty: false }
}

/// Ratio of mean baseline recovery latency to mean adaptive recovery
/// latency over recoveries present in both runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "kebab-case")]
pub enum Speedup {
    Ratio {
        value: f64,
        pairs: usize,
        baseline_mean_ms: f64,
        adaptive_mean_ms: f64,
        unpaired_adaptive: usize,
        unpaired_baseline: usize,
    },
    Incomparable {
        unpaired_adaptive: usize,
        unpaired_baseline: usize,
    },
}

impl Speedup {
    pub fn value(&self) -> Option<f64> {
        match self {
            Speedup::Ratio { value, .. } => Some(*value),
            Speedup::Incomparable { .. } => None,
        }
    }
}

/// Pairs recoveries by `(failure, peer)`.
pub fn speedup(adaptive: &[RecoveryRecord], baseline: &[RecoveryRecord]) -> Speedup {
    let index = |recs: &[RecoveryRecord]| {
        let mut m: BTreeMap<(usize, PeerId), f64> = BTreeMap::new();
        for r in recs {
            m.entry((r.failure_id, r.peer)).or_insert(r.latency_ms);
        }
        m
    };
    let a = index(adaptive);
    let b = index(baseline);
    let paired: Vec<(f64, f64)> = a.iter().filter_map(|(k, &la)| b.get(k).map(|&lb| (la, lb))).collect();
    let unpaired_adaptive = a.len() - paired.len();
    let unpaired_baseline = b.len() - paired.len();
    if paired.is_empty() {
        return Speedup::Incomparable { unpaired_adaptive, unpaired_baseline };
    }
    let n = paired.len() as f64;
    let adaptive_mean_ms = paired.iter().map(|p| p.0).sum::<f64>() / n;
    let baseline_mean_ms = paired.iter().map(|p| p.1).sum::<f64>() / n;
    if adaptive_mean_ms == 0.0 {
        return Speedup::Incomparable { unpaired_adaptive, unpaired_baseline };
    }
    Speedup::Ratio {
        value: baseline_mean_ms / adaptive_mean_ms,
        pairs: paired.len(),
        baseline_mean_ms,
        adaptive_mean_ms,
        unpaired_adaptive,
        unpaired_baseline,
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}
