//! Physical network model: routers, links, delay-weighted shortest routes
//! and failure injection.
//!
//! The topology is the ground truth for every overlay measurement. Delay and
//! bandwidth probes, RTTs to milestones and the per-edge routes of the
//! multicast tree are all answered from here.

mod generate;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generate::{generate_topology, GeneratorKind, TopologyParams};

/// Sentinel bottleneck for routes with no links (a router talking to itself).
pub const UNBOUNDED_MBPS: f64 = f64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RouterId(pub u32);

impl fmt::Display for RouterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub u32);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

/// An undirected physical link. `a < b` always holds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub a: RouterId,
    pub b: RouterId,
    pub delay_ms: f64,
    pub bandwidth_mbps: f64,
}

impl Link {
    pub fn other(&self, end: RouterId) -> RouterId {
        if end == self.a {
            self.b
        } else {
            self.a
        }
    }
}

/// Something that can be failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Element {
    Link(LinkId),
    Router(RouterId),
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Element::Link(l) => write!(f, "link {}", l.0),
            Element::Router(r) => write!(f, "router {}", r.0),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum UnderlayError {
    #[error("router count must be at least 2, got {0}")]
    TooFewRouters(usize),
    #[error("generator produced no connected topology after {attempts} attempts (seed {seed})")]
    Disconnected { seed: u64, attempts: u32 },
    #[error("unknown element: {0}")]
    UnknownElement(Element),
    #[error("invalid link {a}-{b}: {reason}")]
    InvalidLink { a: u32, b: u32, reason: &'static str },
    #[error("invalid topology parameters: {0}")]
    InvalidParams(String),
    #[error("malformed topology document: {0}")]
    Json(String),
}

/// Returned instead of a number when two routers cannot reach each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{from} cannot reach {to}")]
pub struct Unmeasurable {
    pub from: RouterId,
    pub to: RouterId,
}

/// A routed path through the underlay.
///
/// `hops` includes both endpoints; a route from a router to itself has a
/// single hop and no links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutePath {
    pub hops: Vec<RouterId>,
    pub links: Vec<LinkId>,
    pub total_delay_ms: f64,
    pub bottleneck_mbps: f64,
}

impl RoutePath {
    pub fn src(&self) -> RouterId {
        self.hops[0]
    }

    pub fn dst(&self) -> RouterId {
        *self.hops.last().expect("route has at least one hop")
    }

    fn reversed(&self) -> RoutePath {
        let mut hops = self.hops.clone();
        hops.reverse();
        let mut links = self.links.clone();
        links.reverse();
        RoutePath { hops, links, total_delay_ms: self.total_delay_ms, bottleneck_mbps: self.bottleneck_mbps }
    }
}

/// Single-source shortest-path tree, cached per source router.
#[derive(Debug)]
struct SourceTree {
    dist: Vec<f64>,
    pred: Vec<Option<(RouterId, LinkId)>>,
}

/// The physical network.
pub struct PhysicalTopology {
    router_count: usize,
    links: Vec<Link>,
    adjacency: Vec<Vec<(RouterId, LinkId)>>,
    link_index: BTreeMap<(RouterId, RouterId), LinkId>,
    failed_links: BTreeSet<LinkId>,
    failed_routers: BTreeSet<RouterId>,
    cache: Mutex<BTreeMap<RouterId, Arc<SourceTree>>>,
}

impl Clone for PhysicalTopology {
    fn clone(&self) -> Self {
        PhysicalTopology {
            router_count: self.router_count,
            links: self.links.clone(),
            adjacency: self.adjacency.clone(),
            link_index: self.link_index.clone(),
            failed_links: self.failed_links.clone(),
            failed_routers: self.failed_routers.clone(),
            cache: Mutex::new(BTreeMap::new()),
        }
    }
}

impl fmt::Debug for PhysicalTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PhysicalTopology")
            .field("router_count", &self.router_count)
            .field("links", &self.links.len())
            .field("failed_links", &self.failed_links)
            .field("failed_routers", &self.failed_routers)
            .finish()
    }
}

impl PartialEq for PhysicalTopology {
    fn eq(&self, other: &Self) -> bool {
        self.router_count == other.router_count
            && self.links == other.links
            && self.failed_links == other.failed_links
            && self.failed_routers == other.failed_routers
    }
}

impl PhysicalTopology {
    /// Builds a topology from explicit `(a, b, delay_ms, bandwidth_mbps)` links.
    pub fn from_links(router_count: usize, links: &[(u32, u32, f64, f64)]) -> Result<Self, UnderlayError> {
        let mut topo = PhysicalTopology {
            router_count,
            links: Vec::with_capacity(links.len()),
            adjacency: vec![Vec::new(); router_count],
            link_index: BTreeMap::new(),
            failed_links: BTreeSet::new(),
            failed_routers: BTreeSet::new(),
            cache: Mutex::new(BTreeMap::new()),
        };
        for &(a, b, delay, bw) in links {
            topo.add_link(a, b, delay, bw)?;
        }
        Ok(topo)
    }

    fn add_link(&mut self, a: u32, b: u32, delay_ms: f64, bandwidth_mbps: f64) -> Result<LinkId, UnderlayError> {
        let invalid = |reason| UnderlayError::InvalidLink { a, b, reason };
        if a == b {
            return Err(invalid("self-loop"));
        }
        if a as usize >= self.router_count || b as usize >= self.router_count {
            return Err(invalid("endpoint out of range"));
        }
        if !(delay_ms.is_finite() && delay_ms > 0.0) {
            return Err(invalid("delay must be positive and finite"));
        }
        if !(bandwidth_mbps.is_finite() && bandwidth_mbps > 0.0) {
            return Err(invalid("bandwidth must be positive and finite"));
        }
        let (lo, hi) = (RouterId(a.min(b)), RouterId(a.max(b)));
        if self.link_index.contains_key(&(lo, hi)) {
            return Err(invalid("duplicate link"));
        }
        let id = LinkId(self.links.len() as u32);
        self.links.push(Link { a: lo, b: hi, delay_ms, bandwidth_mbps });
        self.link_index.insert((lo, hi), id);
        insert_sorted(&mut self.adjacency[lo.0 as usize], (hi, id));
        insert_sorted(&mut self.adjacency[hi.0 as usize], (lo, id));
        Ok(id)
    }

    pub fn router_count(&self) -> usize {
        self.router_count
    }

    pub fn routers(&self) -> impl Iterator<Item = RouterId> {
        (0..self.router_count as u32).map(RouterId)
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: LinkId) -> Option<&Link> {
        self.links.get(id.0 as usize)
    }

    pub fn link_between(&self, a: RouterId, b: RouterId) -> Option<LinkId> {
        self.link_index.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn failed_links(&self) -> &BTreeSet<LinkId> {
        &self.failed_links
    }

    pub fn failed_routers(&self) -> &BTreeSet<RouterId> {
        &self.failed_routers
    }

    pub fn contains_router(&self, r: RouterId) -> bool {
        (r.0 as usize) < self.router_count
    }

    pub fn is_router_live(&self, r: RouterId) -> bool {
        self.contains_router(r) && !self.failed_routers.contains(&r)
    }

    pub fn is_link_live(&self, id: LinkId) -> bool {
        match self.link(id) {
            Some(l) => {
                !self.failed_links.contains(&id)
                    && !self.failed_routers.contains(&l.a)
                    && !self.failed_routers.contains(&l.b)
            }
            None => false,
        }
    }

    /// True when every router and link of `route` is still live.
    pub fn is_route_live(&self, route: &RoutePath) -> bool {
        route.hops.iter().all(|&r| self.is_router_live(r)) && route.links.iter().all(|&l| self.is_link_live(l))
    }

    /// Largest shortest-path delay between any two live routers.
    pub fn max_shortest_delay_ms(&self) -> f64 {
        let mut max = 0.0f64;
        for r in self.routers().filter(|&r| self.is_router_live(r)) {
            let tree = self.source_tree(r);
            for d in tree.dist.iter().filter(|d| d.is_finite()) {
                max = max.max(*d);
            }
        }
        max
    }

    /// Routers reachable from `src` over live elements, in BFS order.
    pub fn reachable_from(&self, src: RouterId) -> BTreeSet<RouterId> {
        let mut seen = BTreeSet::new();
        if !self.is_router_live(src) {
            return seen;
        }
        let mut queue = std::collections::VecDeque::from([src]);
        seen.insert(src);
        while let Some(r) = queue.pop_front() {
            for &(n, l) in &self.adjacency[r.0 as usize] {
                if self.is_link_live(l) && seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    pub fn is_connected(&self) -> bool {
        let live = self.routers().filter(|&r| self.is_router_live(r)).count();
        match self.routers().find(|&r| self.is_router_live(r)) {
            Some(first) => self.reachable_from(first).len() == live,
            None => true,
        }
    }

    fn source_tree(&self, src: RouterId) -> Arc<SourceTree> {
        let mut cache = self.cache.lock().expect("route cache poisoned");
        cache.entry(src).or_insert_with(|| Arc::new(self.dijkstra(src))).clone()
    }

    /// Delay-weighted Dijkstra. Among equal-delay paths the lexicographically
    /// smallest hop sequence wins.
    fn dijkstra(&self, src: RouterId) -> SourceTree {
        let n = self.router_count;
        let mut dist = vec![f64::INFINITY; n];
        let mut pred: Vec<Option<(RouterId, LinkId)>> = vec![None; n];
        let mut done = vec![false; n];
        if !self.is_router_live(src) {
            return SourceTree { dist, pred };
        }
        dist[src.0 as usize] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((Dist(0.0), src)));
        while let Some(Reverse((Dist(d), u))) = heap.pop() {
            let ui = u.0 as usize;
            if done[ui] {
                continue;
            }
            done[ui] = true;
            for &(v, l) in &self.adjacency[ui] {
                if !self.is_link_live(l) || done[v.0 as usize] {
                    continue;
                }
                let vi = v.0 as usize;
                let nd = d + self.links[l.0 as usize].delay_ms;
                let better = if nd < dist[vi] {
                    true
                } else if nd == dist[vi] {
                    let via_u = path_to(&pred, src, u);
                    let current = path_to(&pred, src, pred[vi].expect("reached node has pred").0);
                    via_u < current
                } else {
                    false
                };
                if better {
                    dist[vi] = nd;
                    pred[vi] = Some((u, l));
                    heap.push(Reverse((Dist(nd), v)));
                }
            }
        }
        SourceTree { dist, pred }
    }

    /// Minimum-delay route over live elements.
    ///
    /// Routes are undirected: the route from the higher-numbered endpoint is
    /// the reverse of the route from the lower one, so delays are exactly
    /// symmetric.
    pub fn shortest_route(&self, src: RouterId, dst: RouterId) -> Option<RoutePath> {
        if !self.is_router_live(src) || !self.is_router_live(dst) {
            return None;
        }
        if src == dst {
            return Some(RoutePath {
                hops: vec![src],
                links: Vec::new(),
                total_delay_ms: 0.0,
                bottleneck_mbps: UNBOUNDED_MBPS,
            });
        }
        if src > dst {
            return self.shortest_route(dst, src).map(|r| r.reversed());
        }
        let tree = self.source_tree(src);
        if !tree.dist[dst.0 as usize].is_finite() {
            return None;
        }
        let mut hops = vec![dst];
        let mut links = Vec::new();
        let mut cur = dst;
        while let Some((p, l)) = tree.pred[cur.0 as usize] {
            links.push(l);
            hops.push(p);
            cur = p;
        }
        hops.reverse();
        links.reverse();
        let mut total = 0.0;
        let mut bottleneck = UNBOUNDED_MBPS;
        for &l in &links {
            let link = &self.links[l.0 as usize];
            total += link.delay_ms;
            bottleneck = bottleneck.min(link.bandwidth_mbps);
        }
        Some(RoutePath { hops, links, total_delay_ms: total, bottleneck_mbps: bottleneck })
    }

    /// Shortest one-way delay, or `None` when unreachable.
    pub fn delay_ms(&self, a: RouterId, b: RouterId) -> Option<f64> {
        self.shortest_route(a, b).map(|r| r.total_delay_ms)
    }

    /// Noise-free round-trip time: twice the shortest one-way delay.
    pub fn rtt(&self, a: RouterId, b: RouterId) -> Result<f64, Unmeasurable> {
        self.delay_ms(a, b).map(|d| 2.0 * d).ok_or(Unmeasurable { from: a, to: b })
    }

    /// Marks an element failed. Failing an already failed element is a no-op.
    pub fn fail_element(&mut self, element: Element) -> Result<(), UnderlayError> {
        let changed = match element {
            Element::Link(id) => {
                if self.link(id).is_none() {
                    return Err(UnderlayError::UnknownElement(element));
                }
                self.failed_links.insert(id)
            }
            Element::Router(r) => {
                if !self.contains_router(r) {
                    return Err(UnderlayError::UnknownElement(element));
                }
                self.failed_routers.insert(r)
            }
        };
        if changed {
            self.cache.lock().expect("route cache poisoned").clear();
        }
        Ok(())
    }

    pub fn to_doc(&self) -> TopologyDoc {
        let mut failed: Vec<Element> = self.failed_links.iter().map(|&l| Element::Link(l)).collect();
        failed.extend(self.failed_routers.iter().map(|&r| Element::Router(r)));
        TopologyDoc {
            routers: self.router_count,
            links: self.links.iter().map(|l| (l.a.0, l.b.0, l.delay_ms, l.bandwidth_mbps)).collect(),
            failed,
        }
    }

    pub fn from_doc(doc: &TopologyDoc) -> Result<Self, UnderlayError> {
        let mut topo = PhysicalTopology::from_links(doc.routers, &doc.links)?;
        for &e in &doc.failed {
            topo.fail_element(e)?;
        }
        Ok(topo)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("topology serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, UnderlayError> {
        let doc: TopologyDoc = serde_json::from_str(s).map_err(|e| UnderlayError::Json(e.to_string()))?;
        PhysicalTopology::from_doc(&doc)
    }
}

/// Serialized form: `{"routers": N, "links": [[u, v, delay_ms, bandwidth_mbps], ...], "failed": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyDoc {
    pub routers: usize,
    pub links: Vec<(u32, u32, f64, f64)>,
    #[serde(default)]
    pub failed: Vec<Element>,
}

/// Seeded RTT measurement with optional multiplicative noise.
///
/// A measured RTT is `2 * delay * (1 + noise_factor * u)` with `u` uniform in
/// `[-1, 1]`. With `noise_factor == 0` no random draws are made.
#[derive(Debug, Clone)]
pub struct RttProbe {
    noise_factor: f64,
    rng: ChaCha8Rng,
}

impl RttProbe {
    pub fn new(noise_factor: f64, rng: ChaCha8Rng) -> Self {
        RttProbe { noise_factor: noise_factor.max(0.0), rng }
    }

    pub fn noiseless() -> Self {
        use rand::SeedableRng;
        RttProbe::new(0.0, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn measure(&mut self, topo: &PhysicalTopology, a: RouterId, b: RouterId) -> Result<f64, Unmeasurable> {
        let base = topo.rtt(a, b)?;
        if self.noise_factor == 0.0 {
            return Ok(base);
        }
        let u: f64 = self.rng.gen_range(-1.0..=1.0);
        Ok(base * (1.0 + self.noise_factor * u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dist(f64);

impl Eq for Dist {}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn insert_sorted(v: &mut Vec<(RouterId, LinkId)>, item: (RouterId, LinkId)) {
    let pos = v.partition_point(|x| x.0 < item.0);
    v.insert(pos, item);
}

fn path_to(pred: &[Option<(RouterId, LinkId)>], src: RouterId, node: RouterId) -> Vec<RouterId> {
    let mut path = vec![node];
    let mut cur = node;
    while cur != src {
        match pred[cur.0 as usize] {
            Some((p, _)) => {
                path.push(p);
                cur = p;
            }
            None => break,
        }
    }
    path.reverse();
    path
}
