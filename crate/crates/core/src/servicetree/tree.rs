use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{PeerId, ServiceSpec, TransformId};
use crate::underlay::{RoutePath, RouterId, UNBOUNDED_MBPS};

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("{0} is not a tree member")]
    NotMember(PeerId),
    #[error("{0} is already attached")]
    AlreadyAttached(PeerId),
    #[error("attaching {child} under {parent} would create a cycle")]
    Cycle { child: PeerId, parent: PeerId },
    #[error("tree integrity violated: {0}")]
    Integrity(String),
}

/// The rooted overlay tree.
///
/// Members are the root, every attached peer, and the members of detached
/// subtrees whose top node lost its parent and is waiting to rejoin. A member
/// is *attached* when its parent chain reaches the root.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticastTree {
    root: PeerId,
    parent: BTreeMap<PeerId, PeerId>,
    children: BTreeMap<PeerId, BTreeSet<PeerId>>,
    /// Underlay route of the edge into each child.
    edge_routes: BTreeMap<PeerId, RoutePath>,
    applied: BTreeMap<PeerId, Vec<TransformId>>,
    produced: BTreeMap<PeerId, ServiceSpec>,
}

impl MulticastTree {
    pub fn new(root: PeerId) -> Self {
        MulticastTree {
            root,
            parent: BTreeMap::new(),
            children: BTreeMap::from([(root, BTreeSet::new())]),
            edge_routes: BTreeMap::new(),
            applied: BTreeMap::new(),
            produced: BTreeMap::from([(root, ServiceSpec::origin())]),
        }
    }

    pub fn root(&self) -> PeerId {
        self.root
    }

    pub fn is_member(&self, p: PeerId) -> bool {
        self.produced.contains_key(&p)
    }

    pub fn members(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.produced.keys().copied()
    }

    pub fn parent_of(&self, p: PeerId) -> Option<PeerId> {
        self.parent.get(&p).copied()
    }

    pub fn children_of(&self, p: PeerId) -> impl Iterator<Item = PeerId> + '_ {
        self.children.get(&p).into_iter().flatten().copied()
    }

    pub fn child_count(&self, p: PeerId) -> usize {
        self.children.get(&p).map_or(0, BTreeSet::len)
    }

    pub fn applied(&self, p: PeerId) -> &[TransformId] {
        self.applied.get(&p).map_or(&[], Vec::as_slice)
    }

    pub fn produced(&self, p: PeerId) -> Option<&ServiceSpec> {
        self.produced.get(&p)
    }

    pub fn edge_route(&self, child: PeerId) -> Option<&RoutePath> {
        self.edge_routes.get(&child)
    }

    /// `[p, parent(p), ..., root]`, or `None` if `p` is not attached.
    pub fn path_to_root(&self, p: PeerId) -> Option<Vec<PeerId>> {
        if !self.is_member(p) {
            return None;
        }
        let mut path = vec![p];
        let mut cur = p;
        while cur != self.root {
            cur = *self.parent.get(&cur)?;
            if path.len() > self.produced.len() {
                return None;
            }
            path.push(cur);
        }
        Some(path)
    }

    pub fn is_attached(&self, p: PeerId) -> bool {
        self.path_to_root(p).is_some()
    }

    /// Depth below the root of an attached peer.
    pub fn depth(&self, p: PeerId) -> Option<usize> {
        self.path_to_root(p).map(|v| v.len() - 1)
    }

    /// True when `ancestor` lies on `p`'s parent chain (or equals `p`).
    pub fn is_in_subtree(&self, p: PeerId, ancestor: PeerId) -> bool {
        let mut cur = p;
        let mut steps = 0;
        loop {
            if cur == ancestor {
                return true;
            }
            match self.parent.get(&cur) {
                Some(&next) => cur = next,
                None => return false,
            }
            steps += 1;
            if steps > self.produced.len() {
                return false;
            }
        }
    }

    /// Strict descendants of `p`, breadth-first with children in id order.
    pub fn descendants(&self, p: PeerId) -> Vec<PeerId> {
        let mut out = Vec::new();
        let mut queue: VecDeque<PeerId> = self.children_of(p).collect();
        while let Some(c) = queue.pop_front() {
            out.push(c);
            queue.extend(self.children_of(c));
        }
        out
    }

    /// Top nodes of detached subtrees.
    pub fn detached_roots(&self) -> Vec<PeerId> {
        self.produced.keys().copied().filter(|&p| p != self.root && !self.parent.contains_key(&p)).collect()
    }

    /// Attached members in id order.
    pub fn attached_members(&self) -> Vec<PeerId> {
        self.members().filter(|&p| self.is_attached(p)).collect()
    }

    /// Edges `(parent, child, route)` whose child is attached, by child id.
    pub fn attached_edges(&self) -> Vec<(PeerId, PeerId, &RoutePath)> {
        self.parent.iter().filter(|(&c, _)| self.is_attached(c)).map(|(&c, &p)| (p, c, &self.edge_routes[&c])).collect()
    }

    /// Hangs `child` (new, or the top of a detached subtree) under `parent`.
    pub fn attach(
        &mut self,
        child: PeerId,
        parent: PeerId,
        route: RoutePath,
        applied: Vec<TransformId>,
    ) -> Result<(), TreeError> {
        if !self.is_member(parent) {
            return Err(TreeError::NotMember(parent));
        }
        if child == self.root || self.parent.contains_key(&child) {
            return Err(TreeError::AlreadyAttached(child));
        }
        if self.is_in_subtree(parent, child) {
            return Err(TreeError::Cycle { child, parent });
        }
        self.parent.insert(child, parent);
        self.children.entry(parent).or_default().insert(child);
        self.children.entry(child).or_default();
        self.edge_routes.insert(child, route);
        self.applied.insert(child, applied);
        self.recompute_produced(child);
        Ok(())
    }

    /// Cuts the edge into `child`, keeping its subtree. Returns the former parent.
    pub fn detach(&mut self, child: PeerId) -> Option<PeerId> {
        let parent = self.parent.remove(&child)?;
        if let Some(set) = self.children.get_mut(&parent) {
            set.remove(&child);
        }
        self.edge_routes.remove(&child);
        Some(parent)
    }

    /// Removes `p` entirely. Its children become detached subtree tops and
    /// are returned in ascending id order.
    pub fn remove(&mut self, p: PeerId) -> Result<Vec<PeerId>, TreeError> {
        if p == self.root {
            return Err(TreeError::Integrity("the root cannot leave".into()));
        }
        if !self.is_member(p) {
            return Err(TreeError::NotMember(p));
        }
        self.detach(p);
        let orphans: Vec<PeerId> = self.children_of(p).collect();
        for &c in &orphans {
            self.parent.remove(&c);
            self.edge_routes.remove(&c);
        }
        self.children.remove(&p);
        self.applied.remove(&p);
        self.produced.remove(&p);
        Ok(orphans)
    }

    pub fn set_route(&mut self, child: PeerId, route: RoutePath) {
        if self.parent.contains_key(&child) {
            self.edge_routes.insert(child, route);
        }
    }

    /// Drops transforms a detached subtree top was applying. Its produced
    /// spec is kept so the subtree below stays consistent.
    pub fn clear_applied(&mut self, p: PeerId) {
        if self.is_member(p) {
            self.applied.insert(p, Vec::new());
        }
    }

    fn recompute_produced(&mut self, from: PeerId) {
        let mut queue = VecDeque::from([from]);
        while let Some(c) = queue.pop_front() {
            if let Some(&p) = self.parent.get(&c) {
                let spec = self.produced[&p].then(self.applied(c));
                self.produced.insert(c, spec);
            }
            queue.extend(self.children_of(c));
        }
    }

    /// Sum of stored edge-route delays root-to-`p` (summed root first) and the
    /// bottleneck, ignoring liveness. `None` if `p` is not attached.
    pub fn annotated_path(&self, p: PeerId) -> Option<(f64, f64)> {
        let path = self.path_to_root(p)?;
        let mut delay = 0.0;
        let mut bw = UNBOUNDED_MBPS;
        for c in path.iter().rev().skip(1) {
            let r = &self.edge_routes[c];
            delay += r.total_delay_ms;
            bw = bw.min(r.bottleneck_mbps);
        }
        Some((delay, bw))
    }

    /// Structural checks: consistent parent/child maps, no cycles, every
    /// member either attached or inside a detached subtree, produced specs
    /// composed along edges.
    pub fn check_integrity(&self) -> Result<(), TreeError> {
        let bad = |m: String| Err(TreeError::Integrity(m));
        if self.parent.contains_key(&self.root) {
            return bad(format!("root {} has a parent", self.root));
        }
        if self.produced.get(&self.root) != Some(&ServiceSpec::origin()) {
            return bad("root does not produce the origin stream".into());
        }
        for (&c, &p) in &self.parent {
            if !self.is_member(c) || !self.is_member(p) {
                return bad(format!("edge {p}->{c} references a non-member"));
            }
            if !self.children.get(&p).is_some_and(|s| s.contains(&c)) {
                return bad(format!("edge {p}->{c} missing from child set"));
            }
            if !self.edge_routes.contains_key(&c) {
                return bad(format!("edge {p}->{c} has no route"));
            }
            let expect = self.produced[&p].then(self.applied(c));
            if self.produced[&c] != expect {
                return bad(format!("{c} produces {} but parent chain yields {expect}", self.produced[&c]));
            }
        }
        for (&p, kids) in &self.children {
            for &c in kids {
                if self.parent.get(&c) != Some(&p) {
                    return bad(format!("child set of {p} lists {c} without matching parent"));
                }
            }
        }
        // every member's chain must end at the root or at a detached top
        let tops: BTreeSet<PeerId> = self.detached_roots().into_iter().collect();
        for p in self.members() {
            let mut cur = p;
            let mut steps = 0;
            while let Some(&next) = self.parent.get(&cur) {
                cur = next;
                steps += 1;
                if steps > self.produced.len() {
                    return bad(format!("cycle through {p}"));
                }
            }
            if cur != self.root && !tops.contains(&cur) {
                return bad(format!("{p} hangs off unknown node {cur}"));
            }
        }
        Ok(())
    }

    pub fn to_doc(&self, router_of: impl Fn(PeerId) -> Option<RouterId>) -> TreeDoc {
        let edges = self.attached_edges();
        TreeDoc {
            root: self.root,
            edges: edges.iter().map(|(p, c, r)| (*p, *c, r.total_delay_ms, r.bottleneck_mbps)).collect(),
            specs: self.members().filter(|&p| self.is_attached(p)).map(|p| (p, self.produced[&p].clone())).collect(),
            routes: edges.iter().map(|(_, c, r)| (*c, r.hops.clone())).collect(),
            routers: self
                .members()
                .filter(|&p| self.is_attached(p))
                .filter_map(|p| router_of(p).map(|r| (p, r)))
                .collect(),
        }
    }
}

/// Tree dump: `{"root", "edges": [[parent, child, delay_ms, bottleneck_mbps]],
/// "specs": {peer: chain}}` plus the hop list of every edge route and the
/// router hosting every attached peer, so metrics can be recomputed offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDoc {
    pub root: PeerId,
    pub edges: Vec<(PeerId, PeerId, f64, f64)>,
    pub specs: BTreeMap<PeerId, ServiceSpec>,
    pub routes: BTreeMap<PeerId, Vec<RouterId>>,
    pub routers: BTreeMap<PeerId, RouterId>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::underlay::LinkId;

    fn route(delay: f64) -> RoutePath {
        RoutePath {
            hops: vec![RouterId(0), RouterId(1)],
            links: vec![LinkId(0)],
            total_delay_ms: delay,
            bottleneck_mbps: 10.0,
        }
    }

    fn p(i: u32) -> PeerId {
        PeerId(i)
    }

    fn sample() -> MulticastTree {
        let mut t = MulticastTree::new(p(0));
        t.attach(p(1), p(0), route(10.0), vec![]).unwrap();
        t.attach(p(2), p(1), route(15.0), vec![TransformId(4)]).unwrap();
        t.attach(p(3), p(2), route(1.0), vec![]).unwrap();
        t
    }

    #[test]
    fn chain_delay_and_specs() {
        let t = sample();
        assert_eq!(t.annotated_path(p(2)), Some((25.0, 10.0)));
        assert_eq!(t.produced(p(3)), Some(&ServiceSpec::new([4])));
        assert_eq!(t.depth(p(3)), Some(3));
        t.check_integrity().unwrap();
    }

    #[test]
    fn attach_refuses_cycles() {
        let mut t = sample();
        t.detach(p(1));
        assert_eq!(t.attach(p(1), p(3), route(1.0), vec![]), Err(TreeError::Cycle { child: p(1), parent: p(3) }));
        assert_eq!(t.attach(p(2), p(0), route(1.0), vec![]), Err(TreeError::AlreadyAttached(p(2))));
    }

    #[test]
    fn detach_keeps_subtree() {
        let mut t = sample();
        assert_eq!(t.detach(p(1)), Some(p(0)));
        assert!(!t.is_attached(p(3)));
        assert_eq!(t.detached_roots(), vec![p(1)]);
        t.check_integrity().unwrap();
        t.attach(p(1), p(0), route(5.0), vec![]).unwrap();
        assert!(t.is_attached(p(3)));
    }

    #[test]
    fn remove_orphans_children() {
        let mut t = sample();
        t.attach(p(4), p(1), route(2.0), vec![]).unwrap();
        assert_eq!(t.remove(p(1)).unwrap(), vec![p(2), p(4)]);
        assert_eq!(t.detached_roots(), vec![p(2), p(4)]);
        assert!(t.remove(p(0)).is_err());
        assert_eq!(t.remove(p(9)), Err(TreeError::NotMember(p(9))));
        t.check_integrity().unwrap();
    }

    #[test]
    fn leaf_removal_has_no_orphans() {
        let mut t = sample();
        assert!(t.remove(p(3)).unwrap().is_empty());
    }

    #[test]
    fn descendants_are_breadth_first() {
        let mut t = sample();
        t.attach(p(5), p(1), route(1.0), vec![]).unwrap();
        assert_eq!(t.descendants(p(1)), vec![p(2), p(5), p(3)]);
        assert!(t.is_in_subtree(p(3), p(1)));
        assert!(!t.is_in_subtree(p(1), p(3)));
    }
}
