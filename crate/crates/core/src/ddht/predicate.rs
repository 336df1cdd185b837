use serde::{Deserialize, Serialize};

use super::{DdhtEntry, DdhtError, DdhtEvent, DdhtEventKind, ZoneSpace};
use crate::coords::{euclid, MilestoneVector};
use crate::servicetree::PeerId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredicateKind {
    CloserParentAvailable,
}

/// A peer's standing request to hear about better parents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRegistration {
    pub subscriber: PeerId,
    pub kind: PredicateKind,
    /// Required fractional improvement, in (0, 1).
    pub threshold: f64,
    pub reference_delay_ms: f64,
    pub reference_vector: MilestoneVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Notification {
    pub subscriber: PeerId,
    pub candidate: DdhtEntry,
    /// Screening estimate: candidate path delay plus half the milestone distance.
    pub estimated_delay_ms: f64,
}

impl ZoneSpace {
    /// Stores `reg` with the zone of the subscriber's reference vector,
    /// replacing any earlier registration by the same subscriber.
    pub fn register_predicate(&mut self, mut reg: PredicateRegistration) -> Result<(), DdhtError> {
        if !(reg.threshold > 0.0 && reg.threshold < 1.0) {
            return Err(DdhtError::InvalidThreshold(reg.threshold));
        }
        match self.entry(reg.subscriber) {
            Some(e) if e.is_on_tree() => {}
            _ => return Err(DdhtError::NotOnTree(reg.subscriber)),
        }
        self.check_dimension(&reg.reference_vector)?;
        reg.reference_vector = MilestoneVector(self.clamp(&reg.reference_vector.0).0);
        if let Some(old) = self.reg_locator.remove(&reg.subscriber) {
            self.zones[old].registrations.remove(&reg.subscriber);
        }
        let z = self.locate(&reg.reference_vector.0);
        self.reg_locator.insert(reg.subscriber, z);
        self.zones[z].registrations.insert(reg.subscriber, reg);
        Ok(())
    }

    pub fn registration(&self, subscriber: PeerId) -> Option<&PredicateRegistration> {
        self.reg_locator.get(&subscriber).and_then(|&z| self.zones[z].registrations.get(&subscriber))
    }

    pub fn registration_count(&self) -> usize {
        self.reg_locator.len()
    }

    pub fn unregister_predicate(&mut self, subscriber: PeerId) {
        if let Some(z) = self.reg_locator.remove(&subscriber) {
            self.zones[z].registrations.remove(&subscriber);
        }
    }

    /// Notifications raised by one store change, ordered by subscriber.
    ///
    /// A subscriber is notified when the changed entry is an on-tree direct
    /// provider of the subscriber's spec with spare capacity and
    /// `path_delay + distance / 2 < (1 - threshold) * reference_delay`.
    pub fn evaluate_predicates(&self, event: &DdhtEvent) -> Vec<Notification> {
        if event.kind == DdhtEventKind::Removed {
            return Vec::new();
        }
        let cand = &event.entry;
        let Some(pm) = &cand.path_metric else { return Vec::new() };
        if !cand.has_spare_capacity() {
            return Vec::new();
        }
        let mut out = Vec::new();
        for (&subscriber, &z) in &self.reg_locator {
            if subscriber == cand.peer_id {
                continue;
            }
            let reg = &self.zones[z].registrations[&subscriber];
            let Some(spec) = self.entry(subscriber).and_then(|e| e.path_metric.as_ref()).map(|m| &m.produced) else {
                continue;
            };
            if &pm.produced != spec {
                continue;
            }
            let estimate = pm.delay_ms + 0.5 * euclid(&reg.reference_vector.0, &cand.milestone_vector.0);
            if estimate < (1.0 - reg.threshold) * reg.reference_delay_ms {
                out.push(Notification { subscriber, candidate: cand.clone(), estimated_delay_ms: estimate });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::servicetree::ServiceSpec;

    fn reg(peer: u32, v: &[f64], delay: f64, threshold: f64) -> PredicateRegistration {
        PredicateRegistration {
            subscriber: PeerId(peer),
            kind: PredicateKind::CloserParentAvailable,
            threshold,
            reference_delay_ms: delay,
            reference_vector: MilestoneVector(v.to_vec()),
        }
    }

    #[test]
    fn off_tree_subscriber_is_rejected() {
        let mut s = space(2, 1000.0);
        s.insert_entry(entry(1, &[0.0, 0.0])).unwrap();
        assert_eq!(s.register_predicate(reg(1, &[0.0, 0.0], 100.0, 0.2)), Err(DdhtError::NotOnTree(PeerId(1))));
        assert_eq!(s.register_predicate(reg(2, &[0.0, 0.0], 100.0, 0.2)), Err(DdhtError::NotOnTree(PeerId(2))));
    }

    #[test]
    fn threshold_must_be_fractional() {
        let mut s = space(2, 1000.0);
        s.insert_entry(on_tree(1, &[0.0, 0.0], 100.0, ServiceSpec::origin())).unwrap();
        assert_eq!(s.register_predicate(reg(1, &[0.0, 0.0], 100.0, 0.0)), Err(DdhtError::InvalidThreshold(0.0)));
        assert!(s.register_predicate(reg(1, &[0.0, 0.0], 100.0, 1.0)).is_err());
    }

    #[test]
    fn second_registration_replaces_first() {
        let mut s = space(2, 1000.0);
        s.insert_entry(on_tree(1, &[0.0, 0.0], 100.0, ServiceSpec::origin())).unwrap();
        s.register_predicate(reg(1, &[0.0, 0.0], 100.0, 0.2)).unwrap();
        s.register_predicate(reg(1, &[0.0, 0.0], 60.0, 0.2)).unwrap();
        assert_eq!(s.registration_count(), 1);
        assert_eq!(s.registration(PeerId(1)).unwrap().reference_delay_ms, 60.0);
    }

    #[test]
    fn registration_survives_split() {
        let mut s = space(2, 1000.0);
        s.insert_entry(on_tree(100, &[900.0, 10.0], 100.0, ServiceSpec::origin())).unwrap();
        s.register_predicate(reg(100, &[900.0, 10.0], 100.0, 0.2)).unwrap();
        for i in 0..9 {
            s.insert_entry(entry(i, &[10.0 * i as f64, 10.0])).unwrap();
        }
        assert!(s.zone_count() >= 2);
        let r = s.registration(PeerId(100)).unwrap();
        assert_eq!(r.reference_delay_ms, 100.0);
        let z = s.reg_locator[&PeerId(100)];
        assert!(s.zones()[z].contains(&[900.0, 10.0]));
    }

    #[test]
    fn no_registrations_no_notifications() {
        let mut s = space(2, 1000.0);
        let ev = s.insert_entry(on_tree(1, &[0.0, 0.0], 10.0, ServiceSpec::origin())).unwrap();
        assert!(s.evaluate_predicates(&ev).is_empty());
    }

    fn predicate_case(candidate_delay: f64) -> Vec<Notification> {
        // subscriber at (0,0) with current delay 100; candidate 40 ms away in
        // milestone space, so the estimate is candidate_delay + 20.
        let mut s = space(2, 1000.0);
        s.insert_entry(on_tree(1, &[0.0, 0.0], 100.0, ServiceSpec::origin())).unwrap();
        s.register_predicate(reg(1, &[0.0, 0.0], 100.0, 0.2)).unwrap();
        let ev = s.insert_entry(on_tree(2, &[24.0, 32.0], candidate_delay, ServiceSpec::origin())).unwrap();
        s.evaluate_predicates(&ev)
    }

    #[test]
    fn estimate_under_bound_notifies() {
        // 20 + 20 = 40 < 0.8 * 100
        let n = predicate_case(20.0);
        assert_eq!(n.len(), 1);
        assert_eq!(n[0].subscriber, PeerId(1));
        assert_eq!(n[0].estimated_delay_ms, 40.0);
    }

    #[test]
    fn estimate_over_bound_is_silent() {
        // 70 + 20 = 90 >= 80
        assert!(predicate_case(70.0).is_empty());
        // exactly 80 is not strictly better
        assert!(predicate_case(60.0).is_empty());
    }

    #[test]
    fn wrong_spec_or_removed_is_silent() {
        let mut s = space(2, 1000.0);
        s.insert_entry(on_tree(1, &[0.0, 0.0], 100.0, ServiceSpec::origin())).unwrap();
        s.register_predicate(reg(1, &[0.0, 0.0], 100.0, 0.2)).unwrap();
        let ev = s.insert_entry(on_tree(2, &[0.0, 0.0], 1.0, ServiceSpec::new([1]))).unwrap();
        assert!(s.evaluate_predicates(&ev).is_empty());
        let ev = s.insert_entry(on_tree(3, &[0.0, 0.0], 1.0, ServiceSpec::origin())).unwrap();
        assert_eq!(s.evaluate_predicates(&ev).len(), 1);
        let removed = s.remove_entry(PeerId(3)).unwrap();
        assert!(s.evaluate_predicates(&removed).is_empty());
    }
}
