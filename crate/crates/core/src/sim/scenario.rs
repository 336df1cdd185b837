use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::RepairPolicy;
use crate::servicetree::{ServiceSpec, TransformId};
use crate::underlay::{Element, TopologyParams};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub routers: usize,
    pub params: TopologyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSpec {
    pub router: u32,
    pub capacity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecWeight {
    pub spec: ServiceSpec,
    pub weight: f64,
}

/// Receiver population and churn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    /// Total number of receivers that arrive during the run.
    pub count: usize,
    /// Poisson arrival rate, per simulated second.
    pub arrival_rate_per_s: f64,
    /// Mean of the exponential session length, seconds.
    pub mean_session_s: f64,
    /// Uniform range of the delay bound.
    pub max_delay_ms: (f64, f64),
    /// Uniform range of the bandwidth floor.
    pub min_bandwidth_mbps: (f64, f64),
    /// Inclusive range of child capacity.
    pub capacity: (u32, u32),
    pub spec_mix: Vec<SpecWeight>,
    /// Probability that a receiver can also run transforms.
    pub host_probability: f64,
    pub host_slots: u32,
}

/// Transform hosts that take no stream of their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelperSpec {
    pub count: usize,
    pub transforms: Vec<TransformId>,
    pub slots: u32,
    pub capacity: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedFailure {
    pub time_ms: f64,
    pub element: Element,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    #[serde(default)]
    pub scripted: Vec<ScriptedFailure>,
    /// Distinct links failed at uniform times in `window_ms`, drawn from the
    /// topology stream.
    #[serde(default)]
    pub random_links: usize,
    pub window_ms: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Monitoring {
    /// Peers notice a violation the moment the underlay changes.
    Lazy,
    /// Peers notice at the next poll tick.
    Poll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub k: usize,
    pub repair: RepairPolicy,
    pub split_threshold: usize,
    pub milestones: usize,
    /// Predicate-driven parent switching.
    pub maintenance: bool,
    pub monitoring: Monitoring,
    pub poll_interval_ms: f64,
    pub retry_backoff_ms: f64,
    /// Multiplicative noise on milestone RTT probes.
    pub probe_noise: f64,
    pub infra_nodes: u32,
    /// Interval between stress/stretch samples.
    pub sample_interval_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub scenario_id: String,
    pub seed: u64,
    pub topology: TopologySpec,
    pub server: ServerSpec,
    pub peers: PopulationSpec,
    pub helpers: HelperSpec,
    pub failures: FailureSpec,
    pub policy: PolicySpec,
    pub duration_ms: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            scenario_id: "default".into(),
            seed: 1,
            topology: TopologySpec { routers: 100, params: TopologyParams::waxman() },
            server: ServerSpec { router: 0, capacity: 16 },
            peers: PopulationSpec {
                count: 200,
                arrival_rate_per_s: 1.0,
                mean_session_s: 300.0,
                max_delay_ms: (150.0, 400.0),
                min_bandwidth_mbps: (1.0, 8.0),
                capacity: (2, 5),
                spec_mix: vec![
                    SpecWeight { spec: ServiceSpec::origin(), weight: 0.5 },
                    SpecWeight { spec: ServiceSpec::new([1]), weight: 0.25 },
                    SpecWeight { spec: ServiceSpec::new([2]), weight: 0.15 },
                    SpecWeight { spec: ServiceSpec::new([1, 2]), weight: 0.1 },
                ],
                host_probability: 0.2,
                host_slots: 1,
            },
            helpers: HelperSpec { count: 10, transforms: vec![TransformId(1), TransformId(2)], slots: 2, capacity: 4 },
            failures: FailureSpec { scripted: Vec::new(), random_links: 20, window_ms: (100_000.0, 500_000.0) },
            policy: PolicySpec {
                k: 5,
                repair: RepairPolicy::default(),
                split_threshold: 8,
                milestones: 4,
                maintenance: true,
                monitoring: Monitoring::Poll,
                poll_interval_ms: 1000.0,
                retry_backoff_ms: 5000.0,
                probe_noise: 0.0,
                infra_nodes: 8,
                sample_interval_ms: 10_000.0,
            },
            duration_ms: 1_200_000.0,
        }
    }
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

fn range_ok(r: (f64, f64)) -> bool {
    r.0.is_finite() && r.1.is_finite() && r.0 <= r.1
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        self.topology.params.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.topology.routers < 2 {
            return bad("topology needs at least 2 routers");
        }
        if self.server.router as usize >= self.topology.routers {
            return bad("server router out of range");
        }
        let p = &self.peers;
        if !positive(p.arrival_rate_per_s) || !positive(p.mean_session_s) {
            return bad("arrival rate and mean session must be positive");
        }
        if !range_ok(p.max_delay_ms) || p.max_delay_ms.0 <= 0.0 {
            return bad("max_delay_ms range must be positive and ordered");
        }
        if !range_ok(p.min_bandwidth_mbps) || p.min_bandwidth_mbps.0 <= 0.0 {
            return bad("min_bandwidth_mbps range must be positive and ordered");
        }
        if p.capacity.0 > p.capacity.1 {
            return bad("capacity range must be ordered");
        }
        if p.spec_mix.is_empty() || p.spec_mix.iter().any(|w| !(w.weight >= 0.0 && w.weight.is_finite())) {
            return bad("spec_mix needs non-negative weights");
        }
        if p.spec_mix.iter().map(|w| w.weight).sum::<f64>() <= 0.0 {
            return bad("spec_mix weights sum to zero");
        }
        if !(0.0..=1.0).contains(&p.host_probability) {
            return bad("host_probability must lie in [0, 1]");
        }
        let f = &self.failures;
        if !range_ok(f.window_ms) || f.window_ms.0 < 0.0 {
            return bad("failure window must be ordered and non-negative");
        }
        for s in &f.scripted {
            if !(s.time_ms >= 0.0 && s.time_ms.is_finite()) {
                return bad("scripted failure time must be non-negative");
            }
            let in_range = match s.element {
                Element::Link(_) => true,
                Element::Router(r) => (r.0 as usize) < self.topology.routers,
            };
            if !in_range {
                return bad("scripted failure router out of range");
            }
        }
        let pol = &self.policy;
        if pol.k == 0 {
            return bad("k must be at least 1");
        }
        pol.repair.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if pol.split_threshold == 0 {
            return bad("split_threshold must be at least 1");
        }
        if pol.milestones == 0 || pol.milestones > self.topology.routers {
            return bad("milestones must lie in 1..=routers");
        }
        if !positive(pol.poll_interval_ms) || !positive(pol.retry_backoff_ms) || !positive(pol.sample_interval_ms) {
            return bad("poll, backoff and sample intervals must be positive");
        }
        if !(pol.probe_noise >= 0.0 && pol.probe_noise < 1.0) {
            return bad("probe_noise must lie in [0, 1)");
        }
        if pol.infra_nodes == 0 {
            return bad("at least one infrastructure node is needed");
        }
        if !positive(self.duration_ms) {
            return bad("duration_ms must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let sc = Scenario::default();
        sc.validate().unwrap();
        assert_eq!(Scenario::from_json(&sc.to_json()).unwrap(), sc);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&Scenario::default().to_json()).unwrap();
        v["policy"]["kk"] = serde_json::json!(3);
        assert!(matches!(Scenario::from_json(&v.to_string()), Err(ScenarioError::Json(_))));
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut sc = Scenario::default();
        sc.duration_ms = 0.0;
        assert!(sc.validate().is_err());
        let mut sc = Scenario::default();
        sc.policy.repair.switch_hysteresis = 0.0;
        assert!(sc.validate().is_err());
        let mut sc = Scenario::default();
        sc.peers.arrival_rate_per_s = -1.0;
        assert!(sc.validate().is_err());
    }
}
