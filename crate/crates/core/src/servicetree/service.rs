use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeerId(pub u32);

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Symbolic media transformation (transcode, rescale, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransformId(pub u16);

/// The stream a peer asks for: transforms applied, in order, to the origin
/// stream. The empty chain is the origin stream itself.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServiceSpec {
    pub chain: Vec<TransformId>,
}

impl ServiceSpec {
    pub fn origin() -> Self {
        ServiceSpec { chain: Vec::new() }
    }

    pub fn new(chain: impl IntoIterator<Item = u16>) -> Self {
        ServiceSpec { chain: chain.into_iter().map(TransformId).collect() }
    }

    pub fn is_origin(&self) -> bool {
        self.chain.is_empty()
    }

    /// True when `self` can be extended into `other` by appending transforms.
    pub fn is_prefix_of(&self, other: &ServiceSpec) -> bool {
        other.chain.starts_with(&self.chain)
    }

    pub fn is_proper_prefix_of(&self, other: &ServiceSpec) -> bool {
        self.chain.len() < other.chain.len() && self.is_prefix_of(other)
    }

    pub fn then(&self, transforms: &[TransformId]) -> ServiceSpec {
        let mut chain = self.chain.clone();
        chain.extend_from_slice(transforms);
        ServiceSpec { chain }
    }
}

impl fmt::Display for ServiceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in self.chain.iter().rev() {
            write!(f, "f{}(", t.0)?;
        }
        write!(f, "O")?;
        for _ in &self.chain {
            write!(f, ")")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QosRequirement {
    pub max_delay_ms: f64,
    pub min_bandwidth_mbps: f64,
}

impl QosRequirement {
    pub fn is_valid(&self) -> bool {
        self.max_delay_ms.is_finite() && self.max_delay_ms > 0.0 && self.min_bandwidth_mbps > 0.0
    }

    pub fn admits(&self, delay_ms: f64, bandwidth_mbps: f64) -> bool {
        delay_ms <= self.max_delay_ms && bandwidth_mbps >= self.min_bandwidth_mbps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub spec: ServiceSpec,
    pub qos: QosRequirement,
}
