//! Peer-to-peer overlay multicast with per-peer service and QoS requirements.

pub mod adapt;
pub mod batch;
pub mod coords;
pub mod ddht;
pub mod metrics;
pub mod servicetree;
pub mod sim;
pub mod underlay;
