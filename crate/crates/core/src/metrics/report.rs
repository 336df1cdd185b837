use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::{fmt_g6, write_csv_row, TreeMetrics};
use crate::servicetree::PeerId;

pub const REPORT_HEADER: [&str; 12] = [
    "scenario_id",
    "seed",
    "peers_final",
    "stress_avg",
    "stress_max",
    "stretch",
    "recovery_mean_ms",
    "speedup_or_blank",
    "control_hops",
    "joins",
    "rejections",
    "switches",
];

/// One peer's service restored after an underlay failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRecord {
    /// Index of the failure event in the run's failure schedule.
    pub failure_id: usize,
    pub peer: PeerId,
    /// From the failure to restored QoS, detection included.
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub arrivals: u64,
    pub departures: u64,
    /// Peers that died with their router.
    pub killed: u64,
    /// Successful joins of any kind.
    pub joins: u64,
    pub rejected_no_candidates: u64,
    pub rejected_qos: u64,
    pub rejected_capacity: u64,
    pub permanent_rejections: u64,
    pub retries: u64,
    pub switches: u64,
    pub notifications: u64,
    pub complaints: u64,
    pub parent_repairs: u64,
    pub failures: u64,
    pub leave_warnings: u64,
    pub clamped_vectors: u64,
}

impl Counters {
    pub fn rejections(&self) -> u64 {
        self.rejected_no_candidates + self.rejected_qos + self.rejected_capacity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario_id: String,
    pub seed: u64,
    /// Receivers attached at the end of the run.
    pub peers_final: usize,
    /// Stress and stretch averaged over the periodic samples taken while
    /// the tree had at least one delivering edge.
    pub stress_avg: f64,
    /// Largest per-link count seen in any sample.
    pub stress_max: u32,
    pub stretch: f64,
    pub samples: usize,
    /// The tree as it stands at the end of the run.
    pub final_tree: TreeMetrics,
    pub recoveries: Vec<RecoveryRecord>,
    pub recovery_mean_ms: Option<f64>,
    /// Failure-affected peers whose service never came back.
    pub unrecovered: usize,
    pub speedup: Option<f64>,
    pub control_hops: u64,
    pub counters: Counters,
}

impl MetricsReport {
    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |x: Option<f64>| x.map(fmt_g6).unwrap_or_default();
        vec![
            self.scenario_id.clone(),
            self.seed.to_string(),
            self.peers_final.to_string(),
            fmt_g6(self.stress_avg),
            self.stress_max.to_string(),
            fmt_g6(self.stretch),
            opt(self.recovery_mean_ms),
            opt(self.speedup),
            self.control_hops.to_string(),
            self.counters.joins.to_string(),
            self.counters.rejections().to_string(),
            self.counters.switches.to_string(),
        ]
    }

    /// `report.csv`: header plus one row per report.
    pub fn write_csv<W: Write>(w: &mut W, reports: &[MetricsReport]) -> io::Result<()> {
        write_csv_row(w, &REPORT_HEADER.map(String::from))?;
        for r in reports {
            write_csv_row(w, &r.csv_fields())?;
        }
        Ok(())
    }
}
