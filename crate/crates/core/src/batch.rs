//! Multi-run drivers: adaptive/baseline comparison and peer-count sweeps.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::metrics::{fmt_g6, mean_std, speedup, write_csv_row, MetricsReport, Speedup};
use crate::sim::{run, Mode, RunOptions, Scenario, SimError};

/// One seed run in both modes.
#[derive(Debug, Clone)]
pub struct PairedRun {
    pub seed: u64,
    pub adaptive: MetricsReport,
    pub baseline: MetricsReport,
    pub speedup: Speedup,
}

/// Seeds `sc.seed, sc.seed + 1, ...`.
pub fn seeds(sc: &Scenario, n: u64) -> Vec<u64> {
    (0..n).map(|i| sc.seed.wrapping_add(i)).collect()
}

/// Runs `sc` under `seed` in both modes. The adaptive report carries the
/// speedup when it is defined.
pub fn run_pair(sc: &Scenario, seed: u64) -> Result<PairedRun, SimError> {
    let mut sc = sc.clone();
    sc.seed = seed;
    let opts = |mode| RunOptions { mode, check_invariants: false };
    let mut adaptive = run(&sc, opts(Mode::Adaptive))?.report;
    let baseline = run(&sc, opts(Mode::Baseline))?.report;
    let s = speedup(&adaptive.recoveries, &baseline.recoveries);
    adaptive.speedup = s.value();
    Ok(PairedRun { seed, adaptive, baseline, speedup: s })
}

/// Paired runs for every seed, in parallel, returned in seed order.
pub fn compare(sc: &Scenario, n_seeds: u64) -> Result<Vec<PairedRun>, SimError> {
    seeds(sc, n_seeds).into_par_iter().map(|s| run_pair(sc, s)).collect()
}

pub const SPEEDUP_HEADER: [&str; 8] = [
    "seed",
    "pairs",
    "baseline_mean_ms",
    "adaptive_mean_ms",
    "speedup",
    "unpaired_adaptive",
    "unpaired_baseline",
    "comparable",
];

/// Mean and standard deviation of the speedup over comparable seeds.
pub fn speedup_summary(runs: &[PairedRun]) -> Option<(f64, f64)> {
    let xs: Vec<f64> = runs.iter().filter_map(|r| r.speedup.value()).collect();
    mean_std(&xs)
}

/// `speedup.csv`: one row per seed, then `mean` and `stddev` rows over the
/// comparable seeds.
pub fn write_speedup_csv<W: Write>(w: &mut W, runs: &[PairedRun]) -> io::Result<()> {
    write_csv_row(w, &SPEEDUP_HEADER.map(String::from))?;
    for r in runs {
        let row = match &r.speedup {
            Speedup::Ratio {
                value,
                pairs,
                baseline_mean_ms,
                adaptive_mean_ms,
                unpaired_adaptive,
                unpaired_baseline,
            } => [
                r.seed.to_string(),
                pairs.to_string(),
                fmt_g6(*baseline_mean_ms),
                fmt_g6(*adaptive_mean_ms),
                fmt_g6(*value),
                unpaired_adaptive.to_string(),
                unpaired_baseline.to_string(),
                "true".into(),
            ],
            Speedup::Incomparable { unpaired_adaptive, unpaired_baseline } => [
                r.seed.to_string(),
                "0".into(),
                String::new(),
                String::new(),
                String::new(),
                unpaired_adaptive.to_string(),
                unpaired_baseline.to_string(),
                "false".into(),
            ],
        };
        write_csv_row(w, &row)?;
    }
    let (mean, std) = match speedup_summary(runs) {
        Some((m, s)) => (fmt_g6(m), fmt_g6(s)),
        None => (String::new(), String::new()),
    };
    let comparable = runs.iter().filter(|r| r.speedup.value().is_some()).count().to_string();
    for (label, v) in [("mean", mean), ("stddev", std)] {
        let mut row = vec![String::new(); SPEEDUP_HEADER.len()];
        row[0] = label.into();
        row[4] = v;
        row[7] = comparable.clone();
        write_csv_row(w, &row)?;
    }
    Ok(())
}

/// Aggregate of one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub peers: usize,
    pub seeds: usize,
    pub stretch: (f64, f64),
    pub stress_avg: (f64, f64),
    pub control_hops: (f64, f64),
    /// Over the seeds where the speedup is defined.
    pub speedup: Option<(f64, f64)>,
    pub speedup_seeds: usize,
    pub rejections: (f64, f64),
}

pub const SWEEP_HEADER: [&str; 13] = [
    "peers",
    "seeds",
    "stretch_mean",
    "stretch_std",
    "stress_avg_mean",
    "stress_avg_std",
    "speedup_mean",
    "speedup_std",
    "speedup_seeds",
    "control_hops_mean",
    "control_hops_std",
    "rejections_mean",
    "rejections_std",
];

impl SweepRow {
    fn from_runs(peers: usize, runs: &[PairedRun]) -> SweepRow {
        let stat =
            |f: &dyn Fn(&PairedRun) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>()).unwrap_or((0.0, 0.0));
        let sp: Vec<f64> = runs.iter().filter_map(|r| r.speedup.value()).collect();
        SweepRow {
            peers,
            seeds: runs.len(),
            stretch: stat(&|r| r.adaptive.stretch),
            stress_avg: stat(&|r| r.adaptive.stress_avg),
            control_hops: stat(&|r| r.adaptive.control_hops as f64),
            speedup: mean_std(&sp),
            speedup_seeds: sp.len(),
            rejections: stat(&|r| r.adaptive.counters.rejections() as f64),
        }
    }

    pub fn csv_fields(&self) -> Vec<String> {
        let (sm, ss) = self.speedup.map(|(m, s)| (fmt_g6(m), fmt_g6(s))).unwrap_or_default();
        vec![
            self.peers.to_string(),
            self.seeds.to_string(),
            fmt_g6(self.stretch.0),
            fmt_g6(self.stretch.1),
            fmt_g6(self.stress_avg.0),
            fmt_g6(self.stress_avg.1),
            sm,
            ss,
            self.speedup_seeds.to_string(),
            fmt_g6(self.control_hops.0),
            fmt_g6(self.control_hops.1),
            fmt_g6(self.rejections.0),
            fmt_g6(self.rejections.1),
        ]
    }
}

/// One row per peer count, each the aggregate of `n_seeds` paired runs.
pub fn sweep(sc: &Scenario, peers: &[usize], n_seeds: u64) -> Result<Vec<SweepRow>, SimError> {
    let jobs: Vec<(usize, u64)> =
        peers.iter().flat_map(|&p| seeds(sc, n_seeds).into_iter().map(move |s| (p, s))).collect();
    let runs: Vec<(usize, PairedRun)> = jobs
        .into_par_iter()
        .map(|(p, s)| {
            let mut point = sc.clone();
            point.peers.count = p;
            run_pair(&point, s).map(|r| (p, r))
        })
        .collect::<Result<_, _>>()?;
    Ok(peers
        .iter()
        .map(|&p| {
            let at: Vec<PairedRun> = runs.iter().filter(|(q, _)| *q == p).map(|(_, r)| r.clone()).collect();
            SweepRow::from_runs(p, &at)
        })
        .collect())
}

pub fn write_sweep_csv<W: Write>(w: &mut W, rows: &[SweepRow]) -> io::Result<()> {
    write_csv_row(w, &SWEEP_HEADER.map(String::from))?;
    for r in rows {
        write_csv_row(w, &r.csv_fields())?;
    }
    Ok(())
}
