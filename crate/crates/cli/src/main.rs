use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use qmcast::batch::{compare, speedup_summary, sweep, write_speedup_csv, write_sweep_csv};
use qmcast::metrics::MetricsReport;
use qmcast::sim::{run, EventRecord, Mode, RunOptions, Scenario};

#[derive(Parser)]
#[command(name = "qmcast", version, about = "QoS-aware overlay multicast simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write report.csv, events.csv, tree.json, topology.json.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Repair through the root only.
        #[arg(long)]
        baseline: bool,
    },
    /// Vary the peer count and write mean/stddev per point to sweep.csv.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        peers: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run adaptive and baseline repair on each seed and write speedup.csv.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario file and exit.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn load(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Scenario::from_json(&text).with_context(|| format!("{}", path.display()))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_file(dir: &Path, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).with_context(|| format!("cannot write {}", path.display()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { scenario } => {
            let sc = load(&scenario)?;
            log::info!("{}: scenario {:?} is valid", scenario.display(), sc.scenario_id);
        }
        Command::Run { scenario, seed, out, baseline } => {
            let mut sc = load(&scenario)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            out_dir(&out)?;
            let mode = if baseline { Mode::Baseline } else { Mode::Adaptive };
            let res = run(&sc, RunOptions { mode, check_invariants: false })?;
            log::info!(
                "run {} seed {}: {} attached, {} joins, {} rejections",
                sc.scenario_id,
                sc.seed,
                res.report.peers_final,
                res.report.counters.joins,
                res.report.counters.rejections()
            );
            write_file(&out, "report.csv", |w| MetricsReport::write_csv(w, std::slice::from_ref(&res.report)))?;
            write_file(&out, "events.csv", |w| EventRecord::write_csv(w, &res.events))?;
            let tree = serde_json::to_string_pretty(&res.tree_doc())?;
            write_file(&out, "tree.json", |w| w.write_all(tree.as_bytes()))?;
            write_file(&out, "topology.json", |w| w.write_all(res.topology.to_json().as_bytes()))?;
        }
        Command::Sweep { scenario, peers, seeds, out } => {
            let sc = load(&scenario)?;
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            out_dir(&out)?;
            let rows = sweep(&sc, &peers, seeds)?;
            for r in &rows {
                log::info!("peers {}: stretch {:.3} control_hops {:.1}", r.peers, r.stretch.0, r.control_hops.0);
            }
            write_file(&out, "sweep.csv", |w| write_sweep_csv(w, &rows))?;
        }
        Command::Compare { scenario, seeds, out } => {
            let sc = load(&scenario)?;
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            out_dir(&out)?;
            let runs = compare(&sc, seeds)?;
            match speedup_summary(&runs) {
                Some((m, s)) => log::info!("speedup {m:.3} ± {s:.3}"),
                None => log::warn!("no seed produced a comparable speedup"),
            }
            write_file(&out, "speedup.csv", |w| write_speedup_csv(w, &runs))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QMCAST_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("qmcast: {}", msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qmcast: {e:#}");
            ExitCode::FAILURE
        }
    }
}
