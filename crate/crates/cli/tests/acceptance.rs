//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;
#[path = "../../core/tests/common/walkthrough.rs"]
mod walkthrough;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use qmcast::batch::{self, PairedRun};
use qmcast::metrics::{mean_std, recompute_from_dump};
use qmcast::servicetree::{Heuristic, JoinOutcome, PeerId, TreeDoc};
use qmcast::sim::{failure_schedule, run, stream_rng, Mode, RunOptions, RunOutput, Scenario, ScriptedFailure, Stream};
use qmcast::underlay::{generate_topology, PhysicalTopology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;

type Verdict = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Verdict {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn default_runs() -> Vec<RunOutput> {
    let sc = Scenario::default();
    batch::seeds(&sc, SEEDS)
        .into_iter()
        .map(|s| {
            let mut sc = sc.clone();
            sc.seed = s;
            run(&sc, RunOptions::default()).expect("default scenario runs")
        })
        .collect()
}

fn ddht_oracle() -> Verdict {
    let t = Instant::now();
    let bad: usize = (0..500).map(|i| oracle::oracle_instance(0xacce_0000 + i)).sum();
    let el = t.elapsed();
    check(
        bad == 0 && el < Duration::from_secs(10),
        format!("500 instances, 0 mismatches, {:.2} s", el.as_secs_f64()),
        format!("{bad} mismatching queries, {:.2} s", el.as_secs_f64()),
    )
}

fn zone_tiling() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x711e);
    let dim = 4;
    let mut s = oracle::space(dim, 4);
    let mut live: Vec<PeerId> = Vec::new();
    for id in 0..1000u32 {
        if !live.is_empty() && rng.gen_bool(0.35) {
            let p = live.swap_remove(rng.gen_range(0..live.len()));
            s.remove_entry(p);
        } else {
            s.insert_entry(oracle::random_entry(&mut rng, id, dim)).unwrap();
            live.push(PeerId(id));
        }
    }
    let mut violations = 0;
    for _ in 0..10_000 {
        let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..oracle::BOUND)).collect();
        if s.locate_all(&q).len() != 1 {
            violations += 1;
        }
    }
    let vol: f64 = s.zones().iter().map(|z| z.volume()).sum();
    let rel = (vol - s.outer_volume()).abs() / s.outer_volume();
    check(
        violations == 0 && rel <= 1e-9,
        format!("{} zones, 10000 points each in one zone, volume error {rel:.1e}", s.zone_count()),
        format!("{violations} points not in exactly one zone, volume error {rel:.1e}"),
    )
}

fn admission_soundness(runs: &[RunOutput]) -> Verdict {
    let total: usize = runs.iter().map(|r| r.admissions.len()).sum();
    let bad: usize = runs.iter().flat_map(|r| &r.admissions).filter(|a| !a.satisfied()).count();
    let joins: u64 = runs.iter().map(|r| r.report.counters.joins).sum();
    check(
        bad == 0 && total as u64 == joins,
        format!("{total} successful joins over {SEEDS} seeds, all within QoS"),
        format!("{bad} of {total} admissions outside QoS ({joins} joins counted)"),
    )
}

/// The default scenario with its failures written out as a script.
fn scripted_default() -> Scenario {
    let mut sc = Scenario::default();
    let topo = generate_topology(sc.topology.routers, &sc.topology.params, sc.seed).unwrap();
    let schedule = failure_schedule(&sc, &topo, &mut stream_rng(sc.seed, Stream::Topology));
    sc.failures.scripted =
        schedule.into_iter().map(|(time_ms, element)| ScriptedFailure { time_ms, element }).collect();
    sc.failures.random_links = 0;
    sc
}

fn tree_integrity() -> Verdict {
    let sc = scripted_default();
    let out = run(&sc, RunOptions { mode: Mode::Adaptive, check_invariants: true }).unwrap();
    let c = out.conservation;
    check(
        sc.failures.scripted.len() == 20 && out.invariant_violations.is_empty() && c.holds(),
        format!(
            "{} events, 20 scripted failures, no violations; {} = {} + {} + {} + {}",
            out.events.len(),
            c.arrivals,
            c.attached,
            c.departed,
            c.rejected,
            c.pending
        ),
        format!(
            "{} failures, first violations {:?}, conservation {:?}",
            sc.failures.scripted.len(),
            out.invariant_violations.iter().take(3).collect::<Vec<_>>(),
            c
        ),
    )
}

fn metric_identities(runs: &[RunOutput]) -> Verdict {
    let mut problems = Vec::new();
    for r in runs {
        let m = &r.report;
        if m.samples > 0 && (m.stretch < 1.0 || m.stress_avg < 1.0) {
            problems.push(format!("seed {}: stretch {} stress {}", m.seed, m.stretch, m.stress_avg));
        }
        if !m.final_tree.empty && (m.final_tree.stretch < 1.0 || m.final_tree.stress_avg < 1.0) {
            problems.push(format!("seed {}: final tree {:?}", m.seed, m.final_tree));
        }
        let doc: TreeDoc = serde_json::from_str(&serde_json::to_string(&r.tree_doc()).unwrap()).unwrap();
        let topo = PhysicalTopology::from_json(&r.topology.to_json()).unwrap();
        let again = recompute_from_dump(&doc, &topo);
        if again != m.final_tree {
            problems.push(format!("seed {}: recomputed {again:?} vs {:?}", m.seed, m.final_tree));
        }
    }
    check(
        problems.is_empty(),
        format!("{} runs: stretch and stress >= 1, dump recomputation exact", runs.len()),
        problems.join("; "),
    )
}

fn join_walkthrough() -> Verdict {
    let topo = walkthrough::topology();
    let (_, a) = walkthrough::scenario_a(&topo);
    let (_, b) = walkthrough::scenario_b(&topo);
    let a_ok = matches!(a.outcome, JoinOutcome::Attached { parent: walkthrough::B, heuristic: Heuristic::Reuse, .. });
    let b_ok = match &b.outcome {
        JoinOutcome::Attached { parent, path, .. } => {
            *parent == walkthrough::F
                && path.chain == [walkthrough::SERVER, walkthrough::A, walkthrough::F, walkthrough::N_PRIME]
        }
        _ => false,
    };
    check(
        a_ok && b_ok,
        "n attaches to b; n' gets server, a, f, n'".into(),
        format!("(a) {:?} (b) {:?}", a.outcome, b.outcome),
    )
}

fn speedup_direction(pairs: &[PairedRun]) -> Verdict {
    let per_seed: Vec<String> =
        pairs.iter().map(|p| p.speedup.value().map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())).collect();
    match batch::speedup_summary(pairs) {
        Some((m, s)) => check(
            m > 1.0,
            format!("mean speedup {m:.3} ± {s:.3} [{}]", per_seed.join(" ")),
            format!("mean speedup {m:.3} ± {s:.3} [{}]", per_seed.join(" ")),
        ),
        None => Err("no seed had a comparable recovery".into()),
    }
}

fn maintenance_direction(with: &[RunOutput]) -> Verdict {
    let mut without = Scenario::default();
    without.policy.maintenance = false;
    let off: Vec<f64> = batch::seeds(&without, SEEDS)
        .into_iter()
        .map(|s| {
            let mut sc = without.clone();
            sc.seed = s;
            run(&sc, RunOptions::default()).unwrap().report.stretch
        })
        .collect();
    let on: Vec<f64> = with.iter().map(|r| r.report.stretch).collect();
    let (m_on, s_on) = mean_std(&on).unwrap();
    let (m_off, s_off) = mean_std(&off).unwrap();
    let kept = on.iter().zip(&off).filter(|(a, b)| a <= b).count();
    let line = format!("stretch on {m_on:.4} ± {s_on:.4}, off {m_off:.4} ± {s_off:.4}, {kept}/{SEEDS} seeds not worse");
    check(m_on <= m_off && kept >= 8, line.clone(), line)
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qmcast")).args(args).output().expect("binary runs")
}

fn scenario_path() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/default.json").into()
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let outs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for o in &outs {
        let res = cli(&["run", "--scenario", &scenario_path(), "--seed", "4", "--out", o.to_str().unwrap()]);
        if !res.status.success() {
            return Err(format!("run failed: {}", String::from_utf8_lossy(&res.stderr)));
        }
    }
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let same = ["report.csv", "events.csv"].iter().all(|f| read(&outs[0], f) == read(&outs[1], f));
    let lines = String::from_utf8(read(&outs[0], "events.csv")).unwrap().lines().count();
    check(same, format!("report.csv and events.csv byte-identical ({lines} event lines)"), "outputs differ".into())
}

fn scale_sanity() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let res = cli(&[
        "sweep",
        "--scenario",
        &scenario_path(),
        "--peers",
        "50,100,200",
        "--seeds",
        "10",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let el = t.elapsed();
    if !res.status.success() {
        return Err(format!("sweep failed: {}", String::from_utf8_lossy(&res.stderr)));
    }
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "control_hops_mean").unwrap();
    let rows: BTreeMap<usize, f64> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[col].parse().unwrap())
        })
        .collect();
    let hops: Vec<f64> = rows.values().copied().collect();
    let monotone = hops.windows(2).all(|w| w[0] <= w[1]);
    let line = format!("3 rows in {:.1} s, mean control hops {:?}", el.as_secs_f64(), hops);
    check(rows.len() == 3 && monotone && el < Duration::from_secs(300), line.clone(), line)
}

fn main() -> ExitCode {
    let runs = default_runs();
    let pairs = batch::compare(&Scenario::default(), SEEDS).expect("compare runs");
    let results: Vec<(&str, Verdict)> = vec![
        ("ddht lookup equals brute-force scan", ddht_oracle()),
        ("zones tile the key space", zone_tiling()),
        ("admissions meet QoS", admission_soundness(&runs)),
        ("tree integrity and conservation", tree_integrity()),
        ("metric identities", metric_identities(&runs)),
        ("tree construction walkthrough", join_walkthrough()),
        ("adaptive recovery beats attach-to-root", speedup_direction(&pairs)),
        ("maintenance does not raise stretch", maintenance_direction(&runs)),
        ("determinism", determinism()),
        ("sweep scale", scale_sanity()),
    ];
    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        match v {
            Ok(msg) => println!("criterion {:>2} PASS  {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {msg}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
