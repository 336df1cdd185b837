use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qmcast::sim::Scenario;

fn qmcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmcast")).args(args).output().unwrap()
}

fn shipped() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/default.json").into()
}

fn tiny(dir: &Path) -> PathBuf {
    let mut sc = Scenario::default();
    sc.scenario_id = "tiny".into();
    sc.topology.routers = 30;
    sc.peers.count = 30;
    sc.failures.random_links = 4;
    sc.failures.window_ms = (10_000.0, 40_000.0);
    sc.duration_ms = 100_000.0;
    let path = dir.join("tiny.json");
    std::fs::write(&path, sc.to_json()).unwrap();
    path
}

fn stderr_line(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).trim_end().to_string()
}

#[test]
fn validate_accepts_the_shipped_scenario() {
    let o = qmcast(&["validate", "--scenario", &shipped()]);
    assert!(o.status.success(), "{}", stderr_line(&o));
}

#[test]
fn validate_rejects_unknown_keys_in_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = Scenario::default().to_json().replacen("\"seed\"", "\"sede\"", 1);
    std::fs::write(&path, text).unwrap();
    let o = qmcast(&["validate", "--scenario", path.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr_line(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("sede"), "{err}");
}

#[test]
fn bad_flag_is_a_one_line_error() {
    let o = qmcast(&["run", "--scenario", &shipped(), "--sed", "3"]);
    assert!(!o.status.success());
    assert_eq!(stderr_line(&o).lines().count(), 1);
}

#[test]
fn run_writes_all_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny(dir.path());
    let outs = [dir.path().join("a"), dir.path().join("b")];
    for o in &outs {
        let r = qmcast(&["run", "--scenario", sc.to_str().unwrap(), "--seed", "8", "--out", o.to_str().unwrap()]);
        assert!(r.status.success(), "{}", stderr_line(&r));
    }
    for f in ["report.csv", "events.csv", "tree.json", "topology.json"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        assert_eq!(a, std::fs::read(outs[1].join(f)).unwrap(), "{f} differs");
    }
    let report = std::fs::read_to_string(outs[0].join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(
        lines[0],
        "scenario_id,seed,peers_final,stress_avg,stress_max,stretch,recovery_mean_ms,speedup_or_blank,control_hops,joins,rejections,switches"
    );
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("tiny,8,"));
    let events = std::fs::read_to_string(outs[0].join("events.csv")).unwrap();
    assert!(events.starts_with("time_ms,seq,kind,peer,detail\n"));
}

#[test]
fn sweep_and_compare_emit_tables() {
    let dir = tempfile::tempdir().unwrap();
    let sc = tiny(dir.path());
    let out = dir.path().join("out");
    let o = qmcast(&[
        "sweep",
        "--scenario",
        sc.to_str().unwrap(),
        "--peers",
        "10,20",
        "--seeds",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr_line(&o));
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("peers,seeds,stretch_mean,stretch_std"));
    assert!(rows[1].starts_with("10,2,") && rows[2].starts_with("20,2,"));

    let o = qmcast(&["compare", "--scenario", sc.to_str().unwrap(), "--seeds", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr_line(&o));
    let sp = std::fs::read_to_string(out.join("speedup.csv")).unwrap();
    let rows: Vec<&str> = sp.lines().collect();
    assert_eq!(rows.len(), 1 + 3 + 2);
    assert!(rows[4].starts_with("mean,") && rows[5].starts_with("stddev,"));
}

#[test]
fn unwritable_output_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let target = blocker.join("sub");
    let o = qmcast(&["run", "--scenario", &shipped(), "--out", target.to_str().unwrap()]);
    assert!(!o.status.success());
    assert_eq!(stderr_line(&o).lines().count(), 1);
}
