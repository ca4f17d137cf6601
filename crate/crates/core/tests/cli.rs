use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;
use trackmdp::eval::read_csv;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn trackmdp(args: &[&str]) -> Run {
    let o = Command::new(env!("CARGO_BIN_EXE_trackmdp"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: o.status.code().expect("exit code"),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(r: &Run) {
    assert_eq!(r.code, 0, "stdout: {}\nstderr: {}", r.stdout, r.stderr);
}

#[test]
fn gen_kernel_reproduces_every_fixture_kernel() {
    let dir = TempDir::new().unwrap();
    for name in ["2x2_z2", "2x2_z3", "2x2_z4", "3x3_a", "3x3_b", "3x3_c", "5x5_z3"] {
        let cfg = fixture(&format!("configs/{name}.json"));
        let r = trackmdp(&["gen-kernel", "--config", s(&cfg), "--out", s(dir.path())]);
        ok(&r);
        assert!(r.stdout.contains("fingerprint"), "{}", r.stdout);
        assert!(r.stdout.contains("support size"), "{}", r.stdout);
        let got = fs::read(dir.path().join(format!("{name}.json"))).unwrap();
        let want = fs::read(fixture(&format!("kernels/{name}.json"))).unwrap();
        assert!(got == want, "{name} differs from the bundled kernel");
    }
}

#[test]
fn gen_kernel_seed_flag_changes_the_kernel() {
    let dir = TempDir::new().unwrap();
    let cfg = fixture("configs/3x3_a.json");
    ok(&trackmdp(&["gen-kernel", "--config", s(&cfg), "--out", s(dir.path()), "--seed", "99"]));
    let got = fs::read(dir.path().join("3x3_a.json")).unwrap();
    assert!(got != fs::read(fixture("kernels/3x3_a.json")).unwrap());
}

#[test]
fn out_of_range_z_is_rejected_with_its_line() {
    let dir = TempDir::new().unwrap();
    let text = fs::read_to_string(fixture("configs/3x3_a.json"))
        .unwrap()
        .replace("\"z\": 2", "\"z\": 10");
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, text).unwrap();
    let r = trackmdp(&["gen-kernel", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("line 4"), "{}", r.stderr);
    assert!(r.stderr.contains("10"), "{}", r.stderr);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\"version\": 1, \"n\": 3, \"z\": 2,\n \"colour\": 1}").unwrap();
    let r = trackmdp(&["solve-exact", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("colour"), "{}", r.stderr);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(trackmdp(&[]).code, 1);
    assert_eq!(trackmdp(&["solve-exact"]).code, 1);
    assert_eq!(trackmdp(&["verify", "--level", "slow"]).code, 1);
    assert_eq!(trackmdp(&["--help"]).code, 0);
}

#[test]
fn solve_exact_reports_a_small_residual() {
    let dir = TempDir::new().unwrap();
    let cfg = fixture("configs/3x3_a.json");
    let r = trackmdp(&["solve-exact", "--config", s(&cfg), "--out", s(dir.path())]);
    ok(&r);
    let residual: f64 = r
        .stdout
        .split("Bellman residual ")
        .nth(1)
        .and_then(|t| t.split(',').next())
        .and_then(|t| t.parse().ok())
        .expect("residual in output");
    assert!(residual <= 1e-10, "{residual}");
    let art: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("policy_exact.json")).unwrap()).unwrap();
    assert_eq!(art["kind"], "value_table");
    assert!(art["kernel_fingerprint"].as_str().unwrap().len() == 64);
}

#[test]
fn solve_exact_on_ten_by_ten_stops_at_the_budget() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("big.json");
    fs::write(
        &cfg,
        r#"{"version": 1, "n": 10, "z": 4, "p_exit": 0.005, "p_hot": 0.15, "kernel_seed": 1,
            "reward": {"c": 0.2, "t_max": 3}}"#,
    )
    .unwrap();
    let r = trackmdp(&["solve-exact", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("budget"), "{}", r.stderr);
    assert!(r.stderr.contains("train-q"), "{}", r.stderr);
}

#[test]
fn train_q_is_deterministic() {
    let cfg = fixture("configs/3x3_a.json");
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    ok(&trackmdp(&["train-q", "--config", s(&cfg), "--out", s(a.path())]));
    ok(&trackmdp(&["train-q", "--config", s(&cfg), "--out", s(b.path())]));
    let x = fs::read(a.path().join("policy_q.json")).unwrap();
    let y = fs::read(b.path().join("policy_q.json")).unwrap();
    assert!(x == y, "artifacts differ");
    let c = TempDir::new().unwrap();
    ok(&trackmdp(&["train-q", "--config", s(&cfg), "--out", s(c.path()), "--seed", "8"]));
    assert!(x != fs::read(c.path().join("policy_q.json")).unwrap());
}

#[test]
fn eval_matches_the_golden_metrics() {
    let dir = TempDir::new().unwrap();
    let cfg = fixture("configs/3x3_a.json");
    ok(&trackmdp(&["solve-exact", "--config", s(&cfg), "--out", s(dir.path())]));
    ok(&trackmdp(&["train-q", "--config", s(&cfg), "--out", s(dir.path())]));
    let exact = dir.path().join("policy_exact.json");
    let q = dir.path().join("policy_q.json");
    let r = trackmdp(&[
        "eval", "--config", s(&cfg), "--out", s(dir.path()),
        "--policy", s(&exact), "--policy", s(&q), "--require", "exact",
    ]);
    ok(&r);
    let got = read_csv(fs::File::open(dir.path().join("metrics.csv")).unwrap()).unwrap();
    let want = read_csv(fs::File::open(fixture("golden/3x3_a_metrics.csv")).unwrap()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn eval_refuses_missing_and_mismatched_policies() {
    let dir = TempDir::new().unwrap();
    let a = fixture("configs/3x3_a.json");
    let b = fixture("configs/3x3_b.json");
    let r = trackmdp(&["eval", "--config", s(&a), "--out", s(dir.path()), "--require", "exact"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("exact"), "{}", r.stderr);

    ok(&trackmdp(&["solve-exact", "--config", s(&a), "--out", s(dir.path())]));
    let policy = dir.path().join("policy_exact.json");
    let r = trackmdp(&["eval", "--config", s(&b), "--out", s(dir.path()), "--policy", s(&policy)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("fingerprint"), "{}", r.stderr);
}

#[test]
fn eval_with_one_episode_per_start_has_a_finite_stderr() {
    let dir = TempDir::new().unwrap();
    let cfg = fixture("configs/3x3_a.json");
    ok(&trackmdp(&["solve-exact", "--config", s(&cfg), "--out", s(dir.path())]));
    let policy = dir.path().join("policy_exact.json");
    ok(&trackmdp(&[
        "eval", "--config", s(&cfg), "--out", s(dir.path()), "--policy", s(&policy), "--episodes", "1",
    ]));
    let rows = read_csv(fs::File::open(dir.path().join("metrics.csv")).unwrap()).unwrap();
    let row = rows.iter().find(|r| r.policy_id == "exact").unwrap();
    assert_eq!(row.episodes, 9);
    assert!(row.aihtr_stderr.is_finite() && row.aihtr_stderr > 1.0, "{}", row.aihtr_stderr);
    let r = trackmdp(&["eval", "--config", s(&cfg), "--out", s(dir.path()), "--episodes", "0"]);
    assert_eq!(r.code, 2);
}

#[test]
fn train_ac_artifact_evaluates() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("ac.json");
    let text = fs::read_to_string(fixture("configs/3x3_a.json"))
        .unwrap()
        .replace(
            "\"solver\": {\"kind\": \"exact\", \"seed\": 7}",
            "\"solver\": {\"kind\": \"actor_critic\", \"seed\": 7, \"hyper\": {\"episodes\": 200}}",
        );
    fs::write(&cfg, text).unwrap();
    ok(&trackmdp(&["train-ac", "--config", s(&cfg), "--out", s(dir.path())]));
    let policy = dir.path().join("policy_ac.json");
    let r = trackmdp(&[
        "eval", "--config", s(&cfg), "--out", s(dir.path()), "--policy", s(&policy),
        "--require", "actor_critic", "--episodes", "20",
    ]);
    ok(&r);
    assert!(r.stdout.contains("actor_critic"), "{}", r.stdout);
}

#[test]
fn verify_fast_passes_and_writes_a_report() {
    let dir = TempDir::new().unwrap();
    let r = trackmdp(&["verify", "--level", "fast", "--out", s(dir.path())]);
    ok(&r);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["checks"].as_array().unwrap().len() > 100);
}

#[test]
fn verify_rejects_a_kernel_that_does_not_sum_to_one() {
    let dir = TempDir::new().unwrap();
    let text = fs::read_to_string(fixture("kernels/1x1.json"))
        .unwrap()
        .replace("9.0000000000000002e-1", "8.9000000000000001e-1");
    let kernel = dir.path().join("perturbed.json");
    fs::write(&kernel, text).unwrap();
    let r = trackmdp(&["verify", "--out", s(dir.path()), "--kernel", s(&kernel)]);
    assert_eq!(r.code, 2, "{}\n{}", r.stdout, r.stderr);
    assert!(r.stdout.contains("kernel_validation"), "{}", r.stdout);
}

#[test]
fn reproduce_writes_tables_and_policies() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("sweep.json");
    fs::write(
        &cfg,
        r#"{"version": 1, "n": 3, "z_values": [3], "c_values": [0.2, 0.22],
            "hyper": {"features": "posterior", "episodes": 50, "check_points": 5}}"#,
    )
    .unwrap();
    let r = trackmdp(&["reproduce", "--config", s(&cfg), "--out", s(dir.path()), "--level", "fast"]);
    ok(&r);
    assert!(r.stdout.contains("accuracy higher in"), "{}", r.stdout);
    let rows = read_csv(fs::File::open(dir.path().join("aihtr_z3.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(dir.path().join("hamming_accuracy.csv").exists());
    assert!(dir.path().join("policies/track_mdp_z3_c0.22.json").exists());
}
