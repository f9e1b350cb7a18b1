use std::path::Path;
use std::process::{Command, Output};

fn moe_oco(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-oco"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MOE_OCO_LOG")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gmm_line(t: u64, horizon: usize, prec: f64) -> String {
    let pose = "[0.0,0.0,0.0]";
    let traj = vec![pose; horizon].join(",");
    let precs = vec![format!("[{prec},{prec},{prec}]"); horizon].join(",");
    let expert = format!(r#"{{"gmm":{{"modes":[{{"p":1.0,"mean":[{traj}],"prec":[{precs}]}}]}}}}"#);
    format!(r#"{{"t":{t},"truth":{pose},"future":[{traj}],"experts":[{expert},{expert}]}}"#)
}

#[test]
fn run_preset_writes_alpha_with_t_plus_one_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = moe_oco(&["run", "--preset", "stationary-convex", "--seed", "7", "--out", "results"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let alpha = std::fs::read_to_string(dir.path().join("results/alpha.csv")).unwrap();
    let mut lines = alpha.lines();
    assert_eq!(lines.next(), Some("step,expert-0,expert-1,expert-2"));
    assert_eq!(lines.count(), 5001);
    for name in ["regret.csv", "config.json", "NLL_moe.csv", "minADE10_moe.csv", "minFDE10_expert-2.csv"] {
        assert!(dir.path().join("results").join(name).exists(), "{name} missing");
    }
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = moe_oco(&["run", "--preset", "nonstationary-nonconvex", "--seed", "2", "--out", "a", "--window", "50"], dir.path());
    assert!(first.status.success(), "{}", stderr(&first));
    let again = moe_oco(&["run", "--config", "a/config.json", "--out", "b"], dir.path());
    assert!(again.status.success(), "{}", stderr(&again));
    for name in ["alpha.csv", "regret.csv", "minFDE10_moe.csv"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"preset":"stationary-convex","scenario":{"total_steps":20},"experiment":{"learner":{"discount":0.5},"window":7}}"#,
    )
    .unwrap();
    let out = moe_oco(&["run", "--config", "c.json", "--discount", "0.75", "--out", "r"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let echo: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r/config.json")).unwrap()).unwrap();
    assert_eq!(echo["experiment"]["learner"]["discount"], 0.75);
    assert_eq!(echo["experiment"]["window"], 7);
    assert_eq!(echo["scenario"]["total_steps"], 20);
}

#[test]
fn out_of_range_discount_exits_1_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = moe_oco(&["run", "--discount", "1.5"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("discount"), "{}", stderr(&out));
}

#[test]
fn bad_config_value_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"experiment":{"smoothing":{"softmin_beta":-1.0}}}"#).unwrap();
    let out = moe_oco(&["run", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("beta"), "{}", stderr(&out));

    std::fs::write(dir.path().join("c.json"), r#"{"scenario":{"n_modes":"five"}}"#).unwrap();
    let out = moe_oco(&["run", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("scenario.n_modes"), "{}", stderr(&out));
}

#[test]
fn unknown_preset_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = moe_oco(&["run", "--preset", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("preset"));
}

#[test]
fn missing_trace_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = moe_oco(&["run", "--trace", "missing.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn overflowing_density_exits_3_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let trace = [gmm_line(0, 2, 1.0), gmm_line(1, 2, 1e300)].join("\n");
    std::fs::write(dir.path().join("t.jsonl"), trace).unwrap();
    let out = moe_oco(&["run", "--trace", "t.jsonl", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("step 1"), "{}", stderr(&out));
}

#[test]
fn generate_then_validate_then_run() {
    let dir = tempfile::tempdir().unwrap();
    let gen = moe_oco(&["generate", "--preset", "stationary-nonconvex", "--seed", "4", "--out", "t.jsonl"], dir.path());
    assert!(gen.status.success(), "{}", stderr(&gen));
    let val = moe_oco(&["validate-trace", "t.jsonl"], dir.path());
    assert!(val.status.success(), "{}", stderr(&val));
    let text = stdout(&val);
    assert!(text.contains("steps: 5000"), "{text}");
    assert!(text.contains("experts (N): 3"), "{text}");
    assert!(text.contains("modes (L): 5"), "{text}");
    assert!(text.contains("horizon (K): 12"), "{text}");

    let direct = moe_oco(&["run", "--preset", "stationary-nonconvex", "--seed", "4", "--out", "a"], dir.path());
    let replay = moe_oco(&["run", "--preset", "stationary-nonconvex", "--seed", "4", "--trace", "t.jsonl", "--out", "b"], dir.path());
    assert!(direct.status.success() && replay.status.success(), "{}", stderr(&replay));
    assert_eq!(
        std::fs::read(dir.path().join("a/alpha.csv")).unwrap(),
        std::fs::read(dir.path().join("b/alpha.csv")).unwrap()
    );
}

#[test]
fn validate_trace_reports_inconsistent_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let trace = [gmm_line(0, 3, 1.0), gmm_line(1, 3, 1.0), gmm_line(2, 4, 1.0)].join("\n");
    std::fs::write(dir.path().join("t.jsonl"), trace).unwrap();
    let out = moe_oco(&["validate-trace", "t.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("line 3") && err.contains("step 2"), "{err}");
}

#[test]
fn validate_trace_reports_malformed_line() {
    let dir = tempfile::tempdir().unwrap();
    let trace = format!("{}\n{{\"t\": 1, \"truth\": [0,0", gmm_line(0, 1, 1.0));
    std::fs::write(dir.path().join("t.jsonl"), trace).unwrap();
    let out = moe_oco(&["validate-trace", "t.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn empty_trace_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.jsonl"), "").unwrap();
    let out = moe_oco(&["validate-trace", "t.jsonl"], dir.path());
    assert!(out.status.success());
    assert!(stdout(&out).contains("steps: 0"));
}

#[test]
fn compare_reports_squint_faster_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = moe_oco(&["compare", "--preset", "squint-vs-eg", "--seed", "5", "--out", "a"], dir.path());
    let b = moe_oco(&["compare", "--preset", "squint-vs-eg", "--seed", "5", "--out", "b"], dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/compare.json")).unwrap()).unwrap();
    let s = report["squint_steps"].as_u64().unwrap();
    let e = report["eg_steps"].as_u64().unwrap();
    assert!(s < e, "squint {s}, eg {e}");
    assert!(dir.path().join("a/squint/alpha.csv").exists());
    assert!(dir.path().join("a/eg/alpha.csv").exists());
}

#[test]
fn compare_rejects_a_single_expert() {
    let dir = tempfile::tempdir().unwrap();
    let one = r#"{"t":0,"truth":[0,0,0],"future":[[0,0,0]],"experts":[{"gmm":{"modes":[{"p":1.0,"mean":[[0,0,0]],"prec":[[1,1,1]]}]}}]}"#;
    std::fs::write(dir.path().join("t.jsonl"), one).unwrap();
    let out = moe_oco(&["compare", "--trace", "t.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("n_experts"), "{}", stderr(&out));

    std::fs::write(dir.path().join("c.json"), r#"{"scenario":{"n_experts":1}}"#).unwrap();
    let out = moe_oco(&["compare", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn every_preset_runs_without_extra_flags() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["stationary-convex", "stationary-nonconvex", "nonstationary-convex", "nonstationary-nonconvex", "squint-vs-eg"] {
        let out = moe_oco(&["run", "--preset", preset, "--out", preset], dir.path());
        assert!(out.status.success(), "{preset}: {}", stderr(&out));
    }
}
