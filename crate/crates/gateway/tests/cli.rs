use std::path::Path;
use std::process::{Command, Output};

use copilot_core::config::ExperimentConfig;
use copilot_core::hil::{collect_demos, evaluate, run_hil};
use copilot_core::policy::train_base;
use copilot_gateway::pipeline::{load_policy, read_json, EvalSummary};

fn copilot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_copilot"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = copilot(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn hil_matches_in_process_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("hil");
    let stdout = ok(&[
        "hil", "--task", "peg_insert", "--k", "5", "--iters", "2", "--seed", "7", "--rollouts", "20", "--out", p(&out),
    ]);
    for col in ["Policy", "S1 (%)", "S2 (%)", "Total"] {
        assert!(stdout.contains(col), "{stdout}");
    }

    let mut cfg = ExperimentConfig::default();
    cfg.seed = 7;
    cfg.hil.seed = 7;
    cfg.hil.m = 20;
    let setup = cfg.setup().unwrap();
    let d0 = collect_demos(&setup, &cfg.expert, cfg.demos, cfg.seed).unwrap();
    let pi0 = train_base(&d0, &cfg.bc, &setup.session.chains.follower).unwrap();
    let run = run_hil(&d0, &pi0, &cfg.expert, &cfg.hil, &setup).unwrap();

    let (policy, dataset) = load_policy(&out.join("policy.json")).unwrap();
    assert_eq!(policy, run.policy);
    assert_eq!(dataset, run.dataset);
    let (base, _) = load_policy(&out.join("base/policy.json")).unwrap();
    assert_eq!(base, pi0);

    let seeds = cfg.hil.eval_seeds();
    let report: EvalSummary = read_json(&out.join("report.json")).unwrap();
    assert_eq!(report.reports[0], evaluate(&setup, &pi0, &seeds, "base").unwrap());
    assert_eq!(report.reports[1], evaluate(&setup, &run.policy, &seeds, "hil").unwrap());
}

#[test]
fn eval_report_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let pol = tmp.path().join("pol");
    ok(&["collect", "--episodes", "4", "--out", p(&data)]);
    ok(&["train", "--dataset", p(&data), "--out", p(&pol)]);
    let stdout = ok(&[
        "eval", "--policy", p(&pol.join("policy.json")), "--rollouts", "6", "--out", p(&tmp.path().join("eval")),
    ]);
    let header = stdout.lines().nth(1).unwrap();
    let cols: Vec<&str> = header.split("  ").map(str::trim).filter(|s| !s.is_empty()).collect();
    assert_eq!(cols, ["Policy", "S1 (%)", "S2 (%)", "Total", "n"]);
    let row = stdout.lines().nth(2).unwrap();
    assert!(row.starts_with("pol"), "{row}");
    assert!(row.trim_end().ends_with('6'));
}

#[test]
fn usage_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(!copilot(&["collect", "--episodes", "many"]).status.success());
    assert!(!copilot(&["launch"]).status.success());
    assert!(!copilot(&["hil", "--dataset", "x"]).status.success());
    let o = copilot(&["train", "--dataset", p(&tmp.path().join("missing")), "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    let o = copilot(&["collect", "--task", "juggling", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"alpha": -2}"#).unwrap();
    assert_eq!(copilot(&["collect", "--config", p(&cfg)]).status.code(), Some(1));
}

#[test]
fn failed_check_sets_exit_status() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("flat.json");
    // equal scales cannot show the precision gain
    std::fs::write(
        &cfg,
        r#"{"demos": 3, "hil": {"k": 1, "n": 1}, "scaling": {"alpha_fine": 1.0, "alpha_coarse": 1.0}}"#,
    )
    .unwrap();
    let o = copilot(&["metrics", "--config", p(&cfg), "--trials", "4", "--check", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL coarse/fine ratio"));
}
