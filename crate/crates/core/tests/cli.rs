use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn odd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odd"))
        .current_dir(dir)
        .env_remove("ODD_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn output_lines(o: &Output) -> Vec<String> {
    stdout(o)
        .lines()
        .filter(|l| l.contains(':'))
        .map(|l| l.split(':').nth(1).unwrap().trim().trim_end_matches("correct").trim_end_matches("wrong").trim().to_string())
        .collect()
}

const SMALL: [&str; 2] = ["--set", "task.problems=1"];

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = odd(dir.path(), &["generate", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);
}

#[test]
fn greedy_baseline_repeats_one_answer() {
    let dir = tempfile::tempdir().unwrap();
    let o = odd(dir.path(), &["generate", SMALL[0], SMALL[1]]);
    assert_eq!(o.status.code(), Some(0));
    let lines = output_lines(&o);
    assert_eq!(lines.len(), 16);
    assert!(lines.iter().all(|l| l == &lines[0]));
}

#[test]
fn odd_guidance_spreads_greedy_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = odd(dir.path(), &["generate", SMALL[0], SMALL[1], "--set", "guidance=odd", "--set", "alpha=16"]);
    assert_eq!(o.status.code(), Some(0));
    let mut lines = output_lines(&o);
    lines.sort();
    lines.dedup();
    assert!(lines.len() >= 2, "{lines:?}");
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate", SMALL[0], SMALL[1], "--set", "guidance=odd", "--set", "alpha=8", "--set", "temperature=1"];
    assert_eq!(stdout(&odd(dir.path(), &args)), stdout(&odd(dir.path(), &args)));
}

#[test]
fn overrides_beat_the_file_and_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"schema": 1, "alpha": 2, "seed": 3, "task": {"problems": 1}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_odd"))
        .current_dir(dir.path())
        .env("ODD_SEED", "9")
        .args(["generate", "--config", "c.json", "--set", "alpha=5", "--set", "guidance=odd", "--out", "res"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("res/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["alpha"], 5.0);
    assert_eq!(echoed["seed"], 9);
    let reports: Vec<_> = fs::read_dir(dir.path().join("res/reports")).unwrap().collect();
    assert_eq!(reports.len(), 1);
}

#[test]
fn bad_overrides_exit_with_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["generate", "--set", "unknown_key=1"],
        vec!["generate", "--set", "alpha=[1,2]"],
        vec!["generate", "--set", "schema=7"],
        vec!["replay", "--set", "task.problems=1"],
    ] {
        assert_eq!(odd(dir.path(), &args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn gradcheck_passes_and_detects_a_flipped_vjp() {
    let dir = tempfile::tempdir().unwrap();
    let o = odd(dir.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    for line in stdout(&o).lines() {
        let err: f64 = line.split("worst_rel_err=").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
        assert!(err <= 1e-5, "{line}");
    }
    let o = odd(dir.path(), &["gradcheck", "--inject-fault", "vjp-sign-flip", "--set", "gradcheck.instances=20"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn record_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let rec = odd(dir.path(), &["generate", SMALL[0], SMALL[1], "--set", "record=run.oddt", "--set", "temperature=1"]);
    assert_eq!(rec.status.code(), Some(0));
    let task = r#"task={"kind":"replay","path":"run.oddt"}"#;
    let rep = odd(dir.path(), &["replay", "--set", task, "--set", "temperature=1"]);
    assert_eq!(rep.status.code(), Some(0), "{}", String::from_utf8_lossy(&rep.stderr));
    assert_eq!(output_lines(&rec), output_lines(&rep));
}

#[test]
fn invariance_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = odd(
        dir.path(),
        &["invariance", SMALL[0], SMALL[1], "--set", r#"guidance=["none","odd"]"#, "--set", "alpha=16", "--set", "seed=[0,1]"],
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).matches("invariant").count(), 4);
}

#[test]
fn report_rebuilds_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let grid = odd(
        dir.path(),
        &[
            "grid",
            "--set",
            "task.problems=2",
            "--set",
            r#"guidance=["none","odd"]"#,
            "--set",
            "alpha=[0,16]",
            "--set",
            "seed=[0,1]",
            "--jobs",
            "2",
        ],
    );
    assert_eq!(grid.status.code(), Some(0), "{}", String::from_utf8_lossy(&grid.stderr));
    let out = dir.path().join("out");
    let first = fs::read_to_string(out.join("pass_at_k.csv")).unwrap();
    assert!(first.starts_with("guidance,theta,alpha,k,mean,se,n"));

    fs::write(out.join("reports/garbage.json"), "{not json").unwrap();
    let o = odd(dir.path(), &["report"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("garbage.json"));
    assert_eq!(fs::read_to_string(out.join("pass_at_k.csv")).unwrap(), first);
    let svg = fs::read_to_string(out.join("pareto.svg")).unwrap();
    assert_eq!(svg.matches("class=\"series\"").count(), 2);

    fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(odd(dir.path(), &["report", "empty"]).status.code(), Some(2));
}

#[test]
fn profile_writes_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = odd(dir.path(), &["profile", SMALL[0], SMALL[1], "--set", "guidance=odd", "--set", "alpha=8", "--set", "profile.repeats=1"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/profile.json")).unwrap()).unwrap();
    assert!(v["hook_seconds"].as_f64().unwrap() > 0.0);
}
