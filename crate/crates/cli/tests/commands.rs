use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const DEFAULT: &str = include_str!("../../../configs/default.toml");

fn vrloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrloop")).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

/// Default config with a short budget and a small held-out set.
fn quick_config(dir: &Path, edits: &[(&str, &str)]) -> PathBuf {
    let mut cfg =
        DEFAULT.replace("prompt_budget = 500", "prompt_budget = 64").replace("heldout_per_category = 300", "heldout_per_category = 20");
    for (from, to) in edits {
        assert!(cfg.contains(from), "{from}");
        cfg = cfg.replace(from, to);
    }
    let path = dir.join("run.toml");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn stream_writes_logs_and_report_recomputes_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), &[]);
    let out = tmp.path().join("run");
    let o = vrloop(&["stream", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    for f in ["metrics.jsonl", "train.jsonl", "summary.csv", "checkpoint.bin", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "category,baseline_rate,trained_rate,delta,pairs,sessions");
    assert_eq!(rows.len(), 8);
    assert!(rows[7].starts_with("overall,") && rows[7].ends_with(",2"), "{}", rows[7]);
    assert!(text(&o).contains("64 prompts"));

    let r = vrloop(&["report", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", text(&r));
    let report = text(&r);
    assert!(report.contains("identities hold"));
    assert!(report.contains("sessions"));
    assert!(report.contains("overall"));
}

#[test]
fn stream_refuses_non_empty_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), &[]);
    let o = vrloop(&["stream", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("not empty"));
}

#[test]
fn missing_tau_exits_2_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), &[("tau = 0.95", "")]);
    let o = vrloop(&["stream", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("verifier.tau"), "{}", text(&o));
}

#[test]
fn unreadable_config_exits_2() {
    let o = vrloop(&["stream", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_clients_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), &[("clients = 4", "clients = 0")]);
    let o = vrloop(&["federated", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("f").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("federated.clients"));
}

#[test]
fn single_client_ledger_has_one_line_per_round_and_equivalence_holds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(
        tmp.path(),
        &[("clients = 4", "clients = 1"), ("rounds = 4", "rounds = 2"), ("check_equivalence = false", "check_equivalence = true")],
    );
    let out = tmp.path().join("fed");
    let o = vrloop(&["federated", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let ledger = fs::read_to_string(out.join("ledger.jsonl")).unwrap();
    assert_eq!(ledger.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(ledger.lines().next().unwrap()).unwrap();
    assert_eq!(first["round"], 0);
    assert!(first["clients"][0]["delta_norm"].is_number());
    assert!(text(&o).contains("single client vs centralized: identical"), "{}", text(&o));
}

#[test]
fn gradcheck_passes_by_default_and_catches_sign_flip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), &[("probes = 200", "probes = 40"), ("hidden = 64", "hidden = 16")]);
    let o = vrloop(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let t = text(&o);
    assert!(t.contains("dpo_as_written") && t.contains("ddpo_raw") && t.contains("ddpo_sigmoid"), "{t}");

    let cfg = quick_config(
        tmp.path(),
        &[("probes = 200", "probes = 40"), ("hidden = 64", "hidden = 16"), ("inject_sign_flip = false", "inject_sign_flip = true")],
    );
    let o = vrloop(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("worst in"));
}

#[test]
fn report_without_logs_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(vrloop(&["report", tmp.path().to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn async_mode_override_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), &[]);
    let out = tmp.path().join("a");
    let o = vrloop(&["stream", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--mode", "async"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let cfg_back = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg_back.contains("mode = \"async\""));
}

#[test]
fn bad_flag_is_a_usage_error() {
    assert_eq!(vrloop(&["stream", "--config", "x.toml", "--mode", "sideways"]).status.code(), Some(2));
}
