mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::*;

fn evoforge(runs: &Path, args: &[&str]) -> Output {
    Command::new(CLI).arg("--runs-dir").arg(runs).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn run_with_missing_config_is_infrastructure_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = evoforge(&dir.path().join("runs"), &["run", "nowhere.toml"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.toml"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&evoforge(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&evoforge(dir.path(), &["report", "missing-run"])), 2);
}

#[test]
fn seed_only_run_reports_and_reports_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let (config, _) = toy_config(dir.path(), 1, 2, 0, &[]);
    let out = evoforge(&runs, &["run", config.to_str().unwrap(), "--run-id", "seedonly"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let first = evoforge(&runs, &["report", "seedonly"]);
    assert_eq!(code(&first), 0);
    assert!(text(&first).contains("Frontier trajectory"));
    assert_eq!(first.stdout, evoforge(&runs, &["report", "seedonly"]).stdout);

    let nd = evoforge(&runs, &["report", "seedonly", "--format", "ndjson"]);
    assert_eq!(code(&nd), 0);
    for line in text(&nd).lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    let handle: serde_json::Value = serde_json::from_slice(&fs::read(runs.join("seedonly/run.json")).unwrap()).unwrap();
    assert_eq!(handle["state"], "complete");

    let again = evoforge(&runs, &["run", config.to_str().unwrap(), "--run-id", "seedonly"]);
    assert_eq!(code(&again), 2, "existing run directory must not be reused");
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = toy_config(dir.path(), 1, 2, 1, &[]);
    let config = config.to_str().unwrap();
    let honest = fixture("metrics_seed.json");
    let out = evoforge(dir.path(), &["verify", honest.to_str().unwrap(), config]);
    assert_eq!(code(&out), 0);

    let mut tampered: serde_json::Value = serde_json::from_slice(&fs::read(&honest).unwrap()).unwrap();
    tampered["attestation"]["attested"]["val_seq_len"] = 8.into();
    let path = dir.path().join("tampered.json");
    fs::write(&path, serde_json::to_vec(&tampered).unwrap()).unwrap();
    let out = evoforge(dir.path(), &["verify", path.to_str().unwrap(), config]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains("violation: val_seq_len"), "{}", text(&out));

    let unattested = fixture("metrics_no_attestation.json");
    let out = evoforge(dir.path(), &["verify", unattested.to_str().unwrap(), config]);
    assert_eq!(code(&out), 1);
    assert!(text(&out).contains("violation: no-attestation"));

    fs::write(&path, "{\"final_val_loss\": 1.0}").unwrap();
    assert_eq!(code(&evoforge(dir.path(), &["verify", path.to_str().unwrap(), config])), 1);
    assert_eq!(code(&evoforge(dir.path(), &["verify", "absent.json", config])), 2);
}

#[test]
fn bench_seed_prints_score() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _) = toy_config(dir.path(), 1, 2, 1, &[]);
    let out = evoforge(dir.path(), &["bench-seed", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(text(&out).contains("status: acceptable"), "{}", text(&out));

    let (forging, _) = toy_config(&dir.path().join("forging"), 1, 2, 1, &["--forge", "loss_fn_id=\"constant\""]);
    let out = evoforge(dir.path(), &["bench-seed", forging.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", text(&out));
}

/// Cuts the journal back to just after the commit of `generation`, then
/// appends a torn line as an interrupted writer would.
fn interrupt_after(journal: &Path, generation: u64) {
    let text = fs::read_to_string(journal).unwrap();
    let mut kept = String::new();
    for line in text.lines() {
        kept.push_str(line);
        kept.push('\n');
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["event"] == "generation_commit" && v["generation"] == generation {
            break;
        }
    }
    kept.push_str("{\"event\": \"insert\", \"rec");
    fs::write(journal, kept).unwrap();
}

fn commits(journal: &Path) -> Vec<u64> {
    fs::read_to_string(journal)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["event"] == "generation_commit")
        .map(|v| v["generation"].as_u64().unwrap())
        .collect()
}

#[test]
fn resume_continues_after_last_commit() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let (config, _) = toy_config(dir.path(), 3, 2, 2, &[]);
    let out = evoforge(&runs, &["run", config.to_str().unwrap(), "--run-id", "r"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let journal = runs.join("r/journal.ndjson");
    assert_eq!(commits(&journal), [0, 1, 2]);

    interrupt_after(&journal, 1);
    let out = evoforge(&runs, &["resume", "r"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(text(&out).contains("resuming r at generation 2"), "{}", text(&out));
    assert_eq!(commits(&journal), [0, 1, 2]);
    assert_eq!(code(&evoforge(&runs, &["report", "r"])), 0);
}

#[test]
fn resume_rejects_changed_config_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let (config, _) = toy_config(dir.path(), 3, 2, 1, &[]);
    assert_eq!(code(&evoforge(&runs, &["run", config.to_str().unwrap(), "--run-id", "r"])), 0);
    let journal = runs.join("r/journal.ndjson");
    interrupt_after(&journal, 0);

    let (changed, _) = toy_config(&dir.path().join("changed"), 4, 2, 1, &[]);
    let changed = changed.to_str().unwrap();
    let out = evoforge(&runs, &["resume", "r", "--config", changed]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--allow-config-change"));

    let out = evoforge(&runs, &["resume", "r", "--config", changed, "--allow-config-change"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(&journal).unwrap();
    assert!(log.contains("config changed on resume"));
    assert_eq!(commits(&journal), [0, 1]);
}
