//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use evoforge::evaluation_pipeline::{load_config, RunConfig};
use evoforge::program_store::{Origin, ProgramId, ProgramRecord, ProgramStatus};
use evoforge::telemetry::{parse_metrics, MetricsReport};

pub const STUB: &str = env!("CARGO_BIN_EXE_evoforge-stub-harness");
pub const CLI: &str = env!("CARGO_BIN_EXE_evoforge");

pub fn asset(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(rel)
}

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

pub fn seed_source() -> String {
    fs::read_to_string(asset("toy/seed.cfg")).unwrap()
}

/// A seed with extra lines inserted before the end marker.
pub fn seed_with(lines: &str) -> String {
    seed_source().replace("# end of hyperparameters", &format!("{lines}\n# end of hyperparameters"))
}

/// Config text for the toy task driven by the stub harness.
pub fn toy_config_text(seed: u64, branching: usize, generations: u64, extra_harness_args: &[&str]) -> String {
    let mut command = vec![format!("{STUB:?}")];
    command.extend(extra_harness_args.iter().map(|a| format!("{a:?}")));
    command.extend(["\"{candidate_path}\"", "\"{manifest_path}\"", "\"{metrics_out}\"", "\"{mode}\""].map(String::from));
    format!(
        r#"seed = {seed}
branching_factor = {branching}
max_iterations = {generations}
deterministic = true

[model]
provider = "scripted"
script_path = {script:?}

[harness]
command = [{command}]
seed_program = {seed_program:?}
fast_check_timeout_secs = 2.0
"#,
        script = asset("toy/script.ndjson"),
        command = command.join(", "),
        seed_program = asset("toy/seed.cfg"),
    )
}

/// Writes a toy config into `dir` and loads it.
pub fn toy_config(dir: &Path, seed: u64, branching: usize, generations: u64, extra: &[&str]) -> (PathBuf, RunConfig) {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("evoforge.toml");
    fs::write(&path, toy_config_text(seed, branching, generations, extra)).unwrap();
    let cfg = load_config(&path).unwrap();
    (path, cfg)
}

/// The honest seed report with loss and step time replaced.
pub fn report(loss: f64, step_avg: f64) -> MetricsReport {
    let mut r = parse_metrics(&fs::read(fixture("metrics_seed.json")).unwrap()).unwrap();
    r.final_val_loss = loss;
    r.step_avg_time = step_avg;
    r
}

pub fn scored_record(id: u64, island: usize, score: f64) -> ProgramRecord {
    ProgramRecord {
        id: ProgramId(id),
        parent_id: None,
        island_id: island,
        generation: 1,
        source: format!("program {id}\n"),
        status: ProgramStatus::Acceptable,
        metrics: Some(report(1.0, score)),
        score: Some(score),
        created_at: 0,
        origin: Origin::Child,
    }
}

pub fn buggy_record(id: u64, island: usize) -> ProgramRecord {
    ProgramRecord {
        status: ProgramStatus::Buggy,
        metrics: None,
        score: None,
        ..scored_record(id, island, 0.0)
    }
}
