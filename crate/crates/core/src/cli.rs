//! Command-line surface: `run`, `resume`, `report`, `verify`, `bench-seed`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::evaluation_pipeline::{
    evaluate_seed, load_config, parse_config, replay_frontier, Evolution, RunConfig, RunError, RunSummary,
    SubprocessHarness,
};
use crate::integrity_guard::{verify_report, Verdict};
use crate::lm_gateway::LmGateway;
use crate::program_store::persist::{load_committed, JournalEvent, RunDir, RunLock, JOURNAL_FILE};
use crate::telemetry::{parse_metrics, render_run_report};

pub const EXIT_OK: i32 = 0;
/// A candidate-level failure: failing seed, rejected report.
pub const EXIT_CANDIDATE: i32 = 1;
/// Configuration, I/O, harness launch or provider failure.
pub const EXIT_INFRA: i32 = 2;

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_COPY: &str = "config.toml";
pub const COMPLETIONS_LOG: &str = "completions.ndjson";

#[derive(Parser, Debug)]
#[command(name = "evoforge", version, about = "Evolutionary search over training programs")]
pub struct Cli {
    /// Directory holding one subdirectory per run.
    #[arg(long, global = true, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Start a new run.
    Run {
        config: PathBuf,
        /// Name for the run directory; generated when omitted.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Continue an interrupted run from its last committed generation.
    Resume {
        run_id: String,
        /// Use this config instead of the copy stored with the run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        allow_config_change: bool,
    },
    /// Print category counts, frontier trajectory and top programs.
    Report {
        run_id: String,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Check one metrics report against a config's protected parameters.
    Verify { metrics: PathBuf, config: PathBuf },
    /// Evaluate the seed program only.
    BenchSeed { config: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Ndjson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Interrupted,
    Complete,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHandle {
    pub run_id: String,
    pub root_path: PathBuf,
    pub state: RunState,
    pub config_digest: String,
}

impl RunHandle {
    fn path(root: &Path) -> PathBuf {
        root.join(RUN_FILE)
    }

    pub fn load(root: &Path) -> anyhow::Result<Self> {
        let path = Self::path(root);
        let bytes = fs::read(&path).with_context(|| format!("no run at {}", root.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("corrupt {}", path.display()))
    }

    pub fn save(&self) -> anyhow::Result<()> {
        let path = Self::path(&self.root_path);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }
}

/// An error carrying the exit code it should produce.
#[derive(Debug)]
struct Exit {
    code: i32,
    error: anyhow::Error,
}

fn infra(error: impl Into<anyhow::Error>) -> Exit {
    Exit {
        code: EXIT_INFRA,
        error: error.into(),
    }
}

fn run_error(e: RunError) -> Exit {
    let code = match e {
        RunError::SeedFailed(_) => EXIT_CANDIDATE,
        _ => EXIT_INFRA,
    };
    Exit { code, error: e.into() }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INFRA } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match dispatch(&cli) {
        Ok(code) => code,
        Err(Exit { code, error }) => {
            eprintln!("error: {error:#}");
            code
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn dispatch(cli: &Cli) -> Result<i32, Exit> {
    match &cli.command {
        Command::Run { config, run_id } => cmd_run(&cli.runs_dir, config, run_id.as_deref()),
        Command::Resume {
            run_id,
            config,
            allow_config_change,
        } => cmd_resume(&cli.runs_dir, run_id, config.as_deref(), *allow_config_change),
        Command::Report { run_id, format } => cmd_report(&cli.runs_dir, run_id, *format),
        Command::Verify { metrics, config } => cmd_verify(metrics, config),
        Command::BenchSeed { config } => cmd_bench_seed(config),
    }
}

fn generated_run_id(config: &RunConfig) -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    format!("run-{secs}-{}", &config.digest()[..8])
}

fn build_components(config: &RunConfig, root: &Path) -> Result<(LmGateway, SubprocessHarness), Exit> {
    let lm = LmGateway::from_config(&config.model)
        .and_then(|g| g.with_log(&root.join(COMPLETIONS_LOG)))
        .map_err(infra)?;
    let harness = SubprocessHarness::new(config.harness.clone(), &config.protected).map_err(infra)?;
    Ok((lm, harness))
}

fn finish(handle: &mut RunHandle, result: Result<RunSummary, RunError>) -> Result<i32, Exit> {
    match result {
        Ok(summary) => {
            handle.state = RunState::Complete;
            handle.save().map_err(infra)?;
            print_summary(&handle.run_id, &summary);
            Ok(EXIT_OK)
        }
        Err(e) => {
            handle.state = RunState::Interrupted;
            let _ = handle.save();
            Err(run_error(e))
        }
    }
}

fn print_summary(run_id: &str, s: &RunSummary) {
    let best = s.frontier.best_score.map_or("none".to_string(), |b| format!("{b:.6}"));
    let time = s
        .frontier
        .best_time_at_threshold
        .map_or("none".to_string(), |t| format!("{t:.6} s"));
    println!(
        "run {run_id}: {} generations, {} programs, {} LM calls; best score {best}, best time at threshold {time}",
        s.generations.len(),
        s.programs,
        s.lm_calls
    );
    if !s.degraded_generations.is_empty() {
        println!("degraded generations: {:?}", s.degraded_generations);
    }
}

fn cmd_run(runs_dir: &Path, config_path: &Path, run_id: Option<&str>) -> Result<i32, Exit> {
    let config = load_config(config_path).map_err(infra)?;
    let run_id = run_id.map_or_else(|| generated_run_id(&config), str::to_string);
    let root = runs_dir.join(&run_id);
    if root.exists() {
        return Err(infra(anyhow!("run directory {} already exists", root.display())));
    }
    fs::create_dir_all(&root).map_err(infra)?;
    let root = fs::canonicalize(&root).map_err(infra)?;
    let _lock = RunLock::acquire(&root).map_err(infra)?;
    fs::write(root.join(CONFIG_COPY), config.to_toml()).map_err(infra)?;
    let mut handle = RunHandle {
        run_id: run_id.clone(),
        root_path: root.clone(),
        state: RunState::Running,
        config_digest: config.digest(),
    };
    handle.save().map_err(infra)?;
    println!("run {run_id} in {}", root.display());

    let (lm, harness) = build_components(&config, &root)?;
    let result = Evolution::start(&config, &root, &lm, &harness).and_then(|mut evo| evo.run_to_completion());
    finish(&mut handle, result)
}

fn cmd_resume(runs_dir: &Path, run_id: &str, config_path: Option<&Path>, allow_change: bool) -> Result<i32, Exit> {
    let root = fs::canonicalize(runs_dir.join(run_id))
        .with_context(|| format!("no run `{run_id}` under {}", runs_dir.display()))
        .map_err(infra)?;
    let _lock = RunLock::acquire(&root).map_err(infra)?;
    let mut handle = RunHandle::load(&root).map_err(infra)?;
    let config = match config_path {
        Some(p) => load_config(p).map_err(infra)?,
        None => stored_config(&root).map_err(infra)?,
    };
    let digest = config.digest();
    let changed = digest != handle.config_digest;
    if changed && !allow_change {
        return Err(infra(anyhow!(
            "config digest {} does not match the run's {}; pass --allow-config-change to continue anyway",
            &digest[..12],
            &handle.config_digest[..12.min(handle.config_digest.len())]
        )));
    }

    let (lm, harness) = build_components(&config, &root)?;
    let mut evo = match Evolution::resume(&config, &root, &lm, &harness) {
        Ok(e) => e,
        Err(e) => return finish(&mut handle, Err(e)),
    };
    if changed {
        let message = format!("config changed on resume: {} -> {}", handle.config_digest, digest);
        log::warn!("{message}");
        let generation = evo.next_cycle() + 1;
        evo.run_store_mut()
            .append(&JournalEvent::Warning {
                generation,
                program: None,
                message,
            })
            .map_err(infra)?;
        fs::write(root.join(CONFIG_COPY), config.to_toml()).map_err(infra)?;
        handle.config_digest = digest;
    }
    handle.state = RunState::Running;
    handle.save().map_err(infra)?;
    println!("resuming {run_id} at generation {}", evo.next_cycle() + 1);
    let result = evo.run_to_completion();
    finish(&mut handle, result)
}

fn stored_config(root: &Path) -> anyhow::Result<RunConfig> {
    let path = root.join(CONFIG_COPY);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(parse_config(&text)?)
}

fn cmd_report(runs_dir: &Path, run_id: &str, format: ReportFormat) -> Result<i32, Exit> {
    let root = runs_dir.join(run_id);
    if !root.join(JOURNAL_FILE).exists() {
        return Err(infra(anyhow!("no journal for run `{run_id}` under {}", runs_dir.display())));
    }
    let config = stored_config(&root).map_err(infra)?;
    let (store, _) = load_committed(&RunDir::new(&root), config.store_config()).map_err(infra)?;
    let report = render_run_report(&store, &replay_frontier(&store));
    match format {
        ReportFormat::Text => print!("{}", report.to_text()),
        ReportFormat::Ndjson => print!("{}", report.to_ndjson()),
    }
    Ok(EXIT_OK)
}

fn cmd_verify(metrics: &Path, config_path: &Path) -> Result<i32, Exit> {
    let config = load_config(config_path).map_err(infra)?;
    let bytes = fs::read(metrics)
        .with_context(|| format!("cannot read {}", metrics.display()))
        .map_err(infra)?;
    let report = match parse_metrics(&bytes) {
        Ok(r) => r,
        Err(e) => {
            println!("invalid report: {e}");
            return Ok(EXIT_CANDIDATE);
        }
    };
    match verify_report(&report, &config.protected) {
        Verdict::Ok => {
            println!("ok");
            Ok(EXIT_OK)
        }
        Verdict::Violations(v) => {
            for slot in v {
                println!("violation: {slot}");
            }
            Ok(EXIT_CANDIDATE)
        }
    }
}

fn cmd_bench_seed(config_path: &Path) -> Result<i32, Exit> {
    let config = load_config(config_path).map_err(infra)?;
    let harness = SubprocessHarness::new(config.harness.clone(), &config.protected).map_err(infra)?;
    let scratch = std::env::temp_dir().join(format!("evoforge-bench-{}", std::process::id()));
    let (a, wall) = evaluate_seed(&config, &harness, &scratch).map_err(run_error)?;
    let m = a.metrics.as_ref().expect("scored assessment has metrics");
    println!("status: {}", a.status.as_str());
    println!("score: {:.9}", a.score.unwrap_or_default());
    println!("final_val_loss: {:.6}", m.final_val_loss);
    println!("step_avg_time: {:.9} s", m.step_avg_time);
    println!("total_train_time: {:.6} s", m.total_train_time);
    println!("wall_time: {wall:.3} s");
    if a.suspicious {
        println!("warning: validation loss is suspiciously low");
    }
    Ok(EXIT_OK)
}
