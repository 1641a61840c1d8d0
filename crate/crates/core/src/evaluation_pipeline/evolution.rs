//! Generation loop.
//!
//! Every child of a generation samples from the store as it stood when the
//! generation began, draws from its own RNG stream keyed by (seed,
//! generation, child index), and is inserted in index order once all
//! children finish. Together with a scripted model and a deterministic
//! harness this makes the journal a pure function of the configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::RunConfig;
use super::harness::{fast_check, Evaluator, FastResult, HarnessRun, InfraError, Mode};
use super::scoring::{classify, compute_score, is_suspicious};
use crate::integrity_guard::{verify_report, ProtectedParams};
use crate::lm_gateway::{LmError, LmGateway};
use crate::program_store::persist::{
    ChildEntry, ChildOutcome, JournalEvent, RepairAttemptEntry, Replay, RunDir, RunStore,
};
use crate::program_store::{Origin, ProgramId, ProgramRecord, ProgramStatus, ProgramStore, StoreError};
use crate::prompt_engine::{apply_edit_script, parse_edit_script, PromptEngine, PromptError, PromptKind};
use crate::telemetry::{CategoryCounts, ExitDisposition, FrontierState, GenerationRow, MetricsReport};

pub const SCRATCH_DIR: &str = "scratch";
pub const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("seed program failed evaluation: {0}")]
    SeedFailed(String),
    #[error(transparent)]
    Infrastructure(#[from] InfraError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("cannot read seed program {path}: {source}")]
    SeedIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run directory I/O failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frontier: FrontierState,
    pub generations: Vec<GenerationRow>,
    pub degraded_generations: Vec<u64>,
    pub lm_calls: u64,
    pub programs: usize,
}

/// Outcome of a full evaluation after integrity checks and scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub status: ProgramStatus,
    pub score: Option<f64>,
    pub metrics: Option<MetricsReport>,
    pub violations: Vec<String>,
    pub suspicious: bool,
    /// Set when the run produced no usable report.
    pub failure: Option<String>,
}

/// Turns a full harness run into a status, score and warnings.
pub fn assess(run: &HarnessRun, protected: &ProtectedParams) -> Assessment {
    let mut metrics = match &run.metrics {
        Ok(m) => m.clone(),
        Err(e) => {
            return Assessment {
                status: ProgramStatus::Buggy,
                score: None,
                metrics: None,
                violations: Vec::new(),
                suspicious: false,
                failure: Some(if run.disposition == ExitDisposition::Ok {
                    format!("metrics unusable: {e}")
                } else {
                    run.failure_text(None)
                }),
            }
        }
    };
    // The engine's view of the exit wins over what the report claims.
    if run.disposition != ExitDisposition::Ok {
        metrics.exit_disposition = run.disposition;
    }
    let verdict = verify_report(&metrics, protected);
    let status = classify(&metrics, &verdict, protected);
    let score = if status.is_scored() { compute_score(&metrics).ok() } else { None };
    let failure = (metrics.exit_disposition != ExitDisposition::Ok).then(|| run.failure_text(None));
    Assessment {
        status,
        score,
        suspicious: status.is_scored() && is_suspicious(&metrics, protected),
        violations: verdict.violations().to_vec(),
        metrics: Some(metrics),
        failure,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairAttempt {
    pub attempt: u32,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairReport {
    /// The first passing candidate, or the last error seen.
    pub result: Result<String, String>,
    /// Last candidate tried.
    pub source: String,
    pub attempts: Vec<RepairAttempt>,
    pub lm_calls: u32,
}

/// Up to `n_fast` rounds of repair prompt, completion, edit and fast check.
/// A round whose edits do not parse or apply still counts.
pub fn repair_loop(
    candidate: &str,
    error: &str,
    n_fast: u32,
    prompts: &PromptEngine,
    lm: &LmGateway,
    evaluator: &dyn Evaluator,
    dir: &Path,
) -> Result<RepairReport, InfraError> {
    let mut source = candidate.to_string();
    let mut last_error = error.to_string();
    let mut attempts = Vec::new();
    let mut lm_calls = 0;
    for attempt in 1..=n_fast {
        let bundle = prompts
            .build_repair_prompt(&source, &last_error)
            .map_err(|e| InfraError::Lm(e.to_string()))?;
        lm_calls += 1;
        let step = match lm.complete(&bundle) {
            Ok(c) => parse_edit_script(&c.response_text)
                .map_err(|e| format!("edit script rejected: {e}"))
                .and_then(|script| {
                    apply_edit_script(&source, &script).map_err(|e| format!("edit script did not apply: {e}"))
                }),
            Err(LmError::EmptyCompletion) => Err("model returned an empty completion".to_string()),
            Err(e) => return Err(InfraError::Lm(e.to_string())),
        };
        let outcome = match step {
            Ok(applied) => {
                source = applied.source;
                match fast_check(evaluator, &source, dir)? {
                    FastResult::Pass => None,
                    FastResult::Fail(e) => Some(e),
                }
            }
            Err(e) => Some(e),
        };
        let passed = outcome.is_none();
        attempts.push(RepairAttempt {
            attempt,
            passed,
            error: outcome.clone(),
        });
        match outcome {
            None => {
                return Ok(RepairReport {
                    result: Ok(source.clone()),
                    source,
                    attempts,
                    lm_calls,
                })
            }
            Some(e) => last_error = e,
        }
    }
    Ok(RepairReport {
        result: Err(last_error),
        source,
        attempts,
        lm_calls,
    })
}

/// RNG stream for one child. Streams never collide for fewer than 2^20
/// children per generation.
pub fn child_rng(seed: u64, generation: u64, child_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((generation << 20) | child_index as u64);
    rng
}

/// Island for a child: round-robin across the islands, continuing from
/// where the previous generation stopped.
pub fn child_island(cycle_index: u64, child_index: usize, branching_factor: usize, islands: usize) -> usize {
    (cycle_index as usize * branching_factor + child_index) % islands
}

struct ChildResult {
    record: ProgramRecord,
    entry: ChildEntry,
    repairs: Vec<RepairAttemptEntry>,
    warnings: Vec<String>,
    infrastructure: bool,
}

struct Ctx<'a> {
    config: &'a RunConfig,
    prompts: PromptEngine,
    lm: &'a LmGateway,
    evaluator: &'a dyn Evaluator,
    scratch: PathBuf,
}

impl Ctx<'_> {
    fn run_child(
        &self,
        snapshot: &ProgramStore,
        cycle: u64,
        index: usize,
        child_id: ProgramId,
    ) -> Result<ChildResult, RunError> {
        let cfg = self.config;
        let generation = cycle + 1;
        let mut rng = child_rng(cfg.seed, generation, index);
        let island = child_island(cycle, index, cfg.branching_factor, cfg.island_count);
        let parent = snapshot.sample_parent(island, &mut rng)?;
        let (top_ids, diverse_ids) =
            snapshot.sample_inspirations(cfg.top_count, cfg.diverse_count, Some(parent.id), &mut rng);
        let top: Vec<&ProgramRecord> = top_ids.iter().filter_map(|id| snapshot.get(*id)).collect();
        let diverse: Vec<&ProgramRecord> = diverse_ids.iter().filter_map(|id| snapshot.get(*id)).collect();

        let mut entry = ChildEntry {
            generation,
            child_index: index,
            island_id: island,
            parent_id: parent.id,
            child_id,
            prompt_kinds: Vec::new(),
            template_id: String::new(),
            top_ids,
            diverse_ids,
            lm_calls: 0,
            repair_attempts: 0,
            ambiguous_edit_blocks: Vec::new(),
            status: ProgramStatus::Buggy,
            outcome: ChildOutcome::Evaluated,
        };
        let mut result = ChildResult {
            record: ProgramRecord {
                id: child_id,
                parent_id: Some(parent.id),
                island_id: island,
                generation,
                source: String::new(),
                status: ProgramStatus::Buggy,
                metrics: None,
                score: None,
                created_at: 0,
                origin: Origin::Child,
            },
            entry: entry.clone(),
            repairs: Vec::new(),
            warnings: Vec::new(),
            infrastructure: false,
        };
        let dir = self.scratch.join(format!("g{generation:05}-c{index:03}"));
        let outcome = self.child_pipeline(parent, &top, &diverse, cycle, &dir, &mut rng, &mut entry, &mut result);
        let _ = fs::remove_dir_all(&dir);
        entry.outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                result.infrastructure = true;
                ChildOutcome::Infrastructure(e.to_string())
            }
        };
        entry.status = result.record.status;
        result.entry = entry;
        Ok(result)
    }

    #[allow(clippy::too_many_arguments)]
    fn child_pipeline(
        &self,
        parent: &ProgramRecord,
        top: &[&ProgramRecord],
        diverse: &[&ProgramRecord],
        cycle: u64,
        dir: &Path,
        rng: &mut ChaCha8Rng,
        entry: &mut ChildEntry,
        result: &mut ChildResult,
    ) -> Result<ChildOutcome, InfraError> {
        let cfg = self.config;

        let mut stage2 = None;
        if cycle >= cfg.meta_prompt_start_iteration {
            let (stage1, builder) = self.prompts.build_meta_prompts(parent, top, diverse, rng);
            entry.template_id = stage1.template_id.clone();
            entry.prompt_kinds.push(PromptKind::MetaIdea);
            entry.lm_calls += 1;
            let idea = match self.lm.complete(&stage1) {
                Ok(c) => c.response_text,
                Err(LmError::EmptyCompletion) => String::new(),
                Err(e) => return Err(InfraError::Lm(e.to_string())),
            };
            // An empty idea falls back to a direct prompt for this child.
            if let Ok(bundle) = builder.build(&idea) {
                entry.prompt_kinds.push(PromptKind::MetaImplement);
                stage2 = Some(bundle);
            }
        }
        let bundle = match stage2 {
            Some(b) => b,
            None => {
                let b = self.prompts.build_direct_prompt(parent, top, diverse, rng);
                entry.template_id = b.template_id.clone();
                entry.prompt_kinds.push(PromptKind::Direct);
                b
            }
        };
        entry.lm_calls += 1;
        let completion = self.lm.complete(&bundle);
        let response = match completion {
            Ok(c) => c.response_text,
            Err(LmError::EmptyCompletion) => return Ok(ChildOutcome::EmptyCompletion),
            Err(e) => return Err(InfraError::Lm(e.to_string())),
        };

        result.record.source = response.clone();
        let script = match parse_edit_script(&response) {
            Ok(s) => s,
            Err(e) => return Ok(ChildOutcome::EditParseFailed(e.to_string())),
        };
        let applied = match apply_edit_script(&parent.source, &script) {
            Ok(a) => a,
            Err(e) => return Ok(ChildOutcome::EditApplyFailed(e.to_string())),
        };
        if !applied.ambiguous_blocks.is_empty() {
            result.warnings.push(format!(
                "edit blocks {:?} matched more than once; first occurrence replaced",
                applied.ambiguous_blocks
            ));
        }
        entry.ambiguous_edit_blocks = applied.ambiguous_blocks;
        let mut candidate = applied.source;
        result.record.source = candidate.clone();

        if let FastResult::Fail(error) = fast_check(self.evaluator, &candidate, dir)? {
            let report = repair_loop(&candidate, &error, cfg.n_fast, &self.prompts, self.lm, self.evaluator, dir)?;
            entry.lm_calls += report.lm_calls;
            entry.repair_attempts = report.attempts.len() as u32;
            if !report.attempts.is_empty() {
                entry.prompt_kinds.push(PromptKind::Repair);
            }
            result.repairs = report
                .attempts
                .iter()
                .map(|a| RepairAttemptEntry {
                    generation: entry.generation,
                    child_index: entry.child_index,
                    attempt: a.attempt,
                    passed: a.passed,
                    error: a.error.clone(),
                })
                .collect();
            result.record.source = report.source.clone();
            match report.result {
                Ok(fixed) => candidate = fixed,
                Err(last) => return Ok(ChildOutcome::RepairExhausted(first_line(&last))),
            }
        }

        let run = self.evaluator.run(&candidate, Mode::Full, dir)?;
        let a = assess(&run, &cfg.protected);
        result.record.status = a.status;
        result.record.score = a.score;
        result.record.metrics = a.metrics;
        if !a.violations.is_empty() {
            result
                .warnings
                .push(format!("integrity violations: {}", a.violations.join(", ")));
        }
        if a.suspicious {
            result.warnings.push(format!(
                "suspiciously low validation loss {}",
                result.record.final_val_loss().unwrap_or_default()
            ));
        }
        Ok(match a.failure {
            Some(f) => ChildOutcome::EvaluationFailed(first_line(&f)),
            None => ChildOutcome::Evaluated,
        })
    }
}

fn first_line(text: &str) -> String {
    text.lines().next().unwrap_or_default().to_string()
}

/// Evaluates the seed program once and fails unless it is scored.
pub fn evaluate_seed(config: &RunConfig, evaluator: &dyn Evaluator, dir: &Path) -> Result<(Assessment, f64), RunError> {
    let source = read_seed(config)?;
    let run = evaluator.run(&source, Mode::Full, dir)?;
    let _ = fs::remove_dir_all(dir);
    let a = assess(&run, &config.protected);
    if !a.status.is_scored() {
        let why = a
            .failure
            .clone()
            .or_else(|| (!a.violations.is_empty()).then(|| format!("integrity violations: {}", a.violations.join(", "))))
            .unwrap_or_else(|| "no score".into());
        return Err(RunError::SeedFailed(why));
    }
    Ok((a, run.wall_secs))
}

fn read_seed(config: &RunConfig) -> Result<String, RunError> {
    let path = &config.harness.seed_program;
    fs::read_to_string(path).map_err(|source| RunError::SeedIo {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Calibration {
    seed_wall_secs: f64,
}

/// A run in progress: the persistent store plus everything derived from it.
pub struct Evolution<'a> {
    ctx: Ctx<'a>,
    run: RunStore,
    frontier: FrontierState,
    generations: Vec<GenerationRow>,
    degraded: Vec<u64>,
    lm_calls: u64,
    next_cycle: u64,
}

impl<'a> Evolution<'a> {
    /// Creates the run directory, evaluates the seed and seeds every island.
    pub fn start(
        config: &'a RunConfig,
        root: &Path,
        lm: &'a LmGateway,
        evaluator: &'a dyn Evaluator,
    ) -> Result<Self, RunError> {
        let prompts = PromptEngine::from_config(&config.prompts)?;
        let mut run = RunStore::create(RunDir::new(root), config.store_config())?;
        run.start(config.digest(), config.seed)?;
        let scratch = root.join(SCRATCH_DIR);
        let (seed, wall) = evaluate_seed(config, evaluator, &scratch.join("seed"))?;
        fs::write(
            root.join(CALIBRATION_FILE),
            serde_json::to_string(&Calibration { seed_wall_secs: wall }).expect("calibration serializes"),
        )?;
        evaluator.calibrate(wall);

        let source = read_seed(config)?;
        for island in 0..config.island_count {
            let id = run.allocate_id();
            run.insert(ProgramRecord {
                id,
                parent_id: None,
                island_id: island,
                generation: 0,
                source: source.clone(),
                status: seed.status,
                metrics: seed.metrics.clone(),
                score: seed.score,
                created_at: 0,
                origin: Origin::Seed,
            })?;
        }
        if seed.suspicious {
            run.append(&JournalEvent::Warning {
                generation: 0,
                program: None,
                message: "seed reports a suspiciously low validation loss".into(),
            })?;
        }
        run.commit(0, CategoryCounts::default(), false)?;
        let mut evo = Self::assemble(config, prompts, lm, evaluator, run, scratch);
        evo.rebuild_derived(&Replay::default());
        Ok(evo)
    }

    /// Reopens a run, dropping anything after the last committed generation.
    pub fn resume(
        config: &'a RunConfig,
        root: &Path,
        lm: &'a LmGateway,
        evaluator: &'a dyn Evaluator,
    ) -> Result<Self, RunError> {
        let prompts = PromptEngine::from_config(&config.prompts)?;
        let (run, replay) = RunStore::open(RunDir::new(root), config.store_config())?;
        if run.store().is_empty() {
            return Err(RunError::SeedFailed("run has no seed program; start a new run".into()));
        }
        match fs::read(root.join(CALIBRATION_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice::<Calibration>(&b).ok())
        {
            Some(c) => evaluator.calibrate(c.seed_wall_secs),
            None => {
                let (_, wall) = evaluate_seed(config, evaluator, &root.join(SCRATCH_DIR).join("seed"))?;
                evaluator.calibrate(wall);
            }
        }
        let scratch = root.join(SCRATCH_DIR);
        let _ = fs::remove_dir_all(&scratch);
        let mut evo = Self::assemble(config, prompts, lm, evaluator, run, scratch);
        evo.rebuild_derived(&replay);
        Ok(evo)
    }

    fn assemble(
        config: &'a RunConfig,
        prompts: PromptEngine,
        lm: &'a LmGateway,
        evaluator: &'a dyn Evaluator,
        run: RunStore,
        scratch: PathBuf,
    ) -> Self {
        Self {
            ctx: Ctx {
                config,
                prompts,
                lm,
                evaluator,
                scratch,
            },
            run,
            frontier: FrontierState::default(),
            generations: Vec::new(),
            degraded: Vec::new(),
            lm_calls: 0,
            next_cycle: 0,
        }
    }

    fn rebuild_derived(&mut self, replay: &Replay) {
        self.frontier = replay_frontier(self.run.store());
        for event in &replay.events {
            match event {
                JournalEvent::Child(c) => self.lm_calls += u64::from(c.lm_calls),
                JournalEvent::GenerationCommit {
                    generation,
                    counts,
                    degraded,
                } if *generation > 0 => {
                    self.generations.push(GenerationRow {
                        generation: *generation,
                        counts: *counts,
                    });
                    if *degraded {
                        self.degraded.push(*generation);
                    }
                }
                _ => {}
            }
        }
        self.next_cycle = replay.last_committed_generation.unwrap_or(0);
    }

    pub fn store(&self) -> &ProgramStore {
        self.run.store()
    }

    pub fn frontier(&self) -> &FrontierState {
        &self.frontier
    }

    pub fn run_store_mut(&mut self) -> &mut RunStore {
        &mut self.run
    }

    /// Index of the next cycle to run; equals the number of committed generations.
    pub fn next_cycle(&self) -> u64 {
        self.next_cycle
    }

    /// Runs one generation and commits it.
    pub fn run_generation(&mut self) -> Result<GenerationRow, RunError> {
        let cfg = self.ctx.config;
        let cycle = self.next_cycle;
        let generation = cycle + 1;
        let snapshot = self.run.store().clone();
        let ids: Vec<ProgramId> = (0..cfg.branching_factor).map(|_| self.run.allocate_id()).collect();

        let results = self.run_children(&snapshot, cycle, &ids)?;

        let mut counts = CategoryCounts::default();
        let mut infra = 0;
        for r in results {
            for rep in r.repairs {
                self.run.append(&JournalEvent::RepairAttempt(rep))?;
            }
            let id = r.record.id;
            self.run.insert(r.record)?;
            self.run.append(&JournalEvent::Child(r.entry.clone()))?;
            for message in r.warnings {
                self.run.append(&JournalEvent::Warning {
                    generation,
                    program: Some(id),
                    message,
                })?;
            }
            let inserted = self.run.store().get(id).expect("just inserted");
            self.frontier.observe(inserted);
            counts.add(inserted.status);
            self.lm_calls += u64::from(r.entry.lm_calls);
            infra += usize::from(r.infrastructure);
        }
        self.run.migrate(generation)?;
        let degraded = infra * 2 >= cfg.branching_factor && infra > 0;
        self.run.commit(generation, counts, degraded)?;
        if degraded {
            log::warn!("generation {generation} degraded: {infra} infrastructure failures");
            self.degraded.push(generation);
        }
        let row = GenerationRow { generation, counts };
        self.generations.push(row.clone());
        self.next_cycle += 1;
        Ok(row)
    }

    fn run_children(&self, snapshot: &ProgramStore, cycle: u64, ids: &[ProgramId]) -> Result<Vec<ChildResult>, RunError> {
        let workers = self.ctx.config.workers();
        if workers == 1 {
            return ids
                .iter()
                .enumerate()
                .map(|(i, id)| self.ctx.run_child(snapshot, cycle, i, *id))
                .collect();
        }
        let slots: Vec<Mutex<Option<Result<ChildResult, RunError>>>> = ids.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= ids.len() {
                        break;
                    }
                    let r = self.ctx.run_child(snapshot, cycle, i, ids[i]);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every child slot filled"))
            .collect()
    }

    /// Runs the remaining generations up to `max_iterations`.
    pub fn run_to_completion(&mut self) -> Result<RunSummary, RunError> {
        while self.next_cycle < self.ctx.config.max_iterations {
            let row = self.run_generation()?;
            log::info!(
                "generation {}: {} buggy, {} over threshold, {} acceptable; best score {:?}",
                row.generation,
                row.counts.buggy,
                row.counts.over_threshold,
                row.counts.acceptable,
                self.frontier.best_score
            );
        }
        let _ = fs::remove_dir_all(&self.ctx.scratch);
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            frontier: self.frontier.clone(),
            generations: self.generations.clone(),
            degraded_generations: self.degraded.clone(),
            lm_calls: self.lm_calls,
            programs: self.run.store().len(),
        }
    }
}

/// Frontier of a store, folding records in insertion order.
pub fn replay_frontier(store: &ProgramStore) -> FrontierState {
    let mut records: Vec<&ProgramRecord> = store.records().collect();
    records.sort_by_key(|r| r.created_at);
    let mut frontier = FrontierState::default();
    for r in records {
        frontier.observe(r);
    }
    frontier
}

/// Starts a run in `root` and executes every generation.
pub fn run_evolution(
    config: &RunConfig,
    root: &Path,
    lm: &LmGateway,
    evaluator: &dyn Evaluator,
) -> Result<RunSummary, RunError> {
    Evolution::start(config, root, lm, evaluator)?.run_to_completion()
}

/// Continues the run in `root` from its last committed generation.
pub fn resume_evolution(
    config: &RunConfig,
    root: &Path,
    lm: &LmGateway,
    evaluator: &dyn Evaluator,
) -> Result<RunSummary, RunError> {
    Evolution::resume(config, root, lm, evaluator)?.run_to_completion()
}
