use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrity_guard::ProtectedParams;
use crate::lm_gateway::ModelConfig;
use crate::program_store::persist::sha256_hex;
use crate::program_store::StoreConfig;
use crate::prompt_engine::PromptConfig;

pub const CANDIDATE_PATH: &str = "{candidate_path}";
pub const MANIFEST_PATH: &str = "{manifest_path}";
pub const METRICS_OUT: &str = "{metrics_out}";
pub const MODE: &str = "{mode}";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    /// Harness argv. Elements may contain `{candidate_path}`,
    /// `{manifest_path}`, `{metrics_out}` and `{mode}`.
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub working_dir: Option<PathBuf>,
    pub seed_program: PathBuf,
    #[serde(default = "default_fast_timeout")]
    pub fast_check_timeout_secs: f64,
    #[serde(default = "default_fast_steps")]
    pub fast_check_steps: u64,
    /// Leading steps the harness leaves out of the step-time average.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub exclude_warmup_steps: u64,
    /// Unset means three times the seed's measured full-evaluation time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_eval_timeout_secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_limit_mb: Option<u64>,
    #[serde(default)]
    pub no_network: bool,
    /// File name of the metrics output inside the evaluation directory.
    #[serde(default = "default_metrics_file")]
    pub metrics_file: String,
}

fn is_zero(n: &u64) -> bool {
    *n == 0
}
fn default_fast_timeout() -> f64 {
    60.0
}
fn default_fast_steps() -> u64 {
    20
}
fn default_metrics_file() -> String {
    "metrics-{mode}.json".into()
}

fn default_branching() -> usize {
    10
}
fn default_n_fast() -> u32 {
    3
}
fn default_meta_start() -> u64 {
    20
}
fn default_max_iterations() -> u64 {
    90
}
fn default_top_count() -> usize {
    3
}
fn default_diverse_count() -> usize {
    2
}
fn default_islands() -> usize {
    4
}
fn default_archive() -> usize {
    20
}
fn default_migration_interval() -> u64 {
    10
}
fn default_p_elite() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_branching")]
    pub branching_factor: usize,
    #[serde(default = "default_n_fast")]
    pub n_fast: u32,
    #[serde(default = "default_meta_start")]
    pub meta_prompt_start_iteration: u64,
    /// Number of generations.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u64,
    #[serde(default = "default_top_count")]
    pub top_count: usize,
    #[serde(default = "default_diverse_count")]
    pub diverse_count: usize,
    #[serde(default = "default_islands")]
    pub island_count: usize,
    #[serde(default = "default_archive")]
    pub archive_capacity: usize,
    #[serde(default = "default_migration_interval")]
    pub migration_interval: u64,
    #[serde(default = "default_p_elite")]
    pub p_elite: f64,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate children one at a time in index order.
    #[serde(default)]
    pub deterministic: bool,
    pub model: ModelConfig,
    pub harness: HarnessConfig,
    #[serde(default)]
    pub protected: ProtectedParams,
    #[serde(default)]
    pub prompts: PromptConfig,
}

impl RunConfig {
    pub fn store_config(&self) -> StoreConfig {
        StoreConfig {
            island_count: self.island_count,
            archive_capacity: self.archive_capacity,
            p_elite: self.p_elite,
            migration_interval: self.migration_interval,
        }
    }

    /// Concurrent child pipelines.
    pub fn workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.model.max_in_flight.unwrap_or(self.branching_factor).clamp(1, self.branching_factor)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.branching_factor == 0 {
            return fail("branching_factor must be positive");
        }
        if self.island_count == 0 {
            return fail("island_count must be positive");
        }
        if self.archive_capacity == 0 {
            return fail("archive_capacity must be positive");
        }
        if self.migration_interval == 0 {
            return fail("migration_interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_elite) {
            return fail("p_elite must lie in [0, 1]");
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.protected.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.harness.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the compact, key-sorted JSON form.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        sha256_hex(value.to_string().as_bytes())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.harness.seed_program);
        // A bare program name is looked up on PATH; anything with a separator is a path.
        if let Some(program) = self.harness.command.first_mut() {
            if program.contains('/') && Path::new(program.as_str()).is_relative() {
                *program = base.join(program.as_str()).to_string_lossy().into_owned();
            }
        }
        if let Some(wd) = self.harness.working_dir.as_mut() {
            fix(wd);
        }
        if let Some(sp) = self.model.script_path.as_mut() {
            fix(sp);
        }
        for t in &mut self.prompts.template_files {
            fix(t);
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.command.is_empty() || self.command[0].trim().is_empty() {
            return fail("harness.command must name a program".into());
        }
        for placeholder in [CANDIDATE_PATH, MANIFEST_PATH, METRICS_OUT, MODE] {
            if !self.command.iter().any(|a| a.contains(placeholder)) {
                return fail(format!("harness.command must use {placeholder}"));
            }
        }
        if !(self.fast_check_timeout_secs > 0.0 && self.fast_check_timeout_secs.is_finite()) {
            return fail("harness.fast_check_timeout_secs must be positive".into());
        }
        if self.fast_check_steps == 0 {
            return fail("harness.fast_check_steps must be positive".into());
        }
        if let Some(full) = self.full_eval_timeout_secs {
            if !(full.is_finite() && full > self.fast_check_timeout_secs) {
                return fail("harness.full_eval_timeout_secs must exceed fast_check_timeout_secs".into());
            }
        }
        if self.memory_limit_mb == Some(0) {
            return fail("harness.memory_limit_mb must be positive".into());
        }
        if self.metrics_file.is_empty() || self.metrics_file.contains('/') {
            return fail("harness.metrics_file must be a plain file name".into());
        }
        Ok(())
    }
}

/// Parses and validates config text. Relative paths are left as written.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file; relative paths inside it are resolved against the
/// file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut cfg = parse_config(&text)?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
    cfg.resolve_paths(&base);
    Ok(cfg)
}
