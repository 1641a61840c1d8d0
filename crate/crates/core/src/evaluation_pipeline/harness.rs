//! Subprocess harness contract.
//!
//! Each evaluation gets its own directory holding the candidate, the
//! manifest and the metrics file. The harness argv is rendered from the
//! configured template, the child runs in its own process group, and the
//! engine kills the whole group when the budget runs out.

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{HarnessConfig, CANDIDATE_PATH, MANIFEST_PATH, METRICS_OUT, MODE};
use crate::integrity_guard::{compile_injection_plan, IntegrityError, ProtectedParams};
use crate::telemetry::{parse_metrics, ExitDisposition, MetricsReport};

pub const CANDIDATE_FILE: &str = "candidate.src";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const STDOUT_FILE: &str = "stdout.log";
pub const STDERR_FILE: &str = "stderr.log";

/// Stderr kept from one harness run, from the end.
pub const STDERR_CAPTURE_BYTES: u64 = 64 * 1024;
/// Full-evaluation timeout used before the seed has been measured.
pub const UNCALIBRATED_FULL_TIMEOUT: Duration = Duration::from_secs(3600);
/// Calibrated full timeout is this multiple of the seed's wall time...
pub const SEED_TIMEOUT_FACTOR: f64 = 3.0;
/// ...but never below this.
pub const MIN_FULL_TIMEOUT: Duration = Duration::from_secs(10);

const POLL_INTERVAL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fast,
    Full,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fast => "fast",
            Mode::Full => "full",
        }
    }
}

/// What the harness reads: the protected parameters, their digest, the
/// fast-mode step cap and the warm-up steps to leave out of timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_digest: String,
    pub fast_steps: u64,
    #[serde(default)]
    pub exclude_warmup_steps: u64,
    pub protected: ProtectedParams,
}

impl Manifest {
    pub fn new(protected: &ProtectedParams, fast_steps: u64) -> Result<Self, IntegrityError> {
        let plan = compile_injection_plan(protected)?;
        Ok(Self {
            manifest_digest: plan.manifest_digest,
            fast_steps,
            exclude_warmup_steps: 0,
            protected: protected.clone(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn read(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Error)]
pub enum InfraError {
    #[error("cannot launch harness `{program}`: {source}")]
    Launch {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("evaluation directory I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("language model unavailable: {0}")]
    Lm(String),
}

/// Result of one harness invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessRun {
    pub disposition: ExitDisposition,
    pub exit_code: Option<i32>,
    pub stderr: String,
    pub wall_secs: f64,
    /// Parsed metrics, or why they could not be read.
    pub metrics: Result<MetricsReport, String>,
}

impl HarnessRun {
    /// Error text for a repair prompt.
    pub fn failure_text(&self, timeout: Option<Duration>) -> String {
        let mut head = match self.disposition {
            ExitDisposition::Ok => match &self.metrics {
                Ok(_) => String::new(),
                Err(e) => format!("harness exited cleanly but its metrics are unusable: {e}"),
            },
            ExitDisposition::Timeout => format!(
                "timed out after {:.1} s",
                timeout.map_or(self.wall_secs, |t| t.as_secs_f64())
            ),
            ExitDisposition::NonzeroExit => format!("exited with status {}", self.exit_code.unwrap_or(-1)),
            ExitDisposition::Crash => "killed by a signal".to_string(),
        };
        if !self.stderr.trim().is_empty() {
            if !head.is_empty() {
                head.push('\n');
            }
            head.push_str(self.stderr.trim_end());
        }
        head
    }
}

/// Runs candidates. Implementations must be usable from several threads.
pub trait Evaluator: Send + Sync {
    fn run(&self, source: &str, mode: Mode, dir: &Path) -> Result<HarnessRun, InfraError>;

    /// Receives the seed's full-evaluation wall time once it is known.
    fn calibrate(&self, _seed_wall_secs: f64) {}

    fn timeout(&self, _mode: Mode) -> Option<Duration> {
        None
    }
}

#[derive(Debug)]
pub struct SubprocessHarness {
    config: HarnessConfig,
    manifest_text: String,
    full_timeout: Mutex<Duration>,
}

impl SubprocessHarness {
    pub fn new(config: HarnessConfig, protected: &ProtectedParams) -> Result<Self, IntegrityError> {
        let manifest = Manifest {
            exclude_warmup_steps: config.exclude_warmup_steps,
            ..Manifest::new(protected, config.fast_check_steps)?
        };
        let full = config
            .full_eval_timeout_secs
            .map_or(UNCALIBRATED_FULL_TIMEOUT, Duration::from_secs_f64);
        Ok(Self {
            config,
            manifest_text: manifest.to_toml(),
            full_timeout: Mutex::new(full),
        })
    }

    fn render_argv(&self, candidate: &Path, manifest: &Path, metrics: &Path, mode: Mode) -> Vec<String> {
        self.config
            .command
            .iter()
            .map(|arg| {
                arg.replace(CANDIDATE_PATH, &candidate.to_string_lossy())
                    .replace(MANIFEST_PATH, &manifest.to_string_lossy())
                    .replace(METRICS_OUT, &metrics.to_string_lossy())
                    .replace(MODE, mode.as_str())
            })
            .collect()
    }

    fn metrics_path(&self, dir: &Path, mode: Mode) -> PathBuf {
        dir.join(self.config.metrics_file.replace(MODE, mode.as_str()))
    }
}

impl Evaluator for SubprocessHarness {
    fn run(&self, source: &str, mode: Mode, dir: &Path) -> Result<HarnessRun, InfraError> {
        fs::create_dir_all(dir)?;
        let dir = fs::canonicalize(dir)?;
        let candidate = dir.join(CANDIDATE_FILE);
        let manifest = dir.join(MANIFEST_FILE);
        let metrics = self.metrics_path(&dir, mode);
        fs::write(&candidate, source)?;
        fs::write(&manifest, &self.manifest_text)?;
        match fs::remove_file(&metrics) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
            _ => {}
        }

        let argv = self.render_argv(&candidate, &manifest, &metrics, mode);
        let stdout = File::create(dir.join(STDOUT_FILE))?;
        let stderr = File::create(dir.join(STDERR_FILE))?;
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(self.config.working_dir.as_deref().unwrap_or(&dir))
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .process_group(0);
        let memory = self.config.memory_limit_mb.map(|mb| mb * 1024 * 1024);
        let no_network = self.config.no_network;
        // SAFETY: only async-signal-safe libc calls between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                if let Some(bytes) = memory {
                    let lim = libc::rlimit {
                        rlim_cur: bytes as libc::rlim_t,
                        rlim_max: bytes as libc::rlim_t,
                    };
                    if libc::setrlimit(libc::RLIMIT_AS, &lim) != 0 {
                        return Err(std::io::Error::last_os_error());
                    }
                }
                if no_network {
                    // Best effort: needs user namespaces or CAP_SYS_ADMIN.
                    libc::unshare(libc::CLONE_NEWNET);
                }
                Ok(())
            });
        }

        let timeout = self.timeout(mode).expect("subprocess harness always has a timeout");
        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|source| InfraError::Launch {
            program: argv[0].clone(),
            source,
        })?;
        let pgid = child.id() as libc::pid_t;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break Some(status);
            }
            if started.elapsed() >= timeout {
                // SAFETY: plain syscall on the child's process group.
                unsafe {
                    libc::kill(-pgid, libc::SIGKILL);
                }
                child.wait()?;
                break None;
            }
            std::thread::sleep(POLL_INTERVAL);
        };
        let wall_secs = started.elapsed().as_secs_f64();
        // Grandchildren may outlive a clean exit; sweep the group regardless.
        // SAFETY: as above.
        unsafe {
            libc::kill(-pgid, libc::SIGKILL);
        }

        let (disposition, exit_code) = match status {
            None => (ExitDisposition::Timeout, None),
            Some(s) if s.success() => (ExitDisposition::Ok, Some(0)),
            Some(s) => match s.code() {
                Some(code) => (ExitDisposition::NonzeroExit, Some(code)),
                None => {
                    debug_assert!(s.signal().is_some());
                    (ExitDisposition::Crash, None)
                }
            },
        };
        let stderr = read_tail(&dir.join(STDERR_FILE), STDERR_CAPTURE_BYTES)?;
        let metrics = match fs::read(&metrics) {
            Ok(bytes) => parse_metrics(&bytes).map_err(|e| e.to_string()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err("no metrics file written".to_string()),
            Err(e) => Err(e.to_string()),
        };
        Ok(HarnessRun {
            disposition,
            exit_code,
            stderr,
            wall_secs,
            metrics,
        })
    }

    fn calibrate(&self, seed_wall_secs: f64) {
        if self.config.full_eval_timeout_secs.is_some() {
            return;
        }
        let t = Duration::from_secs_f64((seed_wall_secs * SEED_TIMEOUT_FACTOR).max(0.0)).max(MIN_FULL_TIMEOUT);
        *self.full_timeout.lock().unwrap() = t;
    }

    fn timeout(&self, mode: Mode) -> Option<Duration> {
        Some(match mode {
            Mode::Fast => Duration::from_secs_f64(self.config.fast_check_timeout_secs),
            Mode::Full => *self.full_timeout.lock().unwrap(),
        })
    }
}

fn read_tail(path: &Path, max: u64) -> std::io::Result<String> {
    let mut f = File::open(path)?;
    let len = f.metadata()?.len();
    if len > max {
        f.seek(SeekFrom::Start(len - max))?;
    }
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

#[derive(Debug, Clone, PartialEq)]
pub enum FastResult {
    Pass,
    Fail(String),
}

/// Brief run of a candidate: passes on a clean exit within the fast budget.
pub fn fast_check(evaluator: &dyn Evaluator, source: &str, dir: &Path) -> Result<FastResult, InfraError> {
    let run = evaluator.run(source, Mode::Fast, dir)?;
    if run.disposition == ExitDisposition::Ok {
        return Ok(FastResult::Pass);
    }
    Ok(FastResult::Fail(run.failure_text(evaluator.timeout(Mode::Fast))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::metrics::fixtures::report;

    fn harness(script: &str, dir: &Path) -> SubprocessHarness {
        let path = dir.join("harness.sh");
        fs::write(&path, script).unwrap();
        let cfg = HarnessConfig {
            command: vec![
                "/bin/sh".into(),
                path.to_string_lossy().into_owned(),
                CANDIDATE_PATH.into(),
                MANIFEST_PATH.into(),
                METRICS_OUT.into(),
                MODE.into(),
            ],
            working_dir: None,
            seed_program: "unused".into(),
            fast_check_timeout_secs: 1.0,
            fast_check_steps: 5,
            exclude_warmup_steps: 0,
            full_eval_timeout_secs: Some(5.0),
            memory_limit_mb: None,
            no_network: false,
            metrics_file: "metrics-{mode}.json".into(),
        };
        SubprocessHarness::new(cfg, &ProtectedParams::default()).unwrap()
    }

    #[test]
    fn manifest_round_trips_through_toml() {
        let m = Manifest::new(&ProtectedParams::default(), 7).unwrap();
        assert_eq!(toml::from_str::<Manifest>(&m.to_toml()).unwrap(), m);
        let warm = Manifest {
            exclude_warmup_steps: 3,
            ..m
        };
        assert_eq!(toml::from_str::<Manifest>(&warm.to_toml()).unwrap(), warm);
    }

    #[test]
    fn clean_exit_with_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let metrics = tmp.path().join("fixture.json");
        fs::write(&metrics, report(1.0, 0.5).to_canonical_json()).unwrap();
        let script = format!(
            "test -f \"$1\" && test -f \"$2\" && test \"$4\" = full && cp {} \"$3\"\n",
            metrics.display()
        );
        let h = harness(&script, tmp.path());
        let run = h.run("x = 1\n", Mode::Full, &tmp.path().join("eval")).unwrap();
        assert_eq!(run.disposition, ExitDisposition::Ok);
        assert_eq!(run.metrics.unwrap(), report(1.0, 0.5));
        assert_eq!(fs::read_to_string(tmp.path().join("eval").join(CANDIDATE_FILE)).unwrap(), "x = 1\n");
    }

    #[test]
    fn nonzero_exit_captures_stderr() {
        let tmp = tempfile::tempdir().unwrap();
        let h = harness("echo 'SyntaxError: bad line 3' >&2\nexit 1\n", tmp.path());
        let FastResult::Fail(text) = fast_check(&h, "x", &tmp.path().join("e")).unwrap() else {
            panic!("expected failure");
        };
        assert!(text.contains("exited with status 1"));
        assert!(text.contains("SyntaxError: bad line 3"));
    }

    #[test]
    fn hang_killed_at_budget() {
        let tmp = tempfile::tempdir().unwrap();
        // The grandchild sleep must die with the group.
        let h = harness("sleep 30 &\nwhile true; do sleep 0.05; done\n", tmp.path());
        let started = Instant::now();
        let run = h.run("x", Mode::Fast, &tmp.path().join("e")).unwrap();
        let took = started.elapsed().as_secs_f64();
        assert_eq!(run.disposition, ExitDisposition::Timeout);
        assert!((1.0..2.0).contains(&took), "took {took}");
        assert!(run.failure_text(h.timeout(Mode::Fast)).starts_with("timed out after 1.0 s"));
    }

    #[test]
    fn signal_is_crash() {
        let tmp = tempfile::tempdir().unwrap();
        let h = harness("kill -SEGV $$\n", tmp.path());
        let run = h.run("x", Mode::Fast, &tmp.path().join("e")).unwrap();
        assert_eq!(run.disposition, ExitDisposition::Crash);
    }

    #[test]
    fn missing_program_is_infrastructure() {
        let tmp = tempfile::tempdir().unwrap();
        let mut h = harness("", tmp.path());
        h.config.command[0] = "/nonexistent/harness".into();
        assert!(matches!(
            h.run("x", Mode::Fast, &tmp.path().join("e")),
            Err(InfraError::Launch { .. })
        ));
    }

    #[test]
    fn calibration_uses_seed_time_unless_configured() {
        let tmp = tempfile::tempdir().unwrap();
        let mut h = harness("", tmp.path());
        h.calibrate(100.0);
        assert_eq!(h.timeout(Mode::Full), Some(Duration::from_secs(5)));
        h.config.full_eval_timeout_secs = None;
        h.calibrate(100.0);
        assert_eq!(h.timeout(Mode::Full), Some(Duration::from_secs(300)));
        h.calibrate(0.01);
        assert_eq!(h.timeout(Mode::Full), Some(MIN_FULL_TIMEOUT));
    }
}
