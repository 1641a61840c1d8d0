//! Run directory layout and the append-only journal.
//!
//! ```text
//! runs/<run_id>/
//!   journal.ndjson            one JSON event per line
//!   programs/<id>.src         program source
//!   programs/<id>.metrics.json
//! ```
//!
//! Generations are committed by a `generation_commit` event. On reopen,
//! anything after the last commit is truncated and the store is rebuilt by
//! replaying the committed `insert` events in order.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    InsertOutcome, MigrationMove, MigrationReport, Origin, ProgramId, ProgramRecord,
    ProgramStatus, ProgramStore, StoreConfig, StoreError,
};
use crate::prompt_engine::PromptKind;
use crate::telemetry::{parse_metrics, CategoryCounts};

pub const JOURNAL_FILE: &str = "journal.ndjson";
pub const PROGRAMS_DIR: &str = "programs";
pub const LOCK_FILE: &str = ".lock";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertEntry {
    pub id: ProgramId,
    pub parent_id: Option<ProgramId>,
    pub island_id: usize,
    pub generation: u64,
    pub status: ProgramStatus,
    pub score: Option<f64>,
    pub created_at: u64,
    pub origin: Origin,
    pub source_sha256: String,
    pub has_metrics: bool,
}

/// Why a child ended up where it did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum ChildOutcome {
    Evaluated,
    EmptyCompletion,
    EditParseFailed(String),
    EditApplyFailed(String),
    RepairExhausted(String),
    EvaluationFailed(String),
    Infrastructure(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildEntry {
    pub generation: u64,
    pub child_index: usize,
    pub island_id: usize,
    pub parent_id: ProgramId,
    pub child_id: ProgramId,
    pub prompt_kinds: Vec<PromptKind>,
    pub template_id: String,
    pub top_ids: Vec<ProgramId>,
    pub diverse_ids: Vec<ProgramId>,
    pub lm_calls: u32,
    pub repair_attempts: u32,
    pub ambiguous_edit_blocks: Vec<usize>,
    pub status: ProgramStatus,
    pub outcome: ChildOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairAttemptEntry {
    pub generation: u64,
    pub child_index: usize,
    pub attempt: u32,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEvent {
    RunStarted {
        config_digest: String,
        seed: u64,
    },
    Insert(InsertEntry),
    EliteChange {
        archive: Vec<ProgramId>,
    },
    Migration {
        generation: u64,
        moves: Vec<MigrationMove>,
    },
    Child(ChildEntry),
    RepairAttempt(RepairAttemptEntry),
    Warning {
        generation: u64,
        program: Option<ProgramId>,
        message: String,
    },
    GenerationCommit {
        generation: u64,
        counts: CategoryCounts,
        degraded: bool,
    },
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn journal(&self) -> PathBuf {
        self.root.join(JOURNAL_FILE)
    }

    pub fn programs(&self) -> PathBuf {
        self.root.join(PROGRAMS_DIR)
    }

    pub fn source_path(&self, id: ProgramId) -> PathBuf {
        self.programs().join(format!("{id}.src"))
    }

    pub fn metrics_path(&self, id: ProgramId) -> PathBuf {
        self.programs().join(format!("{id}.metrics.json"))
    }
}

/// Result of replaying a journal: the committed events, in order.
#[derive(Debug, Clone, Default)]
pub struct Replay {
    pub events: Vec<JournalEvent>,
    pub last_committed_generation: Option<u64>,
    /// Bytes dropped from an uncommitted tail.
    pub truncated_bytes: u64,
}

/// Reads committed events without touching the file.
pub fn read_journal(path: &Path) -> Result<Replay, StoreError> {
    let (replay, _) = scan_journal(path)?;
    Ok(replay)
}

fn scan_journal(path: &Path) -> Result<(Replay, u64), StoreError> {
    let file = File::open(path)?;
    let total = file.metadata()?.len();
    let mut reader = BufReader::new(file);
    let mut pending = Vec::new();
    let mut replay = Replay::default();
    let mut offset = 0u64;
    let mut committed_offset = 0u64;
    let mut line = String::new();
    let mut line_no = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        offset += n as u64;
        if !line.ends_with('\n') {
            // Torn final write.
            break;
        }
        let event: JournalEvent = serde_json::from_str(line.trim_end()).map_err(|e| StoreError::Journal {
            line: line_no,
            reason: e.to_string(),
        })?;
        let is_commit = matches!(
            event,
            JournalEvent::GenerationCommit { .. } | JournalEvent::RunStarted { .. }
        );
        if let JournalEvent::GenerationCommit { generation, .. } = event {
            replay.last_committed_generation = Some(generation);
        }
        pending.push(event);
        if is_commit {
            replay.events.append(&mut pending);
            committed_offset = offset;
        }
    }
    replay.truncated_bytes = total - committed_offset;
    Ok((replay, committed_offset))
}

#[derive(Debug)]
struct Journal {
    file: File,
}

impl Journal {
    fn append(&mut self, event: &JournalEvent) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(event).expect("journal event serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }

    fn sync(&mut self) -> Result<(), StoreError> {
        self.file.flush()?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// A [`ProgramStore`] mirrored into a run directory. All mutations go
/// through this single writer.
#[derive(Debug)]
pub struct RunStore {
    dir: RunDir,
    store: ProgramStore,
    journal: Journal,
}

impl RunStore {
    /// Starts a fresh run directory. Fails if a journal already exists.
    pub fn create(dir: RunDir, config: StoreConfig) -> Result<Self, StoreError> {
        fs::create_dir_all(dir.programs())?;
        let file = OpenOptions::new().create_new(true).append(true).open(dir.journal())?;
        Ok(Self {
            dir,
            store: ProgramStore::new(config),
            journal: Journal { file },
        })
    }

    /// Reopens a run, dropping any uncommitted journal tail and rebuilding
    /// the store from committed inserts.
    pub fn open(dir: RunDir, config: StoreConfig) -> Result<(Self, Replay), StoreError> {
        let path = dir.journal();
        let (replay, committed) = scan_journal(&path)?;
        let mut file = OpenOptions::new().read(true).write(true).open(&path)?;
        file.set_len(committed)?;
        file.seek(SeekFrom::End(0))?;
        let store = rebuild(&dir, config, &replay)?;
        Ok((
            Self {
                dir,
                store,
                journal: Journal { file },
            },
            replay,
        ))
    }

    pub fn dir(&self) -> &RunDir {
        &self.dir
    }

    pub fn store(&self) -> &ProgramStore {
        &self.store
    }

    pub fn allocate_id(&mut self) -> ProgramId {
        self.store.allocate_id()
    }

    pub fn append(&mut self, event: &JournalEvent) -> Result<(), StoreError> {
        self.journal.append(event)
    }

    pub fn insert(&mut self, record: ProgramRecord) -> Result<InsertOutcome, StoreError> {
        let id = record.id;
        let outcome = self.store.insert_program(record)?;
        self.persist_inserted(id, outcome.archive_changed)?;
        Ok(outcome)
    }

    fn persist_inserted(&mut self, id: ProgramId, archive_changed: bool) -> Result<(), StoreError> {
        let record = self.store.get(id).ok_or(StoreError::UnknownProgram(id))?;
        fs::write(self.dir.source_path(id), &record.source)?;
        if let Some(m) = &record.metrics {
            fs::write(self.dir.metrics_path(id), m.to_canonical_json())?;
        }
        let entry = InsertEntry {
            id,
            parent_id: record.parent_id,
            island_id: record.island_id,
            generation: record.generation,
            status: record.status,
            score: record.score,
            created_at: record.created_at,
            origin: record.origin,
            source_sha256: sha256_hex(record.source.as_bytes()),
            has_metrics: record.metrics.is_some(),
        };
        self.journal.append(&JournalEvent::Insert(entry))?;
        if archive_changed {
            let archive = self.store.archive().ids().collect();
            self.journal.append(&JournalEvent::EliteChange { archive })?;
        }
        Ok(())
    }

    pub fn migrate(&mut self, generation: u64) -> Result<MigrationReport, StoreError> {
        let before = self.store.archive().ids().collect::<Vec<_>>();
        let report = self.store.migrate(generation)?;
        for m in &report.moves {
            self.persist_inserted(m.copied_id, false)?;
        }
        if !report.moves.is_empty() {
            let after = self.store.archive().ids().collect::<Vec<_>>();
            if after != before {
                self.journal.append(&JournalEvent::EliteChange { archive: after })?;
            }
            self.journal.append(&JournalEvent::Migration {
                generation,
                moves: report.moves.clone(),
            })?;
        }
        Ok(report)
    }

    /// Appends the commit marker and syncs. Everything journaled before this
    /// survives a crash.
    pub fn commit(&mut self, generation: u64, counts: CategoryCounts, degraded: bool) -> Result<(), StoreError> {
        self.journal.append(&JournalEvent::GenerationCommit {
            generation,
            counts,
            degraded,
        })?;
        self.journal.sync()
    }

    /// Writes a marker that is committed on its own (used for run start).
    pub fn start(&mut self, config_digest: String, seed: u64) -> Result<(), StoreError> {
        self.journal.append(&JournalEvent::RunStarted { config_digest, seed })?;
        self.journal.sync()
    }
}

/// Rebuilds the committed state of a run without touching its files.
pub fn load_committed(dir: &RunDir, config: StoreConfig) -> Result<(ProgramStore, Replay), StoreError> {
    let replay = read_journal(&dir.journal())?;
    let store = rebuild(dir, config, &replay)?;
    Ok((store, replay))
}

fn rebuild(dir: &RunDir, config: StoreConfig, replay: &Replay) -> Result<ProgramStore, StoreError> {
    let mut store = ProgramStore::new(config);
    for event in &replay.events {
        if let JournalEvent::Insert(entry) = event {
            store.insert_program(load_record(dir, entry)?)?;
        }
    }
    Ok(store)
}

fn load_record(dir: &RunDir, entry: &InsertEntry) -> Result<ProgramRecord, StoreError> {
    let source = fs::read_to_string(dir.source_path(entry.id))?;
    if sha256_hex(source.as_bytes()) != entry.source_sha256 {
        return Err(StoreError::Inconsistent {
            id: entry.id,
            reason: "source file does not match journal digest".into(),
        });
    }
    let metrics = if entry.has_metrics {
        let bytes = fs::read(dir.metrics_path(entry.id))?;
        Some(parse_metrics(&bytes).map_err(|e| StoreError::Inconsistent {
            id: entry.id,
            reason: e.to_string(),
        })?)
    } else {
        None
    };
    Ok(ProgramRecord {
        id: entry.id,
        parent_id: entry.parent_id,
        island_id: entry.island_id,
        generation: entry.generation,
        source,
        status: entry.status,
        metrics,
        score: entry.score,
        created_at: entry.created_at,
        origin: entry.origin,
    })
}

/// Exclusive lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    /// Takes the lock. A lock left by a process that no longer exists is
    /// reclaimed.
    pub fn acquire(root: &Path) -> Result<Self, StoreError> {
        let path = root.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id())?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<i32>().ok());
                    if holder.is_some_and(process_alive) {
                        return Err(StoreError::Io(std::io::Error::new(
                            std::io::ErrorKind::WouldBlock,
                            format!("run directory {} is locked by pid {}", root.display(), holder.unwrap()),
                        )));
                    }
                    fs::remove_file(&path)?;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(StoreError::Io(std::io::Error::other("could not acquire run lock")))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn process_alive(pid: i32) -> bool {
    // SAFETY: signal 0 only performs the existence/permission check.
    let rc = unsafe { libc::kill(pid, 0) };
    rc == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program_store::test_support::{buggy, scored};

    fn config() -> StoreConfig {
        StoreConfig {
            island_count: 2,
            archive_capacity: 3,
            p_elite: 0.5,
            migration_interval: 1,
        }
    }

    #[test]
    fn layout_and_replay() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path().join("r1"));
        {
            let mut rs = RunStore::create(dir.clone(), config()).unwrap();
            rs.start("abc".into(), 1).unwrap();
            rs.insert(scored(0, 0, 0, 2.0)).unwrap();
            rs.insert(buggy(1, 1, 0)).unwrap();
            rs.commit(0, CategoryCounts::default(), false).unwrap();
            let mut child = scored(2, 1, 1, 1.0);
            child.parent_id = Some(ProgramId(0));
            rs.insert(child).unwrap();
            rs.migrate(1).unwrap();
            rs.commit(1, CategoryCounts::default(), false).unwrap();
            // Uncommitted tail.
            rs.insert(scored(9, 0, 2, 0.5)).unwrap();
        }
        assert!(dir.source_path(ProgramId(0)).exists());
        assert!(dir.metrics_path(ProgramId(0)).exists());
        assert!(!dir.metrics_path(ProgramId(1)).exists());

        let (rs, replay) = RunStore::open(dir.clone(), config()).unwrap();
        assert_eq!(replay.last_committed_generation, Some(1));
        assert!(replay.truncated_bytes > 0);
        assert!(rs.store().get(ProgramId(9)).is_none());
        // 3 originals plus 2 migrants.
        assert_eq!(rs.store().len(), 5);
        assert!(replay.events.iter().any(|e| matches!(e, JournalEvent::Migration { .. })));

        let text = fs::read_to_string(dir.journal()).unwrap();
        assert!(text.lines().last().unwrap().contains("generation_commit"));
    }

    #[test]
    fn replay_rebuilds_identical_store() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path().join("r2"));
        let mut rs = RunStore::create(dir.clone(), config()).unwrap();
        for i in 0..8 {
            rs.insert(scored(i, (i % 2) as usize, 0, (i * 5 % 7) as f64)).unwrap();
        }
        rs.migrate(3).unwrap();
        rs.commit(0, CategoryCounts::default(), false).unwrap();
        let original = rs.store().clone();
        drop(rs);
        let (reopened, _) = RunStore::open(dir, config()).unwrap();
        assert_eq!(reopened.store().archive(), original.archive());
        assert_eq!(reopened.store().islands(), original.islands());
        let a: Vec<_> = reopened.store().records().cloned().collect();
        let b: Vec<_> = original.records().cloned().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn create_refuses_existing_run() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::new(tmp.path().join("r3"));
        RunStore::create(dir.clone(), config()).unwrap();
        assert!(RunStore::create(dir, config()).is_err());
    }

    #[test]
    fn lock_is_exclusive_and_reclaims_stale() {
        let tmp = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(tmp.path()).unwrap();
        assert!(RunLock::acquire(tmp.path()).is_err());
        drop(lock);
        // A pid that cannot exist.
        fs::write(tmp.path().join(LOCK_FILE), "2147483646\n").unwrap();
        assert!(RunLock::acquire(tmp.path()).is_ok());
    }
}
