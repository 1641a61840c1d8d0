//! Island-structured program database.
//!
//! Every evaluated program lives here. Each island keeps its own members and
//! a small set of local elites (the parent pool); a global elite archive of
//! the best-scoring programs across all islands feeds the "top" half of the
//! inspiration set. [`ProgramStore`] is purely in-memory; [`persist`] adds
//! the on-disk run layout and journal on top of it.

mod record;
pub mod persist;

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use record::{Origin, ProgramId, ProgramRecord, ProgramStatus};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("program id {0} already exists")]
    DuplicateId(ProgramId),
    #[error("island {island} out of range (island count {count})")]
    InvalidIsland { island: usize, count: usize },
    #[error("parent {parent} of program {id} does not exist")]
    UnknownParent { id: ProgramId, parent: ProgramId },
    #[error("parent {parent} of program {id} is not from an earlier generation")]
    ParentNotEarlier { id: ProgramId, parent: ProgramId },
    #[error("record {id} is inconsistent: {reason}")]
    Inconsistent { id: ProgramId, reason: String },
    #[error("island {0} has no samplable programs")]
    EmptyIsland(usize),
    #[error("unknown program {0}")]
    UnknownProgram(ProgramId),
    #[error("run directory I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt journal at line {line}: {reason}")]
    Journal { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub island_count: usize,
    pub archive_capacity: usize,
    /// Probability of drawing a parent from the island's local elites.
    pub p_elite: f64,
    pub migration_interval: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            island_count: 4,
            archive_capacity: 20,
            p_elite: 0.5,
            migration_interval: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IslandState {
    pub island_id: usize,
    pub member_ids: Vec<ProgramId>,
    /// Best-scoring members, ascending by score.
    pub local_elite_ids: Vec<ProgramId>,
}

/// Capacity-bounded, score-sorted archive of the best programs overall.
#[derive(Debug, Clone, PartialEq)]
pub struct EliteArchive {
    capacity: usize,
    entries: Vec<(f64, u64, ProgramId)>,
}

impl EliteArchive {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ProgramId> + '_ {
        self.entries.iter().map(|e| e.2)
    }

    pub fn contains(&self, id: ProgramId) -> bool {
        self.entries.iter().any(|e| e.2 == id)
    }

    /// Offers a scored program; returns true when the archive changed.
    fn offer(&mut self, score: f64, created_at: u64, id: ProgramId) -> bool {
        if self.capacity == 0 {
            return false;
        }
        let key = (score, created_at);
        let pos = self
            .entries
            .partition_point(|e| (e.0, e.1).partial_cmp(&key) == Some(std::cmp::Ordering::Less));
        if pos >= self.capacity {
            return false;
        }
        self.entries.insert(pos, (score, created_at, id));
        self.entries.truncate(self.capacity);
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationMove {
    pub source_island: usize,
    pub destination_island: usize,
    pub original_id: ProgramId,
    pub copied_id: ProgramId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub moves: Vec<MigrationMove>,
}

/// What an insertion changed, for journaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertOutcome {
    pub id: ProgramId,
    pub archive_changed: bool,
}

#[derive(Debug, Clone)]
pub struct ProgramStore {
    config: StoreConfig,
    records: BTreeMap<ProgramId, ProgramRecord>,
    islands: Vec<IslandState>,
    archive: EliteArchive,
    next_id: u64,
    next_seq: u64,
}

impl ProgramStore {
    pub fn new(config: StoreConfig) -> Self {
        let islands = (0..config.island_count)
            .map(|island_id| IslandState {
                island_id,
                ..Default::default()
            })
            .collect();
        Self {
            archive: EliteArchive::new(config.archive_capacity),
            config,
            records: BTreeMap::new(),
            islands,
            next_id: 0,
            next_seq: 0,
        }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: ProgramId) -> Option<&ProgramRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &ProgramRecord> {
        self.records.values()
    }

    pub fn islands(&self) -> &[IslandState] {
        &self.islands
    }

    pub fn archive(&self) -> &EliteArchive {
        &self.archive
    }

    /// Reserves a fresh id. Ids are dense and never reused.
    pub fn allocate_id(&mut self) -> ProgramId {
        let id = ProgramId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Inserts a record. `created_at` is overwritten with the store's
    /// insertion sequence number.
    pub fn insert_program(&mut self, mut record: ProgramRecord) -> Result<InsertOutcome, StoreError> {
        let id = record.id;
        if self.records.contains_key(&id) {
            return Err(StoreError::DuplicateId(id));
        }
        if record.island_id >= self.config.island_count {
            return Err(StoreError::InvalidIsland {
                island: record.island_id,
                count: self.config.island_count,
            });
        }
        if let Some(parent) = record.parent_id {
            let p = self
                .records
                .get(&parent)
                .ok_or(StoreError::UnknownParent { id, parent })?;
            if p.generation >= record.generation {
                return Err(StoreError::ParentNotEarlier { id, parent });
            }
        }
        check_consistency(&record)?;

        record.created_at = self.next_seq;
        self.next_seq += 1;
        self.next_id = self.next_id.max(id.0 + 1);

        let island = record.island_id;
        let archive_changed = match record.rank_key() {
            Some((score, seq)) => self.archive.offer(score, seq, id),
            None => false,
        };
        self.records.insert(id, record);
        self.islands[island].member_ids.push(id);
        self.refresh_local_elites(island);
        Ok(InsertOutcome { id, archive_changed })
    }

    fn refresh_local_elites(&mut self, island: usize) {
        let state = &self.islands[island];
        let mut scored: Vec<(f64, u64, ProgramId)> = state
            .member_ids
            .iter()
            .filter_map(|id| {
                let r = &self.records[id];
                r.rank_key().map(|(s, c)| (s, c, *id))
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let want = local_elite_count(state.member_ids.len());
        let elites = scored.into_iter().take(want).map(|e| e.2).collect();
        self.islands[island].local_elite_ids = elites;
    }

    /// Draws a parent from `island_id`: a local elite with probability
    /// `p_elite`, otherwise a non-elite scored member. Falls back to the
    /// other pool when one is empty.
    pub fn sample_parent<R: Rng + ?Sized>(
        &self,
        island_id: usize,
        rng: &mut R,
    ) -> Result<&ProgramRecord, StoreError> {
        let island = self.islands.get(island_id).ok_or(StoreError::InvalidIsland {
            island: island_id,
            count: self.config.island_count,
        })?;
        let elites = &island.local_elite_ids;
        let others: Vec<ProgramId> = island
            .member_ids
            .iter()
            .copied()
            .filter(|id| self.records[id].status.is_scored() && !elites.contains(id))
            .collect();

        let want_elite = rng.random_bool(self.config.p_elite.clamp(0.0, 1.0));
        let pool: &[ProgramId] = match (want_elite, elites.is_empty(), others.is_empty()) {
            (_, true, true) => return Err(StoreError::EmptyIsland(island_id)),
            (true, false, _) | (false, false, true) => elites,
            _ => &others,
        };
        let pick = pool[rng.random_range(0..pool.len())];
        Ok(&self.records[&pick])
    }

    /// Samples the top set from the archive and the diverse set from scored
    /// programs outside it. Programs whose source duplicates the excluded
    /// parent, or an earlier candidate, are skipped. Both sets come back in
    /// rank/id order.
    pub fn sample_inspirations<R: Rng + ?Sized>(
        &self,
        top_count: usize,
        diverse_count: usize,
        exclude: Option<ProgramId>,
        rng: &mut R,
    ) -> (Vec<ProgramId>, Vec<ProgramId>) {
        let mut seen: HashSet<&str> = HashSet::new();
        if let Some(r) = exclude.and_then(|id| self.records.get(&id)) {
            seen.insert(r.source.as_str());
        }
        let mut admit = |id: &ProgramId| Some(*id) != exclude && seen.insert(self.records[id].source.as_str());

        let top_pool: Vec<ProgramId> = self.archive.ids().filter(|id| admit(id)).collect();
        let diverse_pool: Vec<ProgramId> = self
            .records
            .values()
            .filter(|r| r.status.is_scored() && !self.archive.contains(r.id))
            .map(|r| r.id)
            .filter(|id| admit(id))
            .collect();

        (
            sample_ordered(&top_pool, top_count, rng),
            sample_ordered(&diverse_pool, diverse_count, rng),
        )
    }

    /// Ring migration: on schedule, the best member of island k is copied
    /// into island (k + 1) mod n.
    pub fn migrate(&mut self, cycle_index: u64) -> Result<MigrationReport, StoreError> {
        let n = self.config.island_count;
        let interval = self.config.migration_interval;
        if n < 2 || cycle_index == 0 || interval == 0 || !cycle_index.is_multiple_of(interval) {
            return Ok(MigrationReport::default());
        }
        let bests: Vec<(usize, ProgramId)> = self
            .islands
            .iter()
            .filter_map(|isl| isl.local_elite_ids.first().map(|id| (isl.island_id, *id)))
            .collect();
        let mut report = MigrationReport::default();
        for (src, original_id) in bests {
            let dst = (src + 1) % n;
            let new_id = self.allocate_id();
            let original = &self.records[&original_id];
            let copy = ProgramRecord {
                id: new_id,
                island_id: dst,
                origin: Origin::Migrant(original_id),
                ..original.clone()
            };
            let copied_id = copy.id;
            self.insert_program(copy)?;
            report.moves.push(MigrationMove {
                source_island: src,
                destination_island: dst,
                original_id,
                copied_id,
            });
        }
        Ok(report)
    }
}

/// Local elite count for an island of `members` programs: max(1, ceil(0.2 n)).
pub fn local_elite_count(members: usize) -> usize {
    ((members as f64 * 0.2).ceil() as usize).max(1)
}

fn sample_ordered<R: Rng + ?Sized>(pool: &[ProgramId], amount: usize, rng: &mut R) -> Vec<ProgramId> {
    let amount = amount.min(pool.len());
    if amount == 0 {
        return Vec::new();
    }
    let mut picks = index::sample(rng, pool.len(), amount).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| pool[i]).collect()
}

fn check_consistency(record: &ProgramRecord) -> Result<(), StoreError> {
    let fail = |reason: &str| StoreError::Inconsistent {
        id: record.id,
        reason: reason.to_string(),
    };
    if record.score.is_some() != record.status.is_scored() {
        return Err(fail("score must be present exactly when status is over_threshold or acceptable"));
    }
    if record.metrics.is_none() && record.status.is_scored() {
        return Err(fail("scored status without metrics"));
    }
    if let Some(s) = record.score {
        if !s.is_finite() || s < 0.0 {
            return Err(fail("score must be finite and non-negative"));
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::telemetry::metrics::fixtures::report;

    pub fn scored(id: u64, island: usize, generation: u64, score: f64) -> ProgramRecord {
        ProgramRecord {
            id: ProgramId(id),
            parent_id: None,
            island_id: island,
            generation,
            source: format!("program {id}\n"),
            status: ProgramStatus::Acceptable,
            metrics: Some(report(score, 1.0)),
            score: Some(score),
            created_at: 0,
            origin: Origin::Child,
        }
    }

    pub fn buggy(id: u64, island: usize, generation: u64) -> ProgramRecord {
        ProgramRecord {
            status: ProgramStatus::Buggy,
            metrics: None,
            score: None,
            ..scored(id, island, generation, 0.0)
        }
    }
}
