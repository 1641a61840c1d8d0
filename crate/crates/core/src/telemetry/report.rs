use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::frontier::{FrontierPoint, FrontierState};
use crate::program_store::{Origin, ProgramId, ProgramStatus, ProgramStore};

pub const TOP_PROGRAMS: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub buggy: u64,
    pub over_threshold: u64,
    pub acceptable: u64,
}

impl CategoryCounts {
    pub fn add(&mut self, status: ProgramStatus) {
        match status {
            ProgramStatus::Buggy | ProgramStatus::Pending => self.buggy += 1,
            ProgramStatus::OverThreshold => self.over_threshold += 1,
            ProgramStatus::Acceptable => self.acceptable += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.buggy + self.over_threshold + self.acceptable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub generation: u64,
    #[serde(flatten)]
    pub counts: CategoryCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopProgramRow {
    pub rank: usize,
    pub id: ProgramId,
    pub generation: u64,
    pub island_id: usize,
    pub status: ProgramStatus,
    pub score: f64,
    pub final_val_loss: f64,
    pub step_avg_time: f64,
    pub total_train_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub generations: Vec<GenerationRow>,
    pub trajectory: Vec<FrontierPoint>,
    pub top_programs: Vec<TopProgramRow>,
}

#[derive(Serialize)]
#[serde(tag = "row", rename_all = "snake_case")]
enum NdjsonRow<'a> {
    Generation(&'a GenerationRow),
    Frontier(&'a FrontierPoint),
    Top(&'a TopProgramRow),
}

/// Builds the per-generation category table (children only), the frontier
/// trajectory and the top programs by score. Migrant and seed copies are
/// left out of the top table when their source already appears.
pub fn render_run_report(store: &ProgramStore, frontier: &FrontierState) -> RunReport {
    let mut per_gen: BTreeMap<u64, CategoryCounts> = BTreeMap::new();
    for r in store.records().filter(|r| r.origin == Origin::Child) {
        per_gen.entry(r.generation).or_default().add(r.status);
    }

    let mut ranked: Vec<_> = store.records().filter(|r| r.status.is_scored()).collect();
    ranked.sort_by(|a, b| {
        let (sa, ca) = a.rank_key().unwrap();
        let (sb, cb) = b.rank_key().unwrap();
        sa.total_cmp(&sb).then(ca.cmp(&cb))
    });
    let mut seen = HashSet::new();
    let top_programs = ranked
        .into_iter()
        .filter(|r| seen.insert(r.source.as_str()))
        .take(TOP_PROGRAMS)
        .enumerate()
        .map(|(i, r)| {
            let m = r.metrics.as_ref().expect("scored records carry metrics");
            TopProgramRow {
                rank: i + 1,
                id: r.id,
                generation: r.generation,
                island_id: r.island_id,
                status: r.status,
                score: r.score.unwrap(),
                final_val_loss: m.final_val_loss,
                step_avg_time: m.step_avg_time,
                total_train_time: m.total_train_time,
            }
        })
        .collect();

    RunReport {
        generations: per_gen
            .into_iter()
            .map(|(generation, counts)| GenerationRow { generation, counts })
            .collect(),
        trajectory: frontier.history.clone(),
        top_programs,
    }
}

impl RunReport {
    pub fn to_ndjson(&self) -> String {
        let rows = self
            .generations
            .iter()
            .map(NdjsonRow::Generation)
            .chain(self.trajectory.iter().map(NdjsonRow::Frontier))
            .chain(self.top_programs.iter().map(NdjsonRow::Top));
        let mut out = String::new();
        for row in rows {
            out.push_str(&serde_json::to_string(&row).expect("report row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Programs per generation");
        let _ = writeln!(out, "{:>10} {:>8} {:>15} {:>11} {:>7}", "generation", "buggy", "over_threshold", "acceptable", "total");
        for g in &self.generations {
            let c = &g.counts;
            let _ = writeln!(
                out,
                "{:>10} {:>8} {:>15} {:>11} {:>7}",
                g.generation, c.buggy, c.over_threshold, c.acceptable, c.total()
            );
        }
        let _ = writeln!(out, "\nFrontier trajectory");
        let _ = writeln!(out, "{:>10} {:>8} {:>14}", "generation", "program", "score");
        for p in &self.trajectory {
            let _ = writeln!(out, "{:>10} {:>8} {:>14.6}", p.generation, p.id.to_string(), p.score);
        }
        let _ = writeln!(out, "\nTop programs");
        let _ = writeln!(
            out,
            "{:>4} {:>8} {:>10} {:>6} {:>14} {:>12} {:>12} {:>12} {:>14}",
            "rank", "program", "generation", "island", "status", "score", "val_loss", "step_avg_s", "train_time_s"
        );
        for t in &self.top_programs {
            let _ = writeln!(
                out,
                "{:>4} {:>8} {:>10} {:>6} {:>14} {:>12.6} {:>12.6} {:>12.6} {:>14.6}",
                t.rank,
                t.id.to_string(),
                t.generation,
                t.island_id,
                t.status.as_str(),
                t.score,
                t.final_val_loss,
                t.step_avg_time,
                t.total_train_time
            );
        }
        out
    }
}
