use std::fmt;

use serde::{Deserialize, Serialize};

use crate::telemetry::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProgramId(pub u64);

impl fmt::Display for ProgramId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:06}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramStatus {
    Pending,
    Buggy,
    OverThreshold,
    Acceptable,
}

impl ProgramStatus {
    /// Statuses that carry a score.
    pub fn is_scored(self) -> bool {
        matches!(self, ProgramStatus::OverThreshold | ProgramStatus::Acceptable)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProgramStatus::Pending => "pending",
            ProgramStatus::Buggy => "buggy",
            ProgramStatus::OverThreshold => "over_threshold",
            ProgramStatus::Acceptable => "acceptable",
        }
    }
}

/// How a record came to exist. Only `Child` records count towards a
/// generation's category statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "from")]
pub enum Origin {
    Seed,
    Child,
    Migrant(ProgramId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramRecord {
    pub id: ProgramId,
    pub parent_id: Option<ProgramId>,
    pub island_id: usize,
    pub generation: u64,
    pub source: String,
    pub status: ProgramStatus,
    pub metrics: Option<MetricsReport>,
    /// `step_avg_time * final_val_loss`; lower is better.
    pub score: Option<f64>,
    /// Logical insertion sequence, assigned by the store. Used for
    /// tie-breaking and kept clock-free so journals replay byte-identically.
    pub created_at: u64,
    pub origin: Origin,
}

impl ProgramRecord {
    /// Ordering key for elite structures: score, then earlier insertion.
    pub(crate) fn rank_key(&self) -> Option<(f64, u64)> {
        self.score.map(|s| (s, self.created_at))
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.final_val_loss)
    }
}
