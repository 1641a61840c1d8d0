//! Metrics schema, efficiency frontier and run reports.

mod frontier;
pub mod metrics;
mod report;

pub use frontier::{update_frontier, FrontierPoint, FrontierState};
pub use metrics::{
    parse_metrics, Attestation, Checkpoint, ExitDisposition, MetricsError, MetricsReport, OpEntry,
    SectionProfile, MAX_OP_TABLE_ENTRIES, REQUIRED_SECTIONS,
};
pub use report::{render_run_report, CategoryCounts, GenerationRow, RunReport, TopProgramRow, TOP_PROGRAMS};
