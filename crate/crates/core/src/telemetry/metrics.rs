//! The metrics document a harness writes after every evaluation.
//!
//! Field names are fixed: harnesses in other languages write this JSON
//! directly, so renaming anything here is a wire-format break. Unknown
//! top-level fields are carried through in [`MetricsReport::extras`] so a
//! newer harness can add telemetry without the engine rejecting it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Hard cap on the kernel and CPU-op tables.
pub const MAX_OP_TABLE_ENTRIES: usize = 15;

/// Relative tolerance for `avg_time * call_count == total_time`.
pub const SECTION_RELATIVE_TOLERANCE: f64 = 1e-6;

/// The four profiled training-loop sections, in canonical order.
pub const REQUIRED_SECTIONS: [&str; 4] = ["forward", "backward", "optimizer", "data_loading"];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics schema error: missing required field `{field}`")]
    MissingField { field: String },
    #[error("metrics schema error: {0}")]
    Schema(String),
    #[error("metrics validation error in `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl MetricsError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        MetricsError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Name of the offending field, when the error is tied to one.
    pub fn field(&self) -> Option<&str> {
        match self {
            MetricsError::MissingField { field } | MetricsError::Invalid { field, .. } => {
                Some(field)
            }
            MetricsError::Schema(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitDisposition {
    Ok,
    NonzeroExit,
    Timeout,
    Crash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub step: u64,
    pub step_avg_time: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionProfile {
    pub name: String,
    pub total_time: f64,
    pub avg_time: f64,
    pub pct_of_total: f64,
    pub call_count: u64,
}

impl SectionProfile {
    /// Checks `avg_time * call_count` against `total_time` at
    /// [`SECTION_RELATIVE_TOLERANCE`].
    pub fn is_consistent(&self) -> bool {
        let recomputed = self.avg_time * self.call_count as f64;
        let scale = self.total_time.abs().max(recomputed.abs());
        if scale == 0.0 {
            return true;
        }
        (recomputed - self.total_time).abs() <= SECTION_RELATIVE_TOLERANCE * scale
    }
}

/// One row of the kernel or CPU-op table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpEntry {
    pub name: String,
    pub total_time: f64,
    pub call_count: u64,
}

/// Values the harness says it actually used, bound to the manifest digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attestation {
    pub manifest_digest: String,
    pub attested: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub final_val_loss: f64,
    pub total_train_time: f64,
    pub step_avg_time: f64,
    pub iterations: u64,
    pub checkpoints: Vec<Checkpoint>,
    pub sections: Vec<SectionProfile>,
    pub kernel_table: Vec<OpEntry>,
    pub cpu_op_table: Vec<OpEntry>,
    pub throughput_tokens_per_s: f64,
    pub peak_memory_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attestation: Option<Attestation>,
    pub exit_disposition: ExitDisposition,
    #[serde(flatten)]
    pub extras: BTreeMap<String, Value>,
}

/// Required top-level keys, checked before typed deserialization so the
/// error names the field rather than a serde position.
const REQUIRED_FIELDS: [&str; 11] = [
    "final_val_loss",
    "total_train_time",
    "step_avg_time",
    "iterations",
    "checkpoints",
    "sections",
    "kernel_table",
    "cpu_op_table",
    "throughput_tokens_per_s",
    "peak_memory_bytes",
    "exit_disposition",
];

/// Parses and validates a metrics document.
pub fn parse_metrics(bytes: &[u8]) -> Result<MetricsReport, MetricsError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| MetricsError::Schema(e.to_string()))?;
    let object = value
        .as_object()
        .ok_or_else(|| MetricsError::Schema("top level must be a JSON object".into()))?;
    for field in REQUIRED_FIELDS {
        if !object.contains_key(field) {
            return Err(MetricsError::MissingField {
                field: field.to_string(),
            });
        }
    }
    if let Some(sections) = object.get("sections").and_then(Value::as_array) {
        for name in REQUIRED_SECTIONS {
            let present = sections
                .iter()
                .any(|s| s.get("name").and_then(Value::as_str) == Some(name));
            if !present {
                return Err(MetricsError::MissingField {
                    field: format!("sections.{name}"),
                });
            }
        }
    }
    let report: MetricsReport =
        serde_json::from_value(value).map_err(|e| MetricsError::Schema(e.to_string()))?;
    report.validate()?;
    Ok(report)
}

impl MetricsReport {
    /// Canonical serialization: struct field order, extras appended in key
    /// order, two-space indentation, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("metrics serialize");
        out.push('\n');
        out
    }

    pub fn section(&self, name: &str) -> Option<&SectionProfile> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Sections ordered by share of total time, largest first.
    pub fn top_sections(&self, n: usize) -> Vec<&SectionProfile> {
        let mut sorted: Vec<&SectionProfile> = self.sections.iter().collect();
        sorted.sort_by(|a, b| b.pct_of_total.total_cmp(&a.pct_of_total));
        sorted.truncate(n);
        sorted
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let finite = [
            ("final_val_loss", self.final_val_loss),
            ("total_train_time", self.total_train_time),
            ("step_avg_time", self.step_avg_time),
            ("throughput_tokens_per_s", self.throughput_tokens_per_s),
        ];
        for (field, v) in finite {
            if !v.is_finite() || v < 0.0 {
                return Err(MetricsError::invalid(
                    field,
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        if self.exit_disposition == ExitDisposition::Ok && self.step_avg_time <= 0.0 {
            return Err(MetricsError::invalid(
                "step_avg_time",
                "must be positive when exit_disposition is ok",
            ));
        }

        for pair in self.checkpoints.windows(2) {
            if pair[1].step <= pair[0].step {
                return Err(MetricsError::invalid(
                    "checkpoints",
                    format!("steps not strictly increasing ({} then {})", pair[0].step, pair[1].step),
                ));
            }
        }

        self.validate_sections()?;
        validate_op_table("kernel_table", &self.kernel_table)?;
        validate_op_table("cpu_op_table", &self.cpu_op_table)?;
        Ok(())
    }

    fn validate_sections(&self) -> Result<(), MetricsError> {
        if self.sections.len() != REQUIRED_SECTIONS.len() {
            return Err(MetricsError::invalid(
                "sections",
                format!("expected exactly {} sections, got {}", REQUIRED_SECTIONS.len(), self.sections.len()),
            ));
        }
        let mut pct_sum = 0.0;
        for section in &self.sections {
            if !REQUIRED_SECTIONS.contains(&section.name.as_str()) {
                return Err(MetricsError::invalid(
                    "sections",
                    format!("unknown section `{}`", section.name),
                ));
            }
            let field = format!("sections.{}", section.name);
            if section.call_count == 0 {
                return Err(MetricsError::invalid(field, "call_count must be positive"));
            }
            if !(0.0..=100.0).contains(&section.pct_of_total) {
                return Err(MetricsError::invalid(field, "pct_of_total outside [0, 100]"));
            }
            if !section.total_time.is_finite() || section.total_time < 0.0 || section.avg_time < 0.0 {
                return Err(MetricsError::invalid(field, "times must be finite and non-negative"));
            }
            if !section.is_consistent() {
                return Err(MetricsError::invalid(
                    field,
                    format!(
                        "avg_time * call_count = {} differs from total_time = {}",
                        section.avg_time * section.call_count as f64,
                        section.total_time
                    ),
                ));
            }
            pct_sum += section.pct_of_total;
        }
        // Summed percentages accumulate rounding from the harness side.
        if pct_sum > 100.0 + 1e-6 {
            return Err(MetricsError::invalid(
                "sections",
                format!("pct_of_total sums to {pct_sum} > 100"),
            ));
        }
        Ok(())
    }
}

fn validate_op_table(field: &str, table: &[OpEntry]) -> Result<(), MetricsError> {
    if table.len() > MAX_OP_TABLE_ENTRIES {
        return Err(MetricsError::invalid(
            field,
            format!("{} entries exceed the cap of {MAX_OP_TABLE_ENTRIES}", table.len()),
        ));
    }
    if table.windows(2).any(|w| w[1].total_time > w[0].total_time) {
        return Err(MetricsError::invalid(field, "not sorted descending by total_time"));
    }
    Ok(())
}
