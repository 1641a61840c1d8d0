//! Protected evaluation parameters and report attestation.
//!
//! The harness, not the candidate, owns the evaluation entry point: it reads
//! the manifest, runs the candidate's components against the manifest's data
//! slices, sequence length, loss and masks, then echoes the values it used in
//! the report's `attestation` section together with their digest. The engine
//! checks that echo here. The trust boundary is the harness process; nothing
//! is signed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::program_store::persist::sha256_hex;
use crate::telemetry::MetricsReport;

pub const NO_ATTESTATION: &str = "no-attestation";
pub const DIGEST_MISMATCH: &str = "manifest_digest";
pub const BROKEN_DIGEST_CHAIN: &str = "attestation-digest";

#[derive(Debug, Error, PartialEq)]
pub enum IntegrityError {
    #[error("protected parameters invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub path_pattern: String,
    pub start: u64,
    pub end: u64,
}

impl SliceSpec {
    pub fn overlaps(&self, other: &SliceSpec) -> bool {
        self.path_pattern == other.path_pattern && self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtectedParams {
    pub train_slice: SliceSpec,
    pub val_slice: SliceSpec,
    pub val_seq_len: u32,
    pub loss_fn_id: String,
    pub mask_policy_id: String,
    /// Target validation cross-entropy in nats.
    pub loss_threshold: f64,
}

impl Default for ProtectedParams {
    /// Manifest for the bundled toy task.
    fn default() -> Self {
        Self {
            train_slice: SliceSpec {
                path_pattern: "toy://markov-v1".into(),
                start: 0,
                end: 262_144,
            },
            val_slice: SliceSpec {
                path_pattern: "toy://markov-v1".into(),
                start: 1_048_576,
                end: 1_081_344,
            },
            val_seq_len: 64,
            loss_fn_id: "harness.cross_entropy.v1".into(),
            mask_policy_id: "harness.causal_document_mask.v1".into(),
            loss_threshold: TOY_LOSS_THRESHOLD,
        }
    }
}

/// Loss target for the toy task, calibrated against the shipped seed program.
pub const TOY_LOSS_THRESHOLD: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    TrainSlice,
    ValSlice,
    ValSeqLen,
    LossFnId,
    MaskPolicyId,
    LossThreshold,
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot::TrainSlice,
        Slot::ValSlice,
        Slot::ValSeqLen,
        Slot::LossFnId,
        Slot::MaskPolicyId,
        Slot::LossThreshold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::TrainSlice => "train_slice",
            Slot::ValSlice => "val_slice",
            Slot::ValSeqLen => "val_seq_len",
            Slot::LossFnId => "loss_fn_id",
            Slot::MaskPolicyId => "mask_policy_id",
            Slot::LossThreshold => "loss_threshold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enforcement {
    pub inject_at_runtime: bool,
    pub verify_after: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub overrides: BTreeMap<String, Value>,
    pub enforcement: BTreeMap<String, Enforcement>,
    pub manifest_digest: String,
}

impl ProtectedParams {
    pub fn validate(&self) -> Result<(), IntegrityError> {
        let fail = |m: String| Err(IntegrityError::Invalid(m));
        for (name, s) in [("train_slice", &self.train_slice), ("val_slice", &self.val_slice)] {
            if s.start >= s.end {
                return fail(format!("{name} is empty (start {} >= end {})", s.start, s.end));
            }
        }
        if self.train_slice.overlaps(&self.val_slice) {
            return fail("train_slice and val_slice overlap".into());
        }
        if self.val_seq_len == 0 {
            return fail("val_seq_len must be positive".into());
        }
        if !(self.loss_threshold > 0.0 && self.loss_threshold.is_finite()) {
            return fail("loss_threshold must be positive".into());
        }
        if self.loss_fn_id.is_empty() || self.mask_policy_id.is_empty() {
            return fail("loss_fn_id and mask_policy_id must be non-empty".into());
        }
        Ok(())
    }

    /// JSON value of every slot, keyed by slot name.
    pub fn slot_values(&self) -> BTreeMap<String, Value> {
        let Value::Object(map) = serde_json::to_value(self).expect("params serialize") else {
            unreachable!("struct serializes to an object")
        };
        map.into_iter().collect()
    }
}

/// SHA-256 over the compact, key-sorted JSON form of the parameters.
pub fn manifest_digest(params: &ProtectedParams) -> String {
    digest_of_slots(&params.slot_values())
}

fn digest_of_slots(slots: &BTreeMap<String, Value>) -> String {
    // BTreeMap iteration gives sorted keys at every level.
    let canonical = serde_json::to_string(slots).expect("slots serialize");
    sha256_hex(canonical.as_bytes())
}

pub fn compile_injection_plan(params: &ProtectedParams) -> Result<InjectionSpec, IntegrityError> {
    params.validate()?;
    let overrides = params.slot_values();
    let enforcement = Slot::ALL
        .iter()
        .map(|s| {
            (
                s.name().to_string(),
                Enforcement {
                    inject_at_runtime: true,
                    verify_after: true,
                },
            )
        })
        .collect();
    Ok(InjectionSpec {
        manifest_digest: digest_of_slots(&overrides),
        overrides,
        enforcement,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Violations(Vec<String>),
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }

    pub fn violations(&self) -> &[String] {
        match self {
            Verdict::Ok => &[],
            Verdict::Violations(v) => v,
        }
    }
}

fn values_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_u64(), y.as_u64()) {
            (Some(p), Some(q)) => p == q,
            _ => x.as_f64() == y.as_f64(),
        },
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| values_equal(v, w)))
        }
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(v, w)| values_equal(v, w)),
        _ => a == b,
    }
}

/// Checks the report's attestation against the manifest. Pure and
/// independent of slot order.
pub fn verify_report(report: &MetricsReport, params: &ProtectedParams) -> Verdict {
    let Some(att) = &report.attestation else {
        return Verdict::Violations(vec![NO_ATTESTATION.to_string()]);
    };
    let expected = params.slot_values();
    let mut violations = Vec::new();
    if att.manifest_digest != digest_of_slots(&expected) {
        violations.push(DIGEST_MISMATCH.to_string());
    }
    for slot in Slot::ALL {
        let name = slot.name();
        let ok = att
            .attested
            .get(name)
            .is_some_and(|v| values_equal(v, &expected[name]));
        if !ok {
            violations.push(name.to_string());
        }
    }
    // The digest the harness claims must be the digest of what it attests.
    let attested_params: Option<ProtectedParams> =
        serde_json::to_value(&att.attested).ok().and_then(|v| serde_json::from_value(v).ok());
    if attested_params.is_none_or(|p| manifest_digest(&p) != att.manifest_digest) {
        violations.push(BROKEN_DIGEST_CHAIN.to_string());
    }
    if violations.is_empty() {
        Verdict::Ok
    } else {
        Verdict::Violations(violations)
    }
}

/// Attestation block an honest harness produces for `params`.
pub fn attestation_for(params: &ProtectedParams) -> crate::telemetry::Attestation {
    crate::telemetry::Attestation {
        manifest_digest: manifest_digest(params),
        attested: params.slot_values(),
    }
}
