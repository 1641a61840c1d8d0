use thiserror::Error;

use crate::integrity_guard::{ProtectedParams, Verdict};
use crate::program_store::ProgramStatus;
use crate::telemetry::{ExitDisposition, MetricsReport};

/// Losses below this fraction of the threshold are journaled as suspicious.
pub const SUSPICIOUS_LOSS_FRACTION: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("no score for a run with exit disposition {0:?}")]
    NotOk(ExitDisposition),
}

/// `step_avg_time * final_val_loss`; lower is better.
pub fn compute_score(report: &MetricsReport) -> Result<f64, ScoreError> {
    if report.exit_disposition != ExitDisposition::Ok {
        return Err(ScoreError::NotOk(report.exit_disposition));
    }
    Ok(report.step_avg_time * report.final_val_loss)
}

pub fn is_suspicious(report: &MetricsReport, protected: &ProtectedParams) -> bool {
    report.final_val_loss < SUSPICIOUS_LOSS_FRACTION * protected.loss_threshold
}

pub fn classify(report: &MetricsReport, verdict: &Verdict, protected: &ProtectedParams) -> ProgramStatus {
    if report.exit_disposition != ExitDisposition::Ok || !verdict.is_ok() {
        ProgramStatus::Buggy
    } else if report.final_val_loss > protected.loss_threshold {
        ProgramStatus::OverThreshold
    } else {
        ProgramStatus::Acceptable
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::metrics::fixtures::report;
    use proptest::prelude::*;

    fn protected(threshold: f64) -> ProtectedParams {
        ProtectedParams {
            loss_threshold: threshold,
            ..Default::default()
        }
    }

    #[test]
    fn product_examples() {
        assert_eq!(compute_score(&report(3.28, 2.0)).unwrap(), 6.56);
        // Exact oracle: 33001e-4 * 1234e-4 = 40_723_234e-8.
        let expected = (33_001u64 * 1_234) as f64 * 1e-8;
        let s = compute_score(&report(3.3001, 0.1234)).unwrap();
        assert!((s - expected).abs() < 1e-9, "{s}");
        assert!((s - 0.40723234).abs() < 1e-9);
    }

    #[test]
    fn zero_loss_scores_zero_and_is_suspicious() {
        let r = report(0.0, 2.0);
        assert_eq!(compute_score(&r).unwrap(), 0.0);
        assert!(is_suspicious(&r, &protected(3.28)));
        assert!(!is_suspicious(&report(1.64, 2.0), &protected(3.28)));
    }

    #[test]
    fn failed_run_has_no_score() {
        let mut r = report(3.0, 1.0);
        r.exit_disposition = ExitDisposition::Timeout;
        assert_eq!(compute_score(&r), Err(ScoreError::NotOk(ExitDisposition::Timeout)));
    }

    #[test]
    fn classification_examples() {
        let p = protected(3.28);
        assert_eq!(classify(&report(3.279, 1.0), &Verdict::Ok, &p), ProgramStatus::Acceptable);
        assert_eq!(classify(&report(3.28, 1.0), &Verdict::Ok, &p), ProgramStatus::Acceptable);
        assert_eq!(classify(&report(3.30, 1.0), &Verdict::Ok, &p), ProgramStatus::OverThreshold);
        let bad = Verdict::Violations(vec!["val_seq_len".into()]);
        assert_eq!(classify(&report(3.0, 1.0), &bad, &p), ProgramStatus::Buggy);
        let mut crashed = report(3.0, 1.0);
        crashed.exit_disposition = ExitDisposition::Crash;
        assert_eq!(classify(&crashed, &Verdict::Ok, &p), ProgramStatus::Buggy);
    }

    proptest! {
        #[test]
        fn score_monotone(t in 1e-4f64..10.0, l in 0.0f64..10.0, dt in 1e-6f64..1.0, dl in 1e-6f64..1.0) {
            let base = compute_score(&report(l, t)).unwrap();
            prop_assert!(compute_score(&report(l + dl, t)).unwrap() >= base);
            prop_assert!(compute_score(&report(l, t + dt)).unwrap() >= base);
        }
    }
}
