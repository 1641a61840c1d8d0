use serde::{Deserialize, Serialize};

use crate::program_store::{ProgramId, ProgramRecord, ProgramStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub generation: u64,
    pub id: ProgramId,
    pub score: f64,
}

/// Best-so-far state of a run. `history` only grows on strict score
/// improvement.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrontierState {
    pub best_score: Option<f64>,
    /// Lowest total training time among acceptable programs.
    pub best_time_at_threshold: Option<f64>,
    pub best_loss: Option<f64>,
    pub history: Vec<FrontierPoint>,
}

impl FrontierState {
    /// Folds one record in; returns true when the score frontier moved.
    /// Unscored records are ignored.
    pub fn observe(&mut self, record: &ProgramRecord) -> bool {
        let (Some(score), Some(metrics)) = (record.score, record.metrics.as_ref()) else {
            return false;
        };
        if !record.status.is_scored() {
            return false;
        }
        if self.best_loss.is_none_or(|b| metrics.final_val_loss < b) {
            self.best_loss = Some(metrics.final_val_loss);
        }
        if record.status == ProgramStatus::Acceptable
            && self.best_time_at_threshold.is_none_or(|t| metrics.total_train_time < t)
        {
            self.best_time_at_threshold = Some(metrics.total_train_time);
        }
        if self.best_score.is_none_or(|b| score < b) {
            self.best_score = Some(score);
            self.history.push(FrontierPoint {
                generation: record.generation,
                id: record.id,
                score,
            });
            return true;
        }
        false
    }
}

pub fn update_frontier(state: &FrontierState, record: &ProgramRecord) -> FrontierState {
    let mut next = state.clone();
    next.observe(record);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program_store::test_support::{buggy, scored};
    use proptest::prelude::*;

    #[test]
    fn first_record_becomes_frontier() {
        let r = scored(0, 0, 1, 2.5);
        let f = update_frontier(&FrontierState::default(), &r);
        assert_eq!(f.best_score, Some(2.5));
        assert_eq!(f.history, vec![FrontierPoint { generation: 1, id: r.id, score: 2.5 }]);
        assert_eq!(f.best_time_at_threshold, Some(r.metrics.as_ref().unwrap().total_train_time));
    }

    #[test]
    fn equal_score_does_not_move() {
        let f = update_frontier(&FrontierState::default(), &scored(0, 0, 1, 2.5));
        let g = update_frontier(&f, &scored(1, 0, 2, 2.5));
        assert_eq!(g.history.len(), 1);
        assert_eq!(g.best_score, Some(2.5));
    }

    #[test]
    fn over_threshold_does_not_set_time() {
        let mut r = scored(0, 0, 1, 1.0);
        r.status = ProgramStatus::OverThreshold;
        let f = update_frontier(&FrontierState::default(), &r);
        assert_eq!(f.best_score, Some(1.0));
        assert_eq!(f.best_time_at_threshold, None);
    }

    #[test]
    fn buggy_ignored() {
        let f = update_frontier(&FrontierState::default(), &buggy(0, 0, 1));
        assert_eq!(f, FrontierState::default());
    }

    fn stream(scores: &[(f64, bool)]) -> Vec<ProgramRecord> {
        scores
            .iter()
            .enumerate()
            .map(|(i, (s, ok))| {
                let mut r = scored(i as u64, 0, i as u64 + 1, *s);
                if !ok {
                    r.status = ProgramStatus::OverThreshold;
                }
                // Vary the time independently of the score.
                r.metrics.as_mut().unwrap().total_train_time = ((i * 37) % 11) as f64 + 1.0;
                r
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_running_minimum(scores in prop::collection::vec((0u32..40, any::<bool>()), 50)) {
            let scores: Vec<(f64, bool)> = scores.into_iter().map(|(s, b)| (s as f64 / 4.0, b)).collect();
            let records = stream(&scores);
            let mut f = FrontierState::default();
            for r in &records {
                f.observe(r);
            }
            // Brute-force running minimum.
            let mut best: Option<f64> = None;
            let mut expected = Vec::new();
            for r in &records {
                let s = r.score.unwrap();
                if best.is_none_or(|b| s < b) {
                    best = Some(s);
                    expected.push((r.generation, r.id, s));
                }
            }
            let got: Vec<_> = f.history.iter().map(|p| (p.generation, p.id, p.score)).collect();
            prop_assert_eq!(got, expected);
            prop_assert!(f.history.windows(2).all(|w| w[1].score < w[0].score));
            let best_time = records
                .iter()
                .filter(|r| r.status == ProgramStatus::Acceptable)
                .map(|r| r.metrics.as_ref().unwrap().total_train_time)
                .reduce(f64::min);
            prop_assert_eq!(f.best_time_at_threshold, best_time);
        }

        #[test]
        fn non_improving_permutation_invariant(scores in prop::collection::vec(1u32..40, 2..30), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let scores: Vec<(f64, bool)> = scores.into_iter().map(|s| (s as f64, true)).collect();
            let records = stream(&scores);
            let mut base = FrontierState::default();
            let mut improving = Vec::new();
            let mut rest = Vec::new();
            for r in &records {
                if base.observe(r) { improving.push(r.clone()); } else { rest.push(r.clone()); }
            }
            rest.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            // Interleave the shuffled non-improvers after each improver.
            let mut f = FrontierState::default();
            for r in improving.iter() { f.observe(r); }
            for r in rest.iter() { f.observe(r); }
            prop_assert_eq!(f.history, base.history);
            prop_assert_eq!(f.best_score, base.best_score);
        }
    }
}
