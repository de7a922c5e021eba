//! Split-conformal calibration of the stopping threshold.
//!
//! Each calibration trace is reduced to one score: the smallest prediction
//! the model emitted while the incumbent was still more than epsilon from
//! optimal (inclusive of the first epsilon-good tick). Stopping at kappa is
//! premature on a fresh trace only if its score is below kappa, so choosing
//! kappa as a low quantile of exchangeable scores bounds the premature-stop
//! probability without any assumption on the predictor.

use crate::trace_math::{GapSeries, StopTick};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConformalError {
    #[error("alpha must be strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),
    #[error("delta must be strictly between 0 and 1, got {0}")]
    InvalidDelta(f64),
    #[error("need at least one calibration score")]
    NoCalibrationScores,
    #[error("calibration score {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("gap ceiling must be nonnegative, got {0}")]
    NegativeGapCeiling(f64),
}

/// Smallest n such that (n+1)/(c+1) >= 1 - alpha, clamped to [1, c]. This is
/// the order statistic (counted from the top) whose value guarantees
/// coverage n/(c+1) for the strict-exceedance event.
pub fn quantile_index(c: usize, alpha: f64) -> Result<usize, ConformalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    if c == 0 {
        return Err(ConformalError::NoCalibrationScores);
    }
    let target = (1.0 - alpha) * (c as f64 + 1.0);
    // Snap near-integers before ceiling so float dust cannot shift the index.
    let rounded = target.round();
    let n_plus_1 = if (target - rounded).abs() < 1e-9 {
        rounded
    } else {
        target.ceil()
    };
    let n = (n_plus_1 as usize).saturating_sub(1);
    Ok(n.clamp(1, c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub score: f64,
    /// True when the trace never reached epsilon-optimality, so no prefix
    /// was unsafe to stop in; such traces keep the most conservative score.
    pub degenerate: bool,
}

/// Score of one calibration trace: the minimum prediction over ticks up to
/// and including the first tick where the true gap reached epsilon.
pub fn conformal_score(
    predictions: &GapSeries,
    true_gaps: &GapSeries,
    epsilon: f64,
) -> ScoreOutcome {
    let t_star = match true_gaps.left_inverse(epsilon) {
        StopTick::Tick(t) => t,
        StopTick::BeyondTrace => {
            return ScoreOutcome {
                score: 0.0,
                degenerate: true,
            }
        }
    };
    let prefix = match predictions.truncate(t_star) {
        Some(p) => p,
        None => {
            return ScoreOutcome {
                score: 0.0,
                degenerate: true,
            }
        }
    };
    let score = prefix
        .values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    ScoreOutcome {
        score,
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kappa: f64,
    /// n in the quantile rule; kappa is the n-th largest score.
    pub quantile_index: usize,
    pub alpha: f64,
    pub num_scores: usize,
    pub degenerate_count: usize,
    /// Scores in descending order, for reports and audits.
    pub scores_sorted: Vec<f64>,
}

/// Picks the stopping threshold as the n-th largest calibration score with
/// n = quantile_index(c, alpha).
pub fn calibrate(scores: &[ScoreOutcome], alpha: f64) -> Result<Calibration, ConformalError> {
    let c = scores.len();
    let n = quantile_index(c, alpha)?;
    for (index, s) in scores.iter().enumerate() {
        if !s.score.is_finite() {
            return Err(ConformalError::NonFiniteScore { index });
        }
    }
    let mut sorted: Vec<f64> = scores.iter().map(|s| s.score).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let kappa = sorted[n - 1];
    Ok(Calibration {
        kappa,
        quantile_index: n,
        alpha,
        num_scores: c,
        degenerate_count: scores.iter().filter(|s| s.degenerate).count(),
        scores_sorted: sorted,
    })
}

/// Finite-sample ceiling on the expected gap at the learned stop:
/// mean observed gap plus a uniform-convergence term and a sampling term,
/// both scaled by the worst-case gap.
pub fn expected_gap_bound(
    eps_mean: f64,
    s_max: f64,
    c: usize,
    delta: f64,
) -> Result<f64, ConformalError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ConformalError::InvalidDelta(delta));
    }
    if c == 0 {
        return Err(ConformalError::NoCalibrationScores);
    }
    if s_max < 0.0 {
        return Err(ConformalError::NegativeGapCeiling(s_max));
    }
    let cf = c as f64;
    let uniform = (((cf).ln() + 1.0) / cf).sqrt();
    let sampling = ((1.0 / delta).ln() / (2.0 * cf)).sqrt();
    Ok(eps_mean + s_max * uniform + s_max * sampling)
}

/// Finite-sample floor on the probability that the learned stop is
/// epsilon-optimal: the nominal level minus a two-sided sampling term.
pub fn success_probability_bound(
    alpha: f64,
    c: usize,
    delta: f64,
) -> Result<f64, ConformalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ConformalError::InvalidDelta(delta));
    }
    if c == 0 {
        return Err(ConformalError::NoCalibrationScores);
    }
    let cf = c as f64;
    Ok(1.0 - alpha - ((2.0 / delta).ln() / (2.0 * cf)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn series(values: &[f64]) -> GapSeries {
        GapSeries::new((0..values.len() as u64).collect(), values.to_vec()).unwrap()
    }

    #[test]
    fn quantile_index_frozen_values() {
        assert_eq!(quantile_index(100, 0.05).unwrap(), 95);
        assert_eq!(quantile_index(28, 0.05).unwrap(), 27);
        assert_eq!(quantile_index(50, 0.05).unwrap(), 48);
        assert_eq!(quantile_index(1, 0.05).unwrap(), 1);
        assert_eq!(quantile_index(3, 0.25).unwrap(), 2);
    }

    #[test]
    fn quantile_index_survives_float_dust() {
        // 0.9 * 10 lands a hair above 9.0 in f64; the exact rule wants n = 8.
        assert_eq!(quantile_index(9, 0.1).unwrap(), 8);
        // 0.95 * 20 = 19 exactly in the reals: n + 1 = 19.
        assert_eq!(quantile_index(19, 0.05).unwrap(), 18);
    }

    #[test]
    fn quantile_index_rejects_bad_inputs() {
        assert_eq!(
            quantile_index(10, 0.0).unwrap_err(),
            ConformalError::InvalidAlpha(0.0)
        );
        assert_eq!(
            quantile_index(10, 1.0).unwrap_err(),
            ConformalError::InvalidAlpha(1.0)
        );
        assert_eq!(
            quantile_index(0, 0.05).unwrap_err(),
            ConformalError::NoCalibrationScores
        );
    }

    proptest! {
        #[test]
        fn quantile_index_matches_exact_arithmetic(c in 1usize..400, anum in 1u32..99) {
            // alpha = anum / 100 exactly, rule checked in integers:
            // (n+1) * 100 >= (100 - anum) * (c+1).
            let alpha = anum as f64 / 100.0;
            let n = quantile_index(c, alpha).unwrap();
            let exact = (1..=c)
                .find(|&k| (k as u64 + 1) * 100 >= (100 - anum as u64) * (c as u64 + 1))
                .unwrap_or(c);
            prop_assert_eq!(n, exact.clamp(1, c));
        }
    }

    #[test]
    fn score_takes_min_prediction_up_to_first_safe_tick() {
        let preds = series(&[0.5, 0.3, 0.15, 0.4]);
        let gaps = series(&[0.3, 0.2, 0.05, 0.01]);
        let out = conformal_score(&preds, &gaps, 0.05);
        assert!(!out.degenerate);
        assert_eq!(out.score, 0.15, "min over ticks 0..=2 inclusive");
        // Tighter epsilon moves the safe tick later and can only shrink the min.
        let tighter = conformal_score(&preds, &gaps, 0.01);
        assert_eq!(tighter.score, 0.15);
    }

    #[test]
    fn score_is_degenerate_when_trace_never_gets_safe() {
        let preds = series(&[0.5, 0.3]);
        let gaps = series(&[0.4, 0.2]);
        let out = conformal_score(&preds, &gaps, 0.05);
        assert!(out.degenerate);
        assert_eq!(out.score, 0.0);
    }

    #[test]
    fn calibrate_picks_nth_largest() {
        let scores: Vec<ScoreOutcome> = [0.1, 0.3, 0.2]
            .iter()
            .map(|&score| ScoreOutcome {
                score,
                degenerate: false,
            })
            .collect();
        let cal = calibrate(&scores, 0.25).unwrap();
        assert_eq!(cal.quantile_index, 2);
        assert_eq!(cal.kappa, 0.2, "second largest of {{0.1, 0.2, 0.3}}");
        assert_eq!(cal.scores_sorted, vec![0.3, 0.2, 0.1]);
        assert_eq!(cal.degenerate_count, 0);
    }

    #[test]
    fn calibrate_counts_degenerates_and_keeps_them() {
        let scores = vec![
            ScoreOutcome {
                score: 0.4,
                degenerate: false,
            },
            ScoreOutcome {
                score: 0.0,
                degenerate: true,
            },
        ];
        let cal = calibrate(&scores, 0.05).unwrap();
        assert_eq!(cal.num_scores, 2);
        assert_eq!(cal.degenerate_count, 1);
        // n = quantile_index(2, 0.05) = 2, so the degenerate zero is kappa.
        assert_eq!(cal.kappa, 0.0);
    }

    #[test]
    fn calibrate_examples_with_ties_and_unsorted_input() {
        let mk = |vals: &[f64]| -> Vec<ScoreOutcome> {
            vals.iter()
                .map(|&score| ScoreOutcome {
                    score,
                    degenerate: false,
                })
                .collect()
        };
        // c = 4, alpha = 0.25: n = 3, third largest of {0.9, 0.5, 0.2, 0.1}.
        let cal = calibrate(&mk(&[0.5, 0.2, 0.9, 0.1]), 0.25).unwrap();
        assert_eq!(cal.quantile_index, 3);
        assert_eq!(cal.kappa, 0.2);
        // Ties collapse: every rank picks the same value.
        let tied = calibrate(&mk(&[0.3, 0.3, 0.3, 0.3, 0.3]), 0.4).unwrap();
        assert_eq!(tied.kappa, 0.3);
    }

    proptest! {
        #[test]
        fn zeroing_a_score_never_raises_kappa(
            raw in proptest::collection::vec(0usize..8, 2..40),
            anum in 1u32..99,
            victim in 0usize..40,
        ) {
            // Degenerate traces get score zero. That substitution must be
            // conservative: it can lower the threshold, never raise it.
            let palette = [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.5];
            let scores: Vec<ScoreOutcome> = raw
                .iter()
                .map(|&i| ScoreOutcome { score: palette[i], degenerate: false })
                .collect();
            let alpha = anum as f64 / 100.0;
            let before = calibrate(&scores, alpha).unwrap().kappa;
            let mut zeroed = scores.clone();
            let v = victim % zeroed.len();
            zeroed[v] = ScoreOutcome { score: 0.0, degenerate: true };
            let after = calibrate(&zeroed, alpha).unwrap().kappa;
            prop_assert!(after <= before);
        }
    }

    #[test]
    fn calibrate_rejects_non_finite_scores() {
        let scores = vec![ScoreOutcome {
            score: f64::NAN,
            degenerate: false,
        }];
        assert_eq!(
            calibrate(&scores, 0.1).unwrap_err(),
            ConformalError::NonFiniteScore { index: 0 }
        );
    }

    proptest! {
        #[test]
        fn kappa_rank_bounds_hold(
            raw in proptest::collection::vec(0usize..8, 1..60),
            anum in 1u32..99,
        ) {
            // Small palette so ties are common.
            let palette = [0.0, 0.0, 0.1, 0.2, 0.2, 0.3, 0.5, 1.0];
            let scores: Vec<ScoreOutcome> = raw
                .iter()
                .map(|&i| ScoreOutcome { score: palette[i], degenerate: false })
                .collect();
            let alpha = anum as f64 / 100.0;
            let c = scores.len();
            let cal = calibrate(&scores, alpha).unwrap();
            let n = cal.quantile_index;
            let strictly_above = scores.iter().filter(|s| s.score > cal.kappa).count();
            let at_or_above = scores.iter().filter(|s| s.score >= cal.kappa).count();
            // kappa is the n-th largest: fewer than n strictly above, at
            // least n at-or-above.
            prop_assert!(strictly_above < n);
            prop_assert!(at_or_above >= n);
            prop_assert!(n >= 1 && n <= c);
        }
    }

    #[test]
    fn bound_calculators_hit_frozen_digits() {
        let e = expected_gap_bound(0.0, 1.0, 100, 0.05).unwrap();
        assert_abs_diff_eq!(e, 0.3591397477728812, epsilon = 1e-12);
        assert_abs_diff_eq!(e, 0.35914, epsilon = 1e-5);
        let s = success_probability_bound(0.05, 100, 0.05).unwrap();
        assert_abs_diff_eq!(s, 0.8141898484259381, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.81419, epsilon = 1e-5);
    }

    #[test]
    fn bounds_move_the_right_way() {
        let base = expected_gap_bound(0.01, 2.0, 100, 0.05).unwrap();
        assert!(expected_gap_bound(0.01, 2.0, 400, 0.05).unwrap() < base);
        assert!(expected_gap_bound(0.01, 2.0, 100, 0.01).unwrap() > base);
        assert!(expected_gap_bound(0.02, 2.0, 100, 0.05).unwrap() > base);
        let sb = success_probability_bound(0.1, 100, 0.05).unwrap();
        assert!(success_probability_bound(0.1, 1000, 0.05).unwrap() > sb);
        assert!(success_probability_bound(0.05, 100, 0.05).unwrap() > sb);
    }

    #[test]
    fn gap_ceiling_collapses_to_the_mean_in_the_limit() {
        // Both correction terms scale with max_value and shrink like
        // sqrt(log c / c), so a huge sample pins the bound to the mean.
        let tight = expected_gap_bound(0.02, 1.0, 100_000_000, 0.05).unwrap();
        assert!(tight - 0.02 < 1e-3, "correction {} not vanishing", tight - 0.02);
        assert_eq!(expected_gap_bound(0.02, 0.0, 10, 0.05).unwrap(), 0.02);
    }

    #[test]
    fn success_floor_is_vacuous_for_one_calibration_trace() {
        let s = success_probability_bound(0.05, 1, 0.05).unwrap();
        assert_abs_diff_eq!(s, -0.4081015157406195, epsilon = 1e-12);
        assert!(s < 0.0, "a single trace cannot certify anything");
    }

    #[test]
    fn bound_calculators_reject_bad_inputs() {
        assert!(expected_gap_bound(0.0, -1.0, 10, 0.05).is_err());
        assert!(expected_gap_bound(0.0, 1.0, 0, 0.05).is_err());
        assert!(expected_gap_bound(0.0, 1.0, 10, 0.0).is_err());
        assert!(success_probability_bound(0.0, 10, 0.05).is_err());
        assert!(success_probability_bound(0.05, 10, 1.0).is_err());
    }
}
