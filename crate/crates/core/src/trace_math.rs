//! Step-function algebra over bound traces.
//!
//! A solve trace induces a gap series g(t): piecewise constant, defined on
//! the sample ticks, held at the last sample value between ticks. Stopping
//! rules are first-crossing times of such series, so everything downstream
//! reduces to `left_inverse` plus `rolling_min`.

use crate::bnb_solver::{algorithmic_gap, BoundTrace};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TraceMathError {
    #[error("true gap is undefined when the optimum is zero")]
    ZeroOptimum,
    #[error("series needs at least one sample")]
    EmptySeries,
    #[error("series has {ticks} ticks but {values} values")]
    MismatchedLengths { ticks: usize, values: usize },
    #[error("series ticks must strictly increase")]
    NonMonotonicTicks,
}

/// First tick at which a series crosses a threshold, if it ever does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopTick {
    Tick(u64),
    BeyondTrace,
}

impl StopTick {
    pub fn tick(self) -> Option<u64> {
        match self {
            StopTick::Tick(t) => Some(t),
            StopTick::BeyondTrace => None,
        }
    }

    /// True when the stop happens strictly after `t` (never, for
    /// `BeyondTrace`). This is the comparison the duality laws are stated in.
    pub fn exceeds(self, t: u64) -> bool {
        match self {
            StopTick::Tick(s) => s > t,
            StopTick::BeyondTrace => true,
        }
    }

    /// Resolves to a concrete tick, substituting `fallback` for a crossing
    /// that never happens and capping at the fallback otherwise.
    pub fn or_fallback(self, fallback: u64) -> u64 {
        match self {
            StopTick::Tick(t) => t.min(fallback),
            StopTick::BeyondTrace => fallback,
        }
    }
}

/// Piecewise-constant series sampled at strictly increasing ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSeries {
    ticks: Vec<u64>,
    values: Vec<f64>,
}

impl GapSeries {
    pub fn new(ticks: Vec<u64>, values: Vec<f64>) -> Result<Self, TraceMathError> {
        if ticks.is_empty() {
            return Err(TraceMathError::EmptySeries);
        }
        if ticks.len() != values.len() {
            return Err(TraceMathError::MismatchedLengths {
                ticks: ticks.len(),
                values: values.len(),
            });
        }
        if ticks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TraceMathError::NonMonotonicTicks);
        }
        Ok(GapSeries { ticks, values })
    }

    /// Algorithmic gap after every sample of a solve trace.
    pub fn from_trace(trace: &BoundTrace) -> Result<Self, TraceMathError> {
        let ticks: Vec<u64> = trace.samples.iter().map(|s| s.tick).collect();
        let values: Vec<f64> = trace
            .samples
            .iter()
            .map(|s| algorithmic_gap(s.upper, s.lower))
            .collect();
        GapSeries::new(ticks, values)
    }

    pub fn ticks(&self) -> &[u64] {
        &self.ticks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.ticks.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty series
    }

    pub fn terminal_tick(&self) -> u64 {
        *self.ticks.last().expect("series is nonempty")
    }

    /// Value in effect at `t`; None before the first sample.
    pub fn value_at(&self, t: u64) -> Option<f64> {
        let idx = self.ticks.partition_point(|&tick| tick <= t);
        idx.checked_sub(1).map(|i| self.values[i])
    }

    /// Running minimum: the best value seen up to each tick. Turns any series
    /// into a nonincreasing one without moving its first crossing times.
    pub fn rolling_min(&self) -> GapSeries {
        let mut best = f64::INFINITY;
        let values = self
            .values
            .iter()
            .map(|&v| {
                if v < best {
                    best = v;
                }
                best
            })
            .collect();
        GapSeries {
            ticks: self.ticks.clone(),
            values,
        }
    }

    /// First tick whose value is <= x. For a nonincreasing series this is the
    /// generalized inverse; for an arbitrary one it is the first crossing.
    pub fn left_inverse(&self, x: f64) -> StopTick {
        for (tick, value) in self.ticks.iter().zip(&self.values) {
            if *value <= x {
                return StopTick::Tick(*tick);
            }
        }
        StopTick::BeyondTrace
    }

    /// Restriction to ticks <= t (the information available at time t).
    pub fn truncate(&self, t: u64) -> Option<GapSeries> {
        let idx = self.ticks.partition_point(|&tick| tick <= t);
        if idx == 0 {
            return None;
        }
        Some(GapSeries {
            ticks: self.ticks[..idx].to_vec(),
            values: self.values[..idx].to_vec(),
        })
    }
}

/// Relative distance of an incumbent value from the true optimum.
pub fn true_gap(upper: f64, z_star: f64) -> Result<f64, TraceMathError> {
    if z_star == 0.0 {
        return Err(TraceMathError::ZeroOptimum);
    }
    if upper == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok((upper - z_star) / z_star.abs())
}

/// Clairvoyant stopping rule: the first tick at which the solver's own gap
/// reaches epsilon.
pub fn deterministic_stop_time(gap: &GapSeries, epsilon: f64) -> StopTick {
    gap.left_inverse(epsilon)
}

/// Predictor-driven stopping rule: stop the first time the predicted gap
/// drops to the calibrated threshold kappa, no later than `fallback`.
/// A nonpositive kappa means calibration found no usable score, so the rule
/// degenerates to the fallback alone.
pub fn learned_stop_time(predictions: &GapSeries, kappa: f64, fallback: u64) -> u64 {
    if kappa <= 0.0 {
        return fallback;
    }
    predictions.left_inverse(kappa).or_fallback(fallback)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(ticks: &[u64], values: &[f64]) -> GapSeries {
        GapSeries::new(ticks.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn true_gap_examples() {
        assert_eq!(true_gap(10.0, 8.0).unwrap(), 0.25);
        assert_eq!(true_gap(5.0, 5.0).unwrap(), 0.0);
        assert_eq!(true_gap(f64::INFINITY, 8.0).unwrap(), f64::INFINITY);
        assert_eq!(true_gap(-9.0, -10.0).unwrap(), 0.1);
        assert_eq!(true_gap(3.0, 0.0), Err(TraceMathError::ZeroOptimum));
    }

    #[test]
    fn constructor_rejects_malformed_series() {
        assert_eq!(
            GapSeries::new(vec![], vec![]).unwrap_err(),
            TraceMathError::EmptySeries
        );
        assert_eq!(
            GapSeries::new(vec![0, 1], vec![1.0]).unwrap_err(),
            TraceMathError::MismatchedLengths { ticks: 2, values: 1 }
        );
        assert_eq!(
            GapSeries::new(vec![0, 0], vec![1.0, 2.0]).unwrap_err(),
            TraceMathError::NonMonotonicTicks
        );
    }

    #[test]
    fn rolling_min_flattens_rebounds() {
        let s = series(&[0, 1, 2, 3], &[3.0, 1.0, 2.0, 0.5]);
        assert_eq!(s.rolling_min().values(), &[3.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn left_inverse_finds_first_crossing() {
        let s = series(&[0, 1, 2, 3], &[5.0, 3.0, 3.0, 1.0]);
        assert_eq!(s.left_inverse(10.0), StopTick::Tick(0));
        assert_eq!(s.left_inverse(3.0), StopTick::Tick(1));
        assert_eq!(s.left_inverse(2.0), StopTick::Tick(3));
        assert_eq!(s.left_inverse(0.5), StopTick::BeyondTrace);
    }

    #[test]
    fn value_lookups_hold_between_ticks() {
        let s = series(&[0, 4, 9], &[2.0, 1.0, 0.0]);
        assert_eq!(s.value_at(0), Some(2.0));
        assert_eq!(s.value_at(3), Some(2.0));
        assert_eq!(s.value_at(4), Some(1.0));
        assert_eq!(s.value_at(100), Some(0.0));
        assert_eq!(s.terminal_tick(), 9);
        let t = s.truncate(5).unwrap();
        assert_eq!(t.ticks(), &[0, 4]);
        assert!(s.truncate(0).is_some());
    }

    #[test]
    fn stop_rule_examples() {
        let preds = series(&[0, 1, 2], &[0.9, 0.4, 0.2]);
        assert_eq!(learned_stop_time(&preds, 0.3, 10), 2);
        assert_eq!(learned_stop_time(&preds, 0.05, 10), 10);
        assert_eq!(learned_stop_time(&preds, 0.0, 10), 10, "disabled predictor");
        assert_eq!(learned_stop_time(&preds, -1.0, 7), 7);
        assert_eq!(learned_stop_time(&preds, 0.5, 0), 0, "fallback caps the stop");
        let gap = series(&[0, 1, 2, 3], &[f64::INFINITY, 0.4, 0.01, 0.0]);
        assert_eq!(deterministic_stop_time(&gap, 0.05), StopTick::Tick(2));
        assert_eq!(deterministic_stop_time(&gap, 0.001), StopTick::Tick(3));
    }

    /// Threshold duality: with f-bar the running min of f, the events
    /// "f-bar(t) > k", "first crossing of f-bar is after t" and "first
    /// crossing of f is after t" coincide at every tick. Stated with strict
    /// inequalities; ties make the non-strict variant false.
    fn check_duality(s: &GapSeries, k: f64) {
        let bar = s.rolling_min();
        assert_eq!(bar.left_inverse(k), s.left_inverse(k));
        for &t in s.ticks() {
            let above = bar.value_at(t).unwrap() > k;
            assert_eq!(
                bar.left_inverse(k).exceeds(t),
                above,
                "duality broke at t={t} k={k}"
            );
        }
    }

    #[test]
    fn duality_on_tied_series() {
        // Plateau exactly at the threshold: the tie case.
        let s = series(&[0, 1, 2, 3], &[2.0, 1.0, 1.0, 0.5]);
        check_duality(&s, 1.0);
        check_duality(&s, 0.99);
        check_duality(&s, 2.0);
    }

    proptest! {
        #[test]
        fn duality_holds_on_random_series(
            raw in proptest::collection::vec(0usize..6, 1..40),
            kidx in 0usize..6,
            gaps in proptest::collection::vec(1u64..4, 1..40),
        ) {
            // Values from a small palette so ties are common.
            let palette = [0.0, 0.5, 1.0, 1.5, 2.0, f64::INFINITY];
            let mut tick = 0u64;
            let mut ticks = Vec::new();
            for (i, g) in raw.iter().zip(gaps.iter().cycle()) {
                let _ = i;
                ticks.push(tick);
                tick += g;
            }
            let values: Vec<f64> = raw.iter().map(|&i| palette[i]).collect();
            let s = GapSeries::new(ticks, values).unwrap();
            check_duality(&s, palette[kidx]);
        }

        #[test]
        fn rolling_min_is_nonincreasing_and_pointwise_below(
            raw in proptest::collection::vec(0.0f64..10.0, 1..50),
        ) {
            let ticks: Vec<u64> = (0..raw.len() as u64).collect();
            let s = GapSeries::new(ticks, raw).unwrap();
            let bar = s.rolling_min();
            for w in bar.values().windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            for (a, b) in bar.values().iter().zip(s.values()) {
                prop_assert!(a <= b);
            }
        }
    }
}
