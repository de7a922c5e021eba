//! Measures what the learned stopping rule buys and whether the calibration
//! guarantee holds on held-out traces.
//!
//! Everything here works on prepared traces: per-tick true gaps, per-tick
//! predictions and a few resolved landmarks. Preparing once keeps the Monte
//! Carlo resampling loop free of repeated series reconstruction.
//!
//! Four stopping rules are compared throughout: the calibrated predictor
//! ("cp"), the solver's own epsilon certificate ("deterministic_eps"), and
//! wait-for-the-k-th-incumbent baselines ("stop_at_k").

use crate::bnb_solver::BoundTrace;
use crate::conformal::{
    calibrate, conformal_score, expected_gap_bound, success_probability_bound, ConformalError,
};
use crate::trace_math::{learned_stop_time, true_gap, GapSeries, StopTick, TraceMathError};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const METHOD_CP: &str = "cp";
pub const METHOD_DETERMINISTIC: &str = "deterministic_eps";

pub fn baseline_method_name(k: usize) -> String {
    format!("stop_at_{k}")
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trace {instance_id} has no proved optimum")]
    MissingOptimum { instance_id: String },
    #[error("trace {instance_id} has optimum zero; relative gaps are undefined")]
    ZeroOptimum { instance_id: String },
    #[error("predictions for {instance_id} are not on the trace tick grid")]
    MisalignedPredictions { instance_id: String },
    #[error("pool of {pool} traces cannot support calibration size {need}")]
    PoolTooSmall { pool: usize, need: usize },
    #[error("no prepared traces")]
    EmptyPool,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    TraceMath(#[from] TraceMathError),
}

/// One solved trace with everything the stop rules need precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedTrace {
    pub instance_id: String,
    pub epsilon: f64,
    pub predictions: GapSeries,
    pub true_gaps: GapSeries,
    /// Algorithmic-gap stop: when the solver itself would declare epsilon
    /// optimality.
    pub deterministic_stop: StopTick,
    pub terminal_tick: u64,
    /// Nodes explored per tick, stored as a series for landmark lookups.
    pub nodes: GapSeries,
    pub incumbent_ticks: Vec<u64>,
}

impl PreparedTrace {
    /// Fallback tick for the learned rule: the solver's own stop, or the end
    /// of the trace if it never certified epsilon-optimality.
    pub fn fallback_tick(&self) -> u64 {
        self.deterministic_stop.or_fallback(self.terminal_tick)
    }

    pub fn learned_stop(&self, kappa: f64) -> u64 {
        learned_stop_time(&self.predictions, kappa, self.fallback_tick())
    }

    pub fn gap_at(&self, tick: u64) -> f64 {
        self.true_gaps.value_at(tick).unwrap_or(f64::INFINITY)
    }

    pub fn nodes_at(&self, tick: u64) -> f64 {
        self.nodes.value_at(tick).unwrap_or(0.0)
    }

    pub fn score(&self) -> crate::conformal::ScoreOutcome {
        conformal_score(&self.predictions, &self.true_gaps, self.epsilon)
    }
}

pub fn prepare_trace(
    trace: &BoundTrace,
    predictions: GapSeries,
    epsilon: f64,
) -> Result<PreparedTrace, EvalError> {
    let z_star = trace.z_star.ok_or_else(|| EvalError::MissingOptimum {
        instance_id: trace.instance_id.clone(),
    })?;
    if z_star == 0.0 {
        return Err(EvalError::ZeroOptimum {
            instance_id: trace.instance_id.clone(),
        });
    }
    let ticks: Vec<u64> = trace.samples.iter().map(|s| s.tick).collect();
    if predictions.ticks() != ticks.as_slice() {
        return Err(EvalError::MisalignedPredictions {
            instance_id: trace.instance_id.clone(),
        });
    }
    let gaps: Vec<f64> = trace
        .samples
        .iter()
        .map(|s| true_gap(s.upper, z_star))
        .collect::<Result<_, _>>()?;
    let true_gaps = GapSeries::new(ticks.clone(), gaps)?;
    let alg = GapSeries::from_trace(trace)?;
    let nodes = GapSeries::new(
        ticks,
        trace.samples.iter().map(|s| s.nodes_explored as f64).collect(),
    )?;
    Ok(PreparedTrace {
        instance_id: trace.instance_id.clone(),
        epsilon,
        deterministic_stop: alg.left_inverse(epsilon),
        terminal_tick: trace.terminal_tick(),
        predictions,
        true_gaps,
        nodes,
        incumbent_ticks: trace.incumbents.iter().map(|i| i.tick).collect(),
    })
}

/// Tick of the k-th incumbent (k >= 1), the "wait for k solutions" baseline.
pub fn baseline_stop(incumbent_ticks: &[u64], k: usize) -> StopTick {
    match incumbent_ticks.get(k.saturating_sub(1)) {
        Some(&t) if k >= 1 => StopTick::Tick(t),
        _ => StopTick::BeyondTrace,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub epsilon: f64,
    pub alpha: f64,
    /// Confidence parameter for the reported finite-sample bounds.
    pub delta: f64,
    /// Which incumbents the baseline rules wait for.
    pub baseline_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            epsilon: 1e-3,
            alpha: 0.1,
            delta: 0.05,
            baseline_ks: vec![1, 3],
        }
    }
}

/// Where one stopping rule landed on one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub tick: u64,
    #[serde(with = "crate::bnb_solver::bound_value")]
    pub suboptimality: f64,
    pub within_eps: bool,
    pub nodes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEval {
    pub instance_id: String,
    /// Learned-rule stop tick (the "cp" method).
    pub stop_tick: u64,
    pub deterministic_tick: u64,
    pub baseline_ticks: BTreeMap<String, u64>,
    #[serde(with = "crate::bnb_solver::bound_value")]
    pub suboptimality: f64,
    pub within_eps: bool,
    /// Full per-method detail, keyed by method name.
    pub methods: BTreeMap<String, MethodOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_ticks: f64,
    pub sd_ticks: f64,
    /// Mean over traces with a finite gap at the stop.
    pub mean_suboptimality: f64,
    pub sd_suboptimality: f64,
    pub infinite_suboptimality_count: usize,
    pub mean_nodes: f64,
    pub sd_nodes: f64,
    /// Fraction of traces stopped epsilon-optimal.
    pub correct: f64,
    /// Mean of (deterministic - method) / deterministic tick savings.
    pub mean_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kappa: f64,
    pub config: EvalConfig,
    pub num_traces: usize,
    /// Fraction of traces whose learned stop was epsilon-optimal.
    pub coverage: f64,
    pub mean_suboptimality: f64,
    pub infinite_suboptimality_count: usize,
    pub mean_stop_tick: f64,
    /// Mean over traces of (fallback - learned) / fallback.
    pub mean_tick_reduction: f64,
    pub mean_node_reduction: f64,
    /// Largest first-incumbent relative gap seen; the worst a stop could do.
    pub s_max: f64,
    /// Longest fallback horizon in the set.
    pub t_max: u64,
    /// Expectation ceiling for suboptimality at the learned stop.
    pub theorem2_bound_s: f64,
    /// Same ceiling shape applied to stop ticks.
    pub theorem2_bound_t: f64,
    /// Success-probability floor at the report's alpha and delta.
    pub theorem3_bound: f64,
    pub methods: Vec<MethodSummary>,
    pub per_trace: Vec<TraceEval>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every stopping rule at a fixed kappa over prepared traces and
/// aggregates the guarantee-facing numbers.
pub fn evaluate(
    prepared: &[PreparedTrace],
    kappa: f64,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if prepared.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    if config.baseline_ks.is_empty() || config.baseline_ks.contains(&0) {
        return Err(EvalError::InvalidParam(
            "baseline_ks must be nonempty positive incumbents".into(),
        ));
    }
    let mut method_names = vec![METHOD_CP.to_string(), METHOD_DETERMINISTIC.to_string()];
    for &k in &config.baseline_ks {
        method_names.push(baseline_method_name(k));
    }

    let mut per_trace = Vec::with_capacity(prepared.len());
    let mut s_max = 0.0f64;
    let mut t_max = 0u64;
    for p in prepared {
        let fallback = p.fallback_tick();
        let learned = p.learned_stop(kappa);
        debug_assert!(learned <= fallback, "stop rule overran its fallback");
        let mut stops: Vec<(String, u64)> = vec![
            (METHOD_CP.to_string(), learned),
            (METHOD_DETERMINISTIC.to_string(), fallback),
        ];
        for &k in &config.baseline_ks {
            let tick = baseline_stop(&p.incumbent_ticks, k).or_fallback(p.terminal_tick);
            stops.push((baseline_method_name(k), tick));
        }
        let mut methods = BTreeMap::new();
        for (name, tick) in stops {
            let sub = p.gap_at(tick);
            methods.insert(
                name,
                MethodOutcome {
                    tick,
                    suboptimality: sub,
                    within_eps: sub <= config.epsilon,
                    nodes: p.nodes_at(tick),
                },
            );
        }
        if let Some(first) = p.true_gaps.values().iter().copied().find(|g| g.is_finite()) {
            s_max = s_max.max(first);
        }
        t_max = t_max.max(fallback);
        let cp = &methods[METHOD_CP];
        per_trace.push(TraceEval {
            instance_id: p.instance_id.clone(),
            stop_tick: cp.tick,
            deterministic_tick: fallback,
            baseline_ticks: config
                .baseline_ks
                .iter()
                .map(|&k| {
                    let name = baseline_method_name(k);
                    let tick = methods[&name].tick;
                    (name, tick)
                })
                .collect(),
            suboptimality: cp.suboptimality,
            within_eps: cp.within_eps,
            methods,
        });
    }

    let n = prepared.len();
    let mut summaries = Vec::with_capacity(method_names.len());
    for name in &method_names {
        let ticks: Vec<f64> = per_trace.iter().map(|t| t.methods[name].tick as f64).collect();
        let nodes: Vec<f64> = per_trace.iter().map(|t| t.methods[name].nodes).collect();
        let finite_subs: Vec<f64> = per_trace
            .iter()
            .map(|t| t.methods[name].suboptimality)
            .filter(|s| s.is_finite())
            .collect();
        let correct =
            per_trace.iter().filter(|t| t.methods[name].within_eps).count() as f64 / n as f64;
        let speedup = per_trace
            .iter()
            .map(|t| {
                let det = t.deterministic_tick as f64;
                if det > 0.0 {
                    (det - t.methods[name].tick as f64) / det
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / n as f64;
        let (mean_ticks, sd_ticks) = mean_sd(&ticks);
        let (mean_nodes, sd_nodes) = mean_sd(&nodes);
        let (mean_sub, sd_sub) = mean_sd(&finite_subs);
        summaries.push(MethodSummary {
            method: name.clone(),
            mean_ticks,
            sd_ticks,
            mean_suboptimality: mean_sub,
            sd_suboptimality: sd_sub,
            infinite_suboptimality_count: n - finite_subs.len(),
            mean_nodes,
            sd_nodes,
            correct,
            mean_speedup: speedup,
        });
    }

    let cp_summary = summaries
        .iter()
        .find(|s| s.method == METHOD_CP)
        .expect("cp is always evaluated");
    let mean_sub = cp_summary.mean_suboptimality;
    let infinite_count = cp_summary.infinite_suboptimality_count;
    let coverage = cp_summary.correct;
    let mean_stop_tick = cp_summary.mean_ticks;
    let mean_tick_reduction = cp_summary.mean_speedup;
    let mean_node_reduction = per_trace
        .iter()
        .map(|t| {
            let det = t.methods[METHOD_DETERMINISTIC].nodes;
            if det > 0.0 {
                (det - t.methods[METHOD_CP].nodes) / det
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / n as f64;

    Ok(EvalReport {
        kappa,
        config: config.clone(),
        num_traces: n,
        coverage,
        mean_suboptimality: mean_sub,
        infinite_suboptimality_count: infinite_count,
        mean_stop_tick,
        mean_tick_reduction,
        mean_node_reduction,
        s_max,
        t_max,
        theorem2_bound_s: expected_gap_bound(mean_sub, s_max, n, config.delta)?,
        theorem2_bound_t: expected_gap_bound(mean_stop_tick, t_max as f64, n, config.delta)?,
        theorem3_bound: success_probability_bound(config.alpha, n, config.delta)?,
        methods: summaries,
        per_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRun {
    pub coverage: f64,
    /// Binomial standard error sqrt(p(1-p)/trials).
    pub stderr: f64,
    pub trials: usize,
    pub calibration_size: usize,
    pub alpha: f64,
    pub mean_kappa: f64,
}

/// Estimates the guarantee empirically: each trial draws c calibration traces
/// plus one test trace without replacement from the pool, calibrates kappa,
/// stops the test trace, and checks epsilon-optimality at the stop.
pub fn monte_carlo_coverage(
    pool: &[PreparedTrace],
    c: usize,
    alpha: f64,
    trials: usize,
    seed: u64,
) -> Result<CoverageRun, EvalError> {
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    if pool.len() < c + 1 {
        return Err(EvalError::PoolTooSmall {
            pool: pool.len(),
            need: c + 1,
        });
    }
    if trials == 0 {
        return Err(EvalError::InvalidParam("trials must be >= 1".into()));
    }
    let epsilon = pool[0].epsilon;
    if pool.iter().any(|p| p.epsilon != epsilon) {
        return Err(EvalError::InvalidParam(
            "pool was prepared with mixed epsilons".into(),
        ));
    }
    let scores: Vec<crate::conformal::ScoreOutcome> = pool.iter().map(|p| p.score()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    let mut successes = 0usize;
    let mut kappa_sum = 0.0;
    for _ in 0..trials {
        indices.shuffle(&mut rng);
        let cal: Vec<_> = indices[..c].iter().map(|&i| scores[i]).collect();
        let test = &pool[indices[c]];
        let kappa = calibrate(&cal, alpha)?.kappa;
        kappa_sum += kappa;
        let stop = test.learned_stop(kappa);
        if test.gap_at(stop) <= epsilon {
            successes += 1;
        }
    }
    let p = successes as f64 / trials as f64;
    Ok(CoverageRun {
        coverage: p,
        stderr: (p * (1.0 - p) / trials as f64).sqrt(),
        trials,
        calibration_size: c,
        alpha,
        mean_kappa: kappa_sum / trials as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub empirical: f64,
    pub predicted: f64,
    pub trials: usize,
    pub c: usize,
    pub n: usize,
}

/// Simulates the order-statistic event behind the calibration rule: a fresh
/// uniform draw lands at or above the (c-n)-th smallest of c others with
/// probability exactly (n+1)/(c+1). With n = c the event is vacuous.
pub fn lemma_ordering_check(
    c: usize,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<LemmaCheck, EvalError> {
    if n == 0 || n > c {
        return Err(EvalError::InvalidParam(format!(
            "need 1 <= n <= c, got n={n} c={c}"
        )));
    }
    if trials == 0 {
        return Err(EvalError::InvalidParam("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    let mut cal = vec![0.0f64; c];
    for _ in 0..trials {
        for v in cal.iter_mut() {
            *v = rng.random::<f64>();
        }
        let fresh: f64 = rng.random();
        let hit = if n == c {
            true
        } else {
            let k = c - n; // k-th smallest, 1-indexed
            cal.sort_unstable_by(f64::total_cmp);
            fresh >= cal[k - 1]
        };
        hits += hit as usize;
    }
    Ok(LemmaCheck {
        empirical: hits as f64 / trials as f64,
        predicted: (n as f64 + 1.0) / (c as f64 + 1.0),
        trials,
        c,
        n,
    })
}
