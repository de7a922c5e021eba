//! Python bindings over the core toolkit. The surface mirrors how the pieces
//! are used from Rust: step-function series and stop rules, conformal
//! calibration with its finite-sample bounds, instance generation plus the
//! tick-recording solver, model inference, and the file-backed pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use milpstop_core::bnb_solver::{self, BnbConfig, BoundTrace};
use milpstop_core::conformal;
use milpstop_core::gap_predictor::TraceView;
use milpstop_core::instances::{generate_family, FamilyParams, Split};
use milpstop_core::pipeline::{self, ModelArtifact, Pipeline, PipelineConfig};
use milpstop_core::trace_math::{self, GapSeries};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "calibration" => Ok(Split::Calibration),
        "test" => Ok(Split::Test),
        other => Err(value_err(format!(
            "unknown split {other:?}, expected train, calibration, or test"
        ))),
    }
}

/// Right-continuous step function on a tick axis. Wraps the gap series the
/// stop rules operate on.
#[pyclass(frozen)]
struct Series {
    inner: GapSeries,
}

#[pymethods]
impl Series {
    #[new]
    fn new(ticks: Vec<u64>, values: Vec<f64>) -> PyResult<Self> {
        let inner = GapSeries::new(ticks, values).map_err(value_err)?;
        Ok(Series { inner })
    }

    fn ticks(&self) -> Vec<u64> {
        self.inner.ticks().to_vec()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn terminal_tick(&self) -> u64 {
        self.inner.terminal_tick()
    }

    /// Value in effect at tick `t`, or None before the first sample.
    fn value_at(&self, t: u64) -> Option<f64> {
        self.inner.value_at(t)
    }

    fn rolling_min(&self) -> Series {
        Series {
            inner: self.inner.rolling_min(),
        }
    }

    /// First tick where the series is at most `x`, or None if it never is.
    fn left_inverse(&self, x: f64) -> Option<u64> {
        self.inner.left_inverse(x).tick()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Series({} samples, ticks {}..={})",
            self.inner.len(),
            self.inner.ticks().first().copied().unwrap_or(0),
            self.inner.terminal_tick()
        )
    }
}

/// Result of threshold calibration: `kappa` is the `quantile_index`-th
/// largest score.
#[pyclass(frozen, get_all)]
struct Calibration {
    kappa: f64,
    quantile_index: usize,
    alpha: f64,
    num_scores: usize,
    degenerate_count: usize,
    scores_sorted: Vec<f64>,
}

#[pymethods]
impl Calibration {
    fn __repr__(&self) -> String {
        format!(
            "Calibration(kappa={}, n={} of {})",
            self.kappa, self.quantile_index, self.num_scores
        )
    }
}

/// Rank n such that stopping below the n-th largest of c calibration scores
/// is epsilon-safe with probability at least 1 - alpha.
#[pyfunction]
fn quantile_index(c: usize, alpha: f64) -> PyResult<usize> {
    conformal::quantile_index(c, alpha).map_err(value_err)
}

/// Calibrates a stopping threshold from raw scores. Scores of exactly zero
/// are treated as degenerate, matching how unreachable tolerances are scored.
#[pyfunction]
fn calibrate(scores: Vec<f64>, alpha: f64) -> PyResult<Calibration> {
    let outcomes: Vec<conformal::ScoreOutcome> = scores
        .iter()
        .map(|&score| conformal::ScoreOutcome {
            score,
            degenerate: score == 0.0,
        })
        .collect();
    let cal = conformal::calibrate(&outcomes, alpha).map_err(value_err)?;
    Ok(Calibration {
        kappa: cal.kappa,
        quantile_index: cal.quantile_index,
        alpha: cal.alpha,
        num_scores: cal.num_scores,
        degenerate_count: cal.degenerate_count,
        scores_sorted: cal.scores_sorted,
    })
}

/// Score of one calibration trace: the minimum prediction over ticks up to
/// and including the first epsilon-good tick. Returns (score, degenerate).
#[pyfunction]
fn conformal_score(predictions: &Series, true_gaps: &Series, epsilon: f64) -> (f64, bool) {
    let s = conformal::conformal_score(&predictions.inner, &true_gaps.inner, epsilon);
    (s.score, s.degenerate)
}

/// Finite-sample ceiling on the expected gap at the learned stop.
#[pyfunction]
fn expected_gap_bound(eps_mean: f64, s_max: f64, c: usize, delta: f64) -> PyResult<f64> {
    conformal::expected_gap_bound(eps_mean, s_max, c, delta).map_err(value_err)
}

/// Finite-sample floor on the probability that the learned stop is
/// epsilon-optimal.
#[pyfunction]
fn success_probability_bound(alpha: f64, c: usize, delta: f64) -> PyResult<f64> {
    conformal::success_probability_bound(alpha, c, delta).map_err(value_err)
}

/// Relative suboptimality of an incumbent against a known optimum.
#[pyfunction]
fn true_gap(upper: f64, z_star: f64) -> PyResult<f64> {
    trace_math::true_gap(upper, z_star).map_err(value_err)
}

/// First tick where the observed gap reaches epsilon, or None.
#[pyfunction]
fn deterministic_stop(gaps: &Series, epsilon: f64) -> Option<u64> {
    trace_math::deterministic_stop_time(&gaps.inner, epsilon).tick()
}

/// First tick where the prediction drops to kappa, or the fallback.
#[pyfunction]
fn learned_stop(predictions: &Series, kappa: f64, fallback: u64) -> u64 {
    trace_math::learned_stop_time(&predictions.inner, kappa, fallback)
}

/// Generates a batch of instances and solves each to a full optimality
/// proof. `params_json` selects the family, for example
/// `{"family": "knapsack", "items": 12}`; omitted fields take defaults.
/// Returns one (trace_json, theta) pair per instance.
#[pyfunction]
#[pyo3(signature = (params_json, master_seed, count, split, tick_limit = 2_000_000))]
fn solve_family(
    params_json: &str,
    master_seed: u64,
    count: usize,
    split: &str,
    tick_limit: u64,
) -> PyResult<Vec<(String, BTreeMap<String, f64>)>> {
    let params: FamilyParams = serde_json::from_str(params_json).map_err(value_err)?;
    let split = parse_split(split)?;
    let set = generate_family(&params, master_seed, count, split).map_err(value_err)?;
    let config = BnbConfig {
        epsilon: 0.0,
        tick_limit,
        ..BnbConfig::default()
    };
    let mut traces = Vec::with_capacity(set.instances.len());
    for inst in &set.instances {
        let result = bnb_solver::solve(inst, &config)
            .map_err(|e| PyRuntimeError::new_err(format!("{}: {e}", inst.id)))?;
        let doc = serde_json::to_string(&result.trace).map_err(value_err)?;
        traces.push((doc, inst.theta_params.clone()));
    }
    Ok(traces)
}

/// Checks the structural invariants of a recorded trace, raising ValueError
/// with the first violation. `z_star` additionally pins the bounds to a
/// known optimum.
#[pyfunction]
#[pyo3(signature = (trace_json, z_star = None))]
fn verify_trace(trace_json: &str, z_star: Option<f64>) -> PyResult<()> {
    let trace: BoundTrace = serde_json::from_str(trace_json).map_err(value_err)?;
    bnb_solver::verify_trace(&trace, z_star).map_err(value_err)
}

/// Predicted absolute gap at every tick of a trace, using a trained model
/// artifact (the pipeline's model.json contents).
#[pyfunction]
fn predict_gaps(
    model_json: &str,
    trace_json: &str,
    theta: BTreeMap<String, f64>,
) -> PyResult<Series> {
    let model: ModelArtifact = serde_json::from_str(model_json).map_err(value_err)?;
    let trace: BoundTrace = serde_json::from_str(trace_json).map_err(value_err)?;
    let view = TraceView {
        trace: &trace,
        theta: &theta,
    };
    Ok(Series {
        inner: model.predictor.predict_series(view),
    })
}

/// Runs the full pipeline (generate, solve, train, calibrate, evaluate)
/// under `root` and returns the rendered report table. Stages reuse valid
/// artifacts already on disk.
#[pyfunction]
fn run_pipeline(config_toml: &str, root: &str) -> PyResult<String> {
    let config = PipelineConfig::from_toml_str(config_toml).map_err(value_err)?;
    let pipe = Pipeline::new(config, PathBuf::from(root)).map_err(value_err)?;
    let stage = |e: pipeline::PipelineError| PyRuntimeError::new_err(e.to_string());
    pipe.gen().map_err(stage)?;
    pipe.solve().map_err(stage)?;
    pipe.train().map_err(stage)?;
    pipe.calibrate().map_err(stage)?;
    pipe.evaluate().map_err(stage)?;
    pipe.report().map_err(stage)
}

/// Self-checks over the numeric kernels. Returns (name, passed, detail)
/// per check.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn run_checks(seed: u64) -> Vec<(String, bool, String)> {
    pipeline::run_checks(seed)
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn milpstop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Series>()?;
    m.add_class::<Calibration>()?;
    m.add_function(wrap_pyfunction!(quantile_index, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(conformal_score, m)?)?;
    m.add_function(wrap_pyfunction!(expected_gap_bound, m)?)?;
    m.add_function(wrap_pyfunction!(success_probability_bound, m)?)?;
    m.add_function(wrap_pyfunction!(true_gap, m)?)?;
    m.add_function(wrap_pyfunction!(deterministic_stop, m)?)?;
    m.add_function(wrap_pyfunction!(learned_stop, m)?)?;
    m.add_function(wrap_pyfunction!(solve_family, m)?)?;
    m.add_function(wrap_pyfunction!(verify_trace, m)?)?;
    m.add_function(wrap_pyfunction!(predict_gaps, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    Ok(())
}
