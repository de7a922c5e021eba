//! Runs the whole experiment from one config file: generate instance splits,
//! solve them to a full optimality proof, train the gap predictor, calibrate
//! the stopping threshold, evaluate against baselines, and estimate coverage.
//!
//! Every stage writes its artifacts under one run root. Artifacts embed a
//! hash over the stage's own config and everything upstream, so a downstream
//! stage can tell "this model was trained on traces from a different solver
//! config" apart from "the file is simply missing" and refuse accordingly.

use crate::bnb_solver::{solve, BnbConfig, BoundTrace, Incumbent, SolveStatus, TraceSample};
use crate::conformal::{
    calibrate, success_probability_bound, ConformalError, ScoreOutcome,
};
use crate::evaluation::{
    evaluate, lemma_ordering_check, monte_carlo_coverage, prepare_trace, CoverageRun, EvalConfig,
    EvalError, EvalReport, PreparedTrace,
};
use crate::gap_predictor::{train, GapPredictor, TraceView, TrainConfig, TrainError};
use crate::instances::{
    generate_family, FamilyParams, InstanceError, MilpInstance, Split,
};
use crate::trace_math::GapSeries;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Overrides the run root from the environment; the CLI flag still wins.
pub const OUTPUT_ROOT_ENV: &str = "MILPSTOP_OUTPUT_ROOT";

const SPLITS: [Split; 3] = [Split::Train, Split::Calibration, Split::Test];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("missing upstream artifact {path}; run the `{stage}` stage first")]
    MissingUpstream { path: PathBuf, stage: &'static str },
    #[error(
        "artifact {path} came from a different configuration; rerun the `{stage}` stage \
         (expected hash {expected}, found {found})"
    )]
    StaleArtifact {
        path: PathBuf,
        stage: &'static str,
        expected: String,
        found: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Malformed {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Process exit code. Anything the user can fix in the config or on disk
    /// is 2; an upstream stage that has not produced a usable artifact is 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingUpstream { .. } | PipelineError::StaleArtifact { .. } => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub calibration: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 200,
            calibration: 50,
            test: 50,
        }
    }
}

impl SplitSizes {
    pub fn for_split(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Calibration => self.calibration,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageConfig {
    /// Calibration draws per trial; the pool must exceed this by one.
    pub calibration_size: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            calibration_size: 50,
            trials: 200,
            seed: 7,
        }
    }
}

/// One config drives every stage. Paths on the command line and the
/// `MILPSTOP_OUTPUT_ROOT` env var can redirect the run root; everything else
/// lives here so the artifact hash chain captures the whole experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub master_seed: u64,
    /// Stopping tolerance the learned rule must certify.
    pub epsilon: f64,
    /// Allowed miscoverage for the calibrated threshold.
    pub alpha: f64,
    /// Confidence parameter for the reported expectation ceilings.
    pub delta: f64,
    /// Solver threads for the solve fan-out; zero takes the rayon default.
    pub workers: usize,
    pub family: FamilyParams,
    pub sizes: SplitSizes,
    pub solver: BnbConfig,
    pub train: TrainConfig,
    pub baseline_ks: Vec<usize>,
    pub coverage: CoverageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_dir: PathBuf::from("runs/default"),
            master_seed: 42,
            epsilon: 1e-3,
            alpha: 0.1,
            delta: 0.05,
            workers: 0,
            family: FamilyParams::Knapsack(Default::default()),
            sizes: SplitSizes::default(),
            // Solves must run to a proof; the stopping tolerance is applied
            // downstream, never inside the solver.
            solver: BnbConfig {
                epsilon: 0.0,
                ..BnbConfig::default()
            },
            train: TrainConfig::default(),
            baseline_ks: vec![1, 3],
            coverage: CoverageConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let config: PipelineConfig = toml::from_str(text)
            .map_err(|e| PipelineError::Validation(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_path(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::Validation(msg));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        for split in SPLITS {
            if self.sizes.for_split(split) == 0 {
                return fail(format!("sizes.{split} must be at least 1"));
            }
        }
        if self.solver.epsilon != 0.0 {
            return fail(
                "solver.epsilon must stay 0: traces need proved optima, and the stopping \
                 tolerance is the top-level epsilon"
                    .into(),
            );
        }
        if self.baseline_ks.is_empty() || self.baseline_ks.contains(&0) {
            return fail("baseline_ks must be nonempty positive incumbent ranks".into());
        }
        if self.coverage.calibration_size == 0 || self.coverage.trials == 0 {
            return fail("coverage.calibration_size and coverage.trials must be at least 1".into());
        }
        self.family.validate()?;
        Ok(())
    }
}

/// Run root precedence: explicit CLI path, then the env var, then the config.
pub fn resolve_output_root(config: &PipelineConfig, cli_override: Option<&Path>) -> PathBuf {
    if let Some(path) = cli_override {
        return path.to_owned();
    }
    match std::env::var(OUTPUT_ROOT_ENV) {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => config.output_dir.clone(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("writing to a String cannot fail");
    }
    out
}

/// Stage hash: stage name, upstream hash, and the stage's own config in
/// canonical JSON. Field order is fixed by the struct definitions, so equal
/// configs hash equally across runs and platforms.
fn stage_hash<T: Serialize>(stage: &str, upstream: &str, payload: &T) -> String {
    let json = serde_json::to_string(payload).expect("stage configs always serialize");
    sha256_hex(format!("{stage}\n{upstream}\n{json}").as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub config_hash: String,
    pub split: Split,
    pub master_seed: u64,
    pub family: FamilyParams,
    pub count: usize,
    pub ids: Vec<String>,
}

/// First line of every trace file; the samples follow one JSON object per
/// line. Instance parameters ride along so later stages never reopen the
/// instance files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub instance_id: String,
    pub config_hash: String,
    pub status: SolveStatus,
    pub epsilon: f64,
    pub z_star: Option<f64>,
    pub stopped_by_callback: bool,
    pub numeric_prunes: u64,
    pub incumbents: Vec<Incumbent>,
    pub theta_params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct LoadedTrace {
    pub trace: BoundTrace,
    pub theta: BTreeMap<String, f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub feature_width: usize,
    /// Traces the model saw; unproved ones are skipped, not imputed.
    pub trained_on: usize,
    pub skipped_unsolved: usize,
    pub best_epoch: usize,
    pub loss_history: Vec<f64>,
    pub predictor: GapPredictor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub config_hash: String,
    pub kappa: f64,
    pub epsilon: f64,
    pub alpha: f64,
    /// Calibration scores used.
    pub c: usize,
    /// Rank of kappa among the scores, largest first.
    pub n: usize,
    /// All scores, sorted descending; length c.
    pub scores: Vec<f64>,
    /// Scores pinned to zero because the trace never reached epsilon.
    pub degenerate_count: usize,
    /// Calibration traces without a proved optimum, excluded entirely.
    pub dropped_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationArtifact {
    pub config_hash: String,
    /// Test traces excluded for lack of a proved optimum.
    pub dropped_count: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageArtifact {
    pub config_hash: String,
    pub epsilon: f64,
    pub alpha: f64,
    pub pool_size: usize,
    pub dropped_count: usize,
    pub run: CoverageRun,
    pub success_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub per_split: Vec<(Split, usize)>,
    pub total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub solved: usize,
    /// Valid traces from an earlier run, left untouched.
    pub reused: usize,
    /// Existing files that failed validation and were solved again.
    pub replaced: usize,
    pub failures: usize,
    pub tick_limited: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub struct Pipeline {
    config: PipelineConfig,
    root: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, root: PathBuf) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Pipeline { config, root })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn gen_hash(&self) -> String {
        let payload = (
            &self.config.family,
            &self.config.sizes,
            self.config.master_seed,
        );
        stage_hash("gen", "", &payload)
    }

    pub fn solve_hash(&self) -> String {
        stage_hash("solve", &self.gen_hash(), &self.config.solver)
    }

    pub fn train_hash(&self) -> String {
        stage_hash("train", &self.solve_hash(), &self.config.train)
    }

    pub fn calibrate_hash(&self) -> String {
        let payload = (self.config.epsilon, self.config.alpha);
        stage_hash("calibrate", &self.train_hash(), &payload)
    }

    pub fn evaluate_hash(&self) -> String {
        let payload = (self.config.delta, &self.config.baseline_ks);
        stage_hash("evaluate", &self.calibrate_hash(), &payload)
    }

    pub fn coverage_hash(&self) -> String {
        let payload = (
            self.config.epsilon,
            self.config.alpha,
            &self.config.coverage,
        );
        stage_hash("coverage", &self.train_hash(), &payload)
    }

    fn split_dir(&self, split: Split) -> PathBuf {
        self.root.join("instances").join(split.to_string())
    }

    fn manifest_path(&self, split: Split) -> PathBuf {
        self.split_dir(split).join("manifest.json")
    }

    fn instance_path(&self, split: Split, id: &str) -> PathBuf {
        self.split_dir(split).join(format!("{id}.json"))
    }

    fn trace_path(&self, split: Split, id: &str) -> PathBuf {
        self.root
            .join("traces")
            .join(split.to_string())
            .join(format!("{id}.jsonl"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.root.join("model").join("model.json")
    }

    pub fn calibration_path(&self) -> PathBuf {
        self.root.join("calibration").join("calibration.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("evaluation").join("report.json")
    }

    pub fn per_instance_csv_path(&self) -> PathBuf {
        self.root.join("evaluation").join("per_instance.csv")
    }

    pub fn solved_curve_csv_path(&self) -> PathBuf {
        self.root.join("evaluation").join("solved_over_time.csv")
    }

    pub fn coverage_path(&self) -> PathBuf {
        self.root.join("coverage").join("coverage.json")
    }

    /// Draws every split and writes one file per instance plus a manifest.
    /// Generation is cheap and deterministic, so this always rewrites.
    pub fn gen(&self) -> Result<GenSummary, PipelineError> {
        let hash = self.gen_hash();
        let mut per_split = Vec::new();
        for split in SPLITS {
            let count = self.config.sizes.for_split(split);
            let set = generate_family(&self.config.family, self.config.master_seed, count, split)?;
            let mut ids = Vec::with_capacity(count);
            for inst in &set.instances {
                write_json(&self.instance_path(split, &inst.id), inst)?;
                ids.push(inst.id.clone());
            }
            let manifest = SplitManifest {
                config_hash: hash.clone(),
                split,
                master_seed: self.config.master_seed,
                family: self.config.family.clone(),
                count,
                ids,
            };
            write_json(&self.manifest_path(split), &manifest)?;
            per_split.push((split, count));
        }
        Ok(GenSummary {
            total: per_split.iter().map(|(_, c)| c).sum(),
            per_split,
        })
    }

    fn load_manifest(&self, split: Split) -> Result<SplitManifest, PipelineError> {
        let path = self.manifest_path(split);
        let manifest: SplitManifest = read_json(&path, "gen")?;
        expect_hash(&manifest.config_hash, &self.gen_hash(), &path, "gen")?;
        Ok(manifest)
    }

    /// Solves every instance that lacks a valid trace. Existing traces with
    /// the right hash are kept; unreadable or stale ones are solved again.
    /// A solver failure skips that instance with a warning instead of
    /// aborting the stage.
    pub fn solve(&self) -> Result<SolveSummary, PipelineError> {
        let solve_hash = self.solve_hash();
        let mut summary = SolveSummary::default();
        let mut jobs: Vec<(Split, MilpInstance)> = Vec::new();
        for split in SPLITS {
            let manifest = self.load_manifest(split)?;
            for id in &manifest.ids {
                let trace_path = self.trace_path(split, id);
                match parse_trace(&trace_path) {
                    Ok(loaded)
                        if loaded.config_hash == solve_hash
                            && loaded.trace.instance_id == *id =>
                    {
                        summary.reused += 1;
                        continue;
                    }
                    Ok(_) => summary.replaced += 1,
                    Err(PipelineError::MissingUpstream { .. }) => {}
                    Err(_) => summary.replaced += 1,
                }
                let inst: MilpInstance = read_json(&self.instance_path(split, id), "gen")?;
                if inst.id != *id {
                    return Err(PipelineError::Validation(format!(
                        "instance file for {id} contains {}",
                        inst.id
                    )));
                }
                jobs.push((split, inst));
            }
        }

        enum JobOutcome {
            Written { tick_limited: bool },
            Failed(String),
        }
        let run_job = |(split, inst): &(Split, MilpInstance)| -> Result<JobOutcome, PipelineError> {
            match solve(inst, &self.config.solver) {
                Ok(result) => {
                    let tick_limited = result.trace.status == SolveStatus::TickLimit;
                    self.write_trace(*split, &result.trace, &inst.theta_params, &solve_hash)?;
                    Ok(JobOutcome::Written { tick_limited })
                }
                Err(e) => Ok(JobOutcome::Failed(format!("{}: {e}", inst.id))),
            }
        };
        let outcomes: Vec<JobOutcome> = if self.config.workers > 0 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.workers)
                .build()
                .map_err(|e| PipelineError::Validation(format!("worker pool: {e}")))?;
            pool.install(|| jobs.par_iter().map(run_job).collect::<Result<_, _>>())?
        } else {
            jobs.par_iter().map(run_job).collect::<Result<_, _>>()?
        };
        for outcome in outcomes {
            match outcome {
                JobOutcome::Written { tick_limited } => {
                    summary.solved += 1;
                    summary.tick_limited += tick_limited as usize;
                }
                JobOutcome::Failed(msg) => {
                    eprintln!("warning: solve failed, skipping {msg}");
                    summary.failures += 1;
                }
            }
        }
        Ok(summary)
    }

    fn write_trace(
        &self,
        split: Split,
        trace: &BoundTrace,
        theta: &BTreeMap<String, f64>,
        config_hash: &str,
    ) -> Result<(), PipelineError> {
        let header = TraceHeader {
            instance_id: trace.instance_id.clone(),
            config_hash: config_hash.to_string(),
            status: trace.status,
            epsilon: trace.epsilon,
            z_star: trace.z_star,
            stopped_by_callback: trace.stopped_by_callback,
            numeric_prunes: trace.numeric_prunes,
            incumbents: trace.incumbents.clone(),
            theta_params: theta.clone(),
        };
        let path = self.trace_path(split, &trace.instance_id);
        let mut text = serde_json::to_string(&header).expect("header serializes");
        text.push('\n');
        for sample in &trace.samples {
            text.push_str(&serde_json::to_string(sample).expect("sample serializes"));
            text.push('\n');
        }
        write_atomic(&path, text.as_bytes())
    }

    /// Loads a split's traces in manifest order, verifying the hash chain.
    pub fn load_split_traces(&self, split: Split) -> Result<Vec<LoadedTrace>, PipelineError> {
        let manifest = self.load_manifest(split)?;
        let expected = self.solve_hash();
        let mut out = Vec::with_capacity(manifest.ids.len());
        for id in &manifest.ids {
            let path = self.trace_path(split, id);
            let loaded = parse_trace(&path)?;
            expect_hash(&loaded.config_hash, &expected, &path, "solve")?;
            if loaded.trace.instance_id != *id {
                return Err(PipelineError::Validation(format!(
                    "trace file {} contains {}",
                    path.display(),
                    loaded.trace.instance_id
                )));
            }
            out.push(loaded);
        }
        Ok(out)
    }

    /// Fits the gap predictor on the train split. Traces without a proved
    /// optimum carry no usable target and are skipped with a count.
    pub fn train(&self) -> Result<ModelArtifact, PipelineError> {
        let traces = self.load_split_traces(Split::Train)?;
        let (usable, skipped): (Vec<&LoadedTrace>, Vec<&LoadedTrace>) =
            traces.iter().partition(|t| t.trace.z_star.is_some());
        if !skipped.is_empty() {
            eprintln!(
                "warning: {} train trace(s) lack a proved optimum and were skipped",
                skipped.len()
            );
        }
        let views: Vec<TraceView<'_>> = usable
            .iter()
            .map(|t| TraceView {
                trace: &t.trace,
                theta: &t.theta,
            })
            .collect();
        let outcome = train(&views, &self.config.train)?;
        let artifact = ModelArtifact {
            config_hash: self.train_hash(),
            seed: self.config.train.seed,
            feature_width: outcome.predictor.feature_width(),
            trained_on: usable.len(),
            skipped_unsolved: skipped.len(),
            best_epoch: outcome.best_epoch,
            loss_history: outcome.loss_history,
            predictor: outcome.predictor,
        };
        write_json(&self.model_path(), &artifact)?;
        Ok(artifact)
    }

    fn load_model(&self) -> Result<ModelArtifact, PipelineError> {
        let path = self.model_path();
        let artifact: ModelArtifact = read_json(&path, "train")?;
        expect_hash(&artifact.config_hash, &self.train_hash(), &path, "train")?;
        Ok(artifact)
    }

    /// Prepares a split for stop-rule work: predictions on the trace grid,
    /// true gaps, and resolved landmarks. Returns the prepared traces plus
    /// the number dropped for lacking a proved optimum.
    pub fn prepare_split(
        &self,
        split: Split,
        predictor: &GapPredictor,
    ) -> Result<(Vec<PreparedTrace>, usize), PipelineError> {
        let traces = self.load_split_traces(split)?;
        let mut prepared = Vec::with_capacity(traces.len());
        let mut dropped = 0usize;
        for loaded in &traces {
            if loaded.trace.z_star.is_none() {
                dropped += 1;
                continue;
            }
            let predictions = predictor.predict_series(TraceView {
                trace: &loaded.trace,
                theta: &loaded.theta,
            });
            prepared.push(prepare_trace(
                &loaded.trace,
                predictions,
                self.config.epsilon,
            )?);
        }
        Ok((prepared, dropped))
    }

    /// Scores the calibration split with the trained model and extracts the
    /// stopping threshold at the configured miscoverage level.
    pub fn calibrate(&self) -> Result<CalibrationArtifact, PipelineError> {
        let model = self.load_model()?;
        let (prepared, dropped) = self.prepare_split(Split::Calibration, &model.predictor)?;
        let scores: Vec<ScoreOutcome> = prepared.iter().map(|p| p.score()).collect();
        let cal = calibrate(&scores, self.config.alpha)?;
        let artifact = CalibrationArtifact {
            config_hash: self.calibrate_hash(),
            kappa: cal.kappa,
            epsilon: self.config.epsilon,
            alpha: cal.alpha,
            c: cal.num_scores,
            n: cal.quantile_index,
            scores: cal.scores_sorted,
            degenerate_count: cal.degenerate_count,
            dropped_count: dropped,
        };
        write_json(&self.calibration_path(), &artifact)?;
        Ok(artifact)
    }

    fn load_calibration(&self) -> Result<CalibrationArtifact, PipelineError> {
        let path = self.calibration_path();
        let artifact: CalibrationArtifact = read_json(&path, "calibrate")?;
        expect_hash(
            &artifact.config_hash,
            &self.calibrate_hash(),
            &path,
            "calibrate",
        )?;
        Ok(artifact)
    }

    /// Runs every stopping rule over the test split at the calibrated
    /// threshold and writes the report plus CSV views of it.
    pub fn evaluate(&self) -> Result<EvaluationArtifact, PipelineError> {
        let model = self.load_model()?;
        let calibration = self.load_calibration()?;
        let (prepared, dropped) = self.prepare_split(Split::Test, &model.predictor)?;
        let eval_config = EvalConfig {
            epsilon: self.config.epsilon,
            alpha: self.config.alpha,
            delta: self.config.delta,
            baseline_ks: self.config.baseline_ks.clone(),
        };
        let report = evaluate(&prepared, calibration.kappa, &eval_config)?;
        let artifact = EvaluationArtifact {
            config_hash: self.evaluate_hash(),
            dropped_count: dropped,
            report,
        };
        write_json(&self.report_path(), &artifact)?;
        write_atomic(
            &self.per_instance_csv_path(),
            per_instance_csv(&artifact.report).as_bytes(),
        )?;
        write_atomic(
            &self.solved_curve_csv_path(),
            solved_curve_csv(&artifact.report).as_bytes(),
        )?;
        Ok(artifact)
    }

    /// Renders the evaluation artifact as a per-method table.
    pub fn report(&self) -> Result<String, PipelineError> {
        let path = self.report_path();
        let artifact: EvaluationArtifact = read_json(&path, "evaluate")?;
        expect_hash(
            &artifact.config_hash,
            &self.evaluate_hash(),
            &path,
            "evaluate",
        )?;
        Ok(render_report(&artifact))
    }

    /// Monte Carlo estimate of the coverage guarantee over the pooled
    /// calibration and test traces.
    pub fn coverage(&self) -> Result<CoverageArtifact, PipelineError> {
        let model = self.load_model()?;
        let (mut pool, dropped_cal) = self.prepare_split(Split::Calibration, &model.predictor)?;
        let (test, dropped_test) = self.prepare_split(Split::Test, &model.predictor)?;
        pool.extend(test);
        let cov = &self.config.coverage;
        let run = monte_carlo_coverage(
            &pool,
            cov.calibration_size,
            self.config.alpha,
            cov.trials,
            cov.seed,
        )?;
        let artifact = CoverageArtifact {
            config_hash: self.coverage_hash(),
            epsilon: self.config.epsilon,
            alpha: self.config.alpha,
            pool_size: pool.len(),
            dropped_count: dropped_cal + dropped_test,
            run,
            success_floor: success_probability_bound(
                self.config.alpha,
                cov.calibration_size,
                self.config.delta,
            )?,
        };
        write_json(&self.coverage_path(), &artifact)?;
        Ok(artifact)
    }
}

/// Fast self-checks of the math the pipeline leans on: autograd against
/// finite differences, the calibration rank law against simulation, frozen
/// threshold ranks, frozen bound digits, and the stop-rule duality.
pub fn run_checks(seed: u64) -> Vec<CheckResult> {
    use crate::conformal::{expected_gap_bound, quantile_index};
    use crate::gap_predictor::gradient_check;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let mut results = Vec::new();

    let grads = gradient_check(seed, 10);
    let worst = grads
        .iter()
        .map(|g| g.rel_err)
        .fold(0.0f64, f64::max);
    results.push(CheckResult {
        name: "gradient-check".into(),
        passed: worst < 1e-4,
        detail: format!("max relative error {worst:.3e} over {} directions", grads.len()),
    });

    let ranks = [
        (100, 0.05, 95),
        (28, 0.05, 27),
        (50, 0.05, 48),
        (1, 0.05, 1),
        (9, 0.1, 8),
    ];
    let rank_ok = ranks
        .iter()
        .all(|&(c, a, want)| quantile_index(c, a).map(|n| n == want).unwrap_or(false));
    results.push(CheckResult {
        name: "threshold-rank".into(),
        passed: rank_ok,
        detail: format!("{} frozen (c, alpha) -> n values", ranks.len()),
    });

    let lemma = lemma_ordering_check(9, 5, 200_000, seed ^ 0x9e3779b97f4a7c15);
    let lemma_detail;
    let lemma_ok = match &lemma {
        Ok(check) => {
            lemma_detail = format!(
                "empirical {:.4} vs predicted {:.4}",
                check.empirical, check.predicted
            );
            (check.empirical - check.predicted).abs() < 0.01
        }
        Err(e) => {
            lemma_detail = e.to_string();
            false
        }
    };
    results.push(CheckResult {
        name: "order-statistic".into(),
        passed: lemma_ok,
        detail: lemma_detail,
    });

    let e = expected_gap_bound(0.0, 1.0, 100, 0.05).unwrap_or(f64::NAN);
    let s = success_probability_bound(0.05, 100, 0.05).unwrap_or(f64::NAN);
    let bounds_ok =
        (e - 0.3591397477728812).abs() < 1e-9 && (s - 0.8141898484259381).abs() < 1e-9;
    results.push(CheckResult {
        name: "bound-digits".into(),
        passed: bounds_ok,
        detail: format!("expected-gap {e:.10}, success-floor {s:.10}"),
    });

    // Duality: stopping after t is the same event as the running minimum
    // still sitting above the threshold at t.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bf0_3635);
    let palette = [0.0, 0.01, 0.05, 0.1, 0.5, 1.0, f64::INFINITY];
    let mut dual_ok = true;
    'outer: for _ in 0..1000 {
        let len = rng.random_range(1..12);
        let mut tick = 0u64;
        let mut ticks = Vec::with_capacity(len);
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            ticks.push(tick);
            values.push(palette[rng.random_range(0..palette.len())]);
            tick += rng.random_range(1..4);
        }
        let series = GapSeries::new(ticks.clone(), values).expect("generated in order");
        let mins = series.rolling_min();
        for &threshold in &[0.0, 0.01, 0.05, 0.1, 0.5, 1.0] {
            let stop = series.left_inverse(threshold);
            for &t in &ticks {
                let lhs = mins.value_at(t).expect("tick on grid") > threshold;
                if lhs != stop.exceeds(t) {
                    dual_ok = false;
                    break 'outer;
                }
            }
        }
    }
    results.push(CheckResult {
        name: "stop-duality".into(),
        passed: dual_ok,
        detail: "1000 random series, 6 thresholds each".into(),
    });

    results
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let parent = path
        .parent()
        .ok_or_else(|| PipelineError::Validation(format!("{} has no parent", path.display())))?;
    fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifacts always serialize");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path, stage: &'static str) -> Result<T, PipelineError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(PipelineError::MissingUpstream {
                path: path.to_owned(),
                stage,
            });
        }
        Err(e) => return Err(io_err(path, e)),
    };
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Malformed {
        path: path.to_owned(),
        source: e,
    })
}

fn expect_hash(
    found: &str,
    expected: &str,
    path: &Path,
    stage: &'static str,
) -> Result<(), PipelineError> {
    if found == expected {
        Ok(())
    } else {
        Err(PipelineError::StaleArtifact {
            path: path.to_owned(),
            stage,
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

/// Reads one trace file back into a solver trace. The file is a JSON header
/// line followed by one sample per line.
fn parse_trace(path: &Path) -> Result<LoadedTrace, PipelineError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(PipelineError::MissingUpstream {
                path: path.to_owned(),
                stage: "solve",
            });
        }
        Err(e) => return Err(io_err(path, e)),
    };
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let malformed = |msg: &str| PipelineError::Malformed {
        path: path.to_owned(),
        source: serde_json::Error::io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            msg.to_string(),
        )),
    };
    let header_line = lines
        .next()
        .ok_or_else(|| malformed("empty trace file"))?
        .map_err(|e| io_err(path, e))?;
    let header: TraceHeader =
        serde_json::from_str(&header_line).map_err(|e| PipelineError::Malformed {
            path: path.to_owned(),
            source: e,
        })?;
    let mut samples: Vec<TraceSample> = Vec::new();
    for line in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(
            serde_json::from_str(&line).map_err(|e| PipelineError::Malformed {
                path: path.to_owned(),
                source: e,
            })?,
        );
    }
    if samples.is_empty() {
        return Err(malformed("trace has no samples"));
    }
    let trace = BoundTrace {
        instance_id: header.instance_id,
        status: header.status,
        epsilon: header.epsilon,
        samples,
        incumbents: header.incumbents,
        z_star: header.z_star,
        stopped_by_callback: header.stopped_by_callback,
        numeric_prunes: header.numeric_prunes,
    };
    Ok(LoadedTrace {
        trace,
        theta: header.theta_params,
        config_hash: header.config_hash,
    })
}

fn csv_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

/// Long-format per-instance table: one row per instance and method.
fn per_instance_csv(report: &EvalReport) -> String {
    let mut out = String::from("instance_id,method,tick,nodes,suboptimality,within_eps\n");
    for t in &report.per_trace {
        for (name, m) in &t.methods {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                t.instance_id,
                name,
                m.tick,
                csv_float(m.nodes),
                csv_float(m.suboptimality),
                m.within_eps
            );
        }
    }
    out
}

/// Fraction of instances each method has stopped correctly by a tick budget.
/// Budgets are every stop tick observed in the evaluation.
fn solved_curve_csv(report: &EvalReport) -> String {
    let mut budgets: Vec<u64> = report
        .per_trace
        .iter()
        .flat_map(|t| t.methods.values().map(|m| m.tick))
        .collect();
    budgets.sort_unstable();
    budgets.dedup();
    let n = report.per_trace.len() as f64;
    let mut out = String::from("budget,method,fraction_solved\n");
    for &b in &budgets {
        for summary in &report.methods {
            let solved = report
                .per_trace
                .iter()
                .filter(|t| {
                    let m = &t.methods[&summary.method];
                    m.within_eps && m.tick <= b
                })
                .count();
            let _ = writeln!(out, "{},{},{}", b, summary.method, solved as f64 / n);
        }
    }
    out
}

fn fmt_pm(mean: f64, sd: f64, decimals: usize) -> String {
    format!("{mean:.decimals$} ± {sd:.decimals$}")
}

fn fmt_pm_sci(mean: f64, sd: f64) -> String {
    format!("{mean:.2e} ± {sd:.2e}")
}

/// Plain-text report: run summary, guarantee lines, then one row per method.
pub fn render_report(artifact: &EvaluationArtifact) -> String {
    let r = &artifact.report;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "stopping rules on {} test traces (epsilon {}, alpha {}, kappa {:.6})",
        r.num_traces, r.config.epsilon, r.config.alpha, r.kappa
    );
    if artifact.dropped_count > 0 {
        let _ = writeln!(
            out,
            "  {} trace(s) dropped for lacking a proved optimum",
            artifact.dropped_count
        );
    }
    let _ = writeln!(
        out,
        "coverage {:.3} (success floor {:.3}); mean suboptimality {:.3e} (ceiling {:.3e})",
        r.coverage, r.theorem3_bound, r.mean_suboptimality, r.theorem2_bound_s
    );
    let _ = writeln!(
        out,
        "mean stop tick {:.1} (ceiling {:.1}); tick reduction {:.1}%, node reduction {:.1}%",
        r.mean_stop_tick,
        r.theorem2_bound_t,
        100.0 * r.mean_tick_reduction,
        100.0 * r.mean_node_reduction
    );
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<18} {:>20} {:>24} {:>20} {:>9} {:>9}",
        "method", "ticks", "suboptimality", "nodes", "correct", "speedup"
    );
    for m in &r.methods {
        let mut sub = fmt_pm_sci(m.mean_suboptimality, m.sd_suboptimality);
        if m.infinite_suboptimality_count > 0 {
            let _ = write!(sub, " (+{} inf)", m.infinite_suboptimality_count);
        }
        let _ = writeln!(
            out,
            "{:<18} {:>20} {:>24} {:>20} {:>8.1}% {:>8.1}%",
            m.method,
            fmt_pm(m.mean_ticks, m.sd_ticks, 1),
            sub,
            fmt_pm(m.mean_nodes, m.sd_nodes, 1),
            100.0 * m.correct,
            100.0 * m.mean_speedup
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::KnapsackParams;
    use tempfile::TempDir;

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            master_seed: 11,
            epsilon: 0.01,
            alpha: 0.25,
            delta: 0.1,
            family: FamilyParams::Knapsack(KnapsackParams {
                items: 10,
                constraints: 1,
                ..KnapsackParams::default()
            }),
            sizes: SplitSizes {
                train: 6,
                calibration: 4,
                test: 4,
            },
            train: TrainConfig {
                hidden: vec![8],
                epochs: 3,
                batch_size: 2,
                ..TrainConfig::default()
            },
            coverage: CoverageConfig {
                calibration_size: 5,
                trials: 20,
                seed: 3,
            },
            ..PipelineConfig::default()
        }
    }

    fn pipeline_in(dir: &TempDir) -> Pipeline {
        Pipeline::new(small_config(), dir.path().to_owned()).unwrap()
    }

    #[test]
    fn full_run_produces_consistent_artifacts() {
        let dir = TempDir::new().unwrap();
        let p = pipeline_in(&dir);
        let gen = p.gen().unwrap();
        assert_eq!(gen.total, 14);
        let solved = p.solve().unwrap();
        assert_eq!(solved.solved, 14);
        assert_eq!(solved.failures, 0);
        let model = p.train().unwrap();
        assert_eq!(model.trained_on, 6);
        assert!(model.loss_history.len() >= 2);
        let cal = p.calibrate().unwrap();
        assert_eq!(cal.c, 4);
        assert_eq!(cal.scores.len(), 4);
        assert!(cal.n >= 1 && cal.n <= cal.c);
        // Descending scores and kappa at the advertised rank.
        assert!(cal.scores.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(cal.kappa, cal.scores[cal.n - 1]);
        let eval = p.evaluate().unwrap();
        assert_eq!(eval.report.num_traces, 4);
        assert!(eval.report.mean_tick_reduction >= 0.0);
        let table = p.report().unwrap();
        assert!(table.contains("cp"));
        assert!(table.contains("deterministic_eps"));
        assert!(table.contains("stop_at_3"));
        let cov = p.coverage().unwrap();
        assert_eq!(cov.pool_size, 8);
        assert!(cov.run.coverage >= 0.0 && cov.run.coverage <= 1.0);
        assert!(p.per_instance_csv_path().exists());
        assert!(p.solved_curve_csv_path().exists());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        for dir in [&dir_a, &dir_b] {
            let p = pipeline_in(dir);
            p.gen().unwrap();
            p.solve().unwrap();
            p.train().unwrap();
            p.calibrate().unwrap();
            p.evaluate().unwrap();
        }
        for rel in [
            "model/model.json",
            "calibration/calibration.json",
            "evaluation/report.json",
            "evaluation/per_instance.csv",
            "evaluation/solved_over_time.csv",
        ] {
            let a = fs::read(dir_a.path().join(rel)).unwrap();
            let b = fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identical runs");
        }
    }

    #[test]
    fn solve_reuses_valid_traces_and_replaces_corrupt_ones() {
        let dir = TempDir::new().unwrap();
        let p = pipeline_in(&dir);
        p.gen().unwrap();
        p.solve().unwrap();
        let victim = p.trace_path(Split::Train, "knapsack-train-00002");
        let pristine = fs::read(&victim).unwrap();
        fs::write(&victim, &pristine[..40]).unwrap();
        let second = p.solve().unwrap();
        assert_eq!(second.reused, 13);
        assert_eq!(second.replaced, 1);
        assert_eq!(second.solved, 1);
        assert_eq!(fs::read(&victim).unwrap(), pristine, "re-solve must restore the trace");
        let third = p.solve().unwrap();
        assert_eq!(third.reused, 14);
        assert_eq!(third.solved, 0);
    }

    #[test]
    fn downstream_stages_refuse_missing_or_stale_upstream() {
        let dir = TempDir::new().unwrap();
        let p = pipeline_in(&dir);
        let err = p.train().unwrap_err();
        assert!(matches!(err, PipelineError::MissingUpstream { stage: "gen", .. }));
        assert_eq!(err.exit_code(), 3);

        p.gen().unwrap();
        let err = p.train().unwrap_err();
        assert!(matches!(err, PipelineError::MissingUpstream { stage: "solve", .. }));

        p.solve().unwrap();
        p.train().unwrap();
        // A different master seed invalidates the whole chain.
        let mut other_config = small_config();
        other_config.master_seed = 12;
        let other = Pipeline::new(other_config, dir.path().to_owned()).unwrap();
        let err = other.calibrate().unwrap_err();
        assert!(matches!(err, PipelineError::StaleArtifact { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut c = small_config();
        c.sizes.train = 0;
        assert!(matches!(c.validate(), Err(PipelineError::Validation(_))));

        let mut c = small_config();
        c.solver.epsilon = 1e-3;
        let err = c.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let mut c = small_config();
        c.alpha = 1.0;
        assert!(c.validate().is_err());

        let mut c = small_config();
        c.baseline_ks = vec![];
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_parses_from_partial_toml() {
        let text = r#"
            master_seed = 5
            epsilon = 0.002

            [family]
            family = "set_cover"
            universe = 12
            sets = 20

            [sizes]
            train = 30
            calibration = 10
            test = 10

            [train]
            epochs = 4
        "#;
        let config = PipelineConfig::from_toml_str(text).unwrap();
        assert_eq!(config.master_seed, 5);
        assert_eq!(config.epsilon, 0.002);
        assert_eq!(config.sizes.train, 30);
        assert_eq!(config.train.epochs, 4);
        // Unset sections fall back to defaults, including the proof-mode solver.
        assert_eq!(config.solver.epsilon, 0.0);
        assert_eq!(config.baseline_ks, vec![1, 3]);
        assert!(matches!(config.family, FamilyParams::SetCover(_)));

        assert!(PipelineConfig::from_toml_str("epsilon = -1.0").is_err());
        assert!(PipelineConfig::from_toml_str("not toml at all [").is_err());
    }

    #[test]
    fn output_root_precedence_is_flag_env_config() {
        let config = small_config();
        let flag = PathBuf::from("/tmp/flag-root");
        assert_eq!(resolve_output_root(&config, Some(&flag)), flag);
        // Non-parallel-safe env mutation is confined to this one test.
        std::env::set_var(OUTPUT_ROOT_ENV, "/tmp/env-root");
        assert_eq!(
            resolve_output_root(&config, None),
            PathBuf::from("/tmp/env-root")
        );
        assert_eq!(resolve_output_root(&config, Some(&flag)), flag);
        std::env::remove_var(OUTPUT_ROOT_ENV);
        assert_eq!(resolve_output_root(&config, None), config.output_dir);
    }

    #[test]
    fn trace_files_round_trip_through_jsonl() {
        let dir = TempDir::new().unwrap();
        let p = pipeline_in(&dir);
        p.gen().unwrap();
        p.solve().unwrap();
        let loaded = p.load_split_traces(Split::Calibration).unwrap();
        assert_eq!(loaded.len(), 4);
        for t in &loaded {
            assert!(t.trace.z_star.is_some(), "small knapsacks solve to proof");
            assert!(!t.theta.is_empty());
            assert_eq!(t.config_hash, p.solve_hash());
        }
    }

    #[test]
    fn self_checks_all_pass() {
        let results = run_checks(2024);
        for r in &results {
            assert!(r.passed, "{} failed: {}", r.name, r.detail);
        }
        assert_eq!(results.len(), 5);
    }

    #[test]
    fn csv_views_are_well_formed() {
        let dir = TempDir::new().unwrap();
        let p = pipeline_in(&dir);
        p.gen().unwrap();
        p.solve().unwrap();
        p.train().unwrap();
        p.calibrate().unwrap();
        p.evaluate().unwrap();
        let per_inst = fs::read_to_string(p.per_instance_csv_path()).unwrap();
        let mut lines = per_inst.lines();
        assert_eq!(
            lines.next().unwrap(),
            "instance_id,method,tick,nodes,suboptimality,within_eps"
        );
        // 4 test instances x 4 methods.
        assert_eq!(lines.count(), 16);
        let curve = fs::read_to_string(p.solved_curve_csv_path()).unwrap();
        assert!(curve.starts_with("budget,method,fraction_solved\n"));
        let last = curve.lines().last().unwrap();
        // At the largest budget the deterministic rule has solved everything,
        // so some row reaches fraction 1.
        assert!(curve.lines().any(|l| l.ends_with(",1")), "no method saturates: {last}");
    }
}
