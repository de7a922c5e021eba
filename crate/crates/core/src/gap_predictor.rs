//! Learns to predict the absolute optimality gap U(t) - z* from what a solver
//! can see at tick t.
//!
//! The model is a small dense network trained with hand-rolled backprop and
//! Adam. Raw network output is squashed into [0, U(t) - L(t)], the interval
//! the true gap must lie in, so predictions are sound by construction even
//! far from the training distribution. Training examples are weighted by
//! inverse gap size: late, small-gap samples carry the decision boundary and
//! would otherwise drown in the early large-gap ones.

use crate::bnb_solver::BoundTrace;
use crate::trace_math::GapSeries;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

const STD_FLOOR: f64 = 1e-8;
const WINDOWS: [usize; 3] = [5, 25, 100];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no usable training traces")]
    EmptyDataset,
    #[error("trace {instance_id} has no proved optimum; filter unsolved traces first")]
    MissingOptimum { instance_id: String },
    #[error("feature width mismatch: expected {expected}, got {got} for {instance_id}")]
    InconsistentFeatures {
        expected: usize,
        got: usize,
        instance_id: String,
    },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
}

/// One solved trace plus the instance parameters it came from.
#[derive(Debug, Clone, Copy)]
pub struct TraceView<'a> {
    pub trace: &'a BoundTrace,
    pub theta: &'a BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    /// Traces per minibatch; each trace contributes its weighted sample mean.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Floor for the gap before inverting it into a sample weight.
    pub y_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![64, 64],
            epochs: 60,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            y_min: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPredictor {
    sizes: Vec<usize>,
    params: Vec<f64>,
    feat_mean: Vec<f64>,
    feat_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub predictor: GapPredictor,
    /// Full-dataset loss after each epoch; entry 0 is the untrained loss.
    pub loss_history: Vec<f64>,
    /// Epoch whose weights the returned predictor carries.
    pub best_epoch: usize,
}

impl GapPredictor {
    pub fn feature_width(&self) -> usize {
        self.sizes[0]
    }

    /// Predicted absolute gap at every tick of a trace.
    pub fn predict_series(&self, view: TraceView<'_>) -> GapSeries {
        let feats = featurize(view.trace, view.theta);
        let mlp = Mlp {
            sizes: self.sizes.clone(),
            params: self.params.clone(),
        };
        let values: Vec<f64> = feats
            .rows
            .iter()
            .zip(&feats.spans)
            .map(|(row, &span)| {
                let x = standardize_row(row, &self.feat_mean, &self.feat_std);
                squash(mlp.predict(&x), 0.0, span)
            })
            .collect();
        GapSeries::new(feats.ticks, values).expect("trace samples are nonempty and ordered")
    }
}

/// Numerically stable logistic.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Squashes an unbounded score into [lo, hi].
pub fn squash(x: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * sigmoid(x)
}

/// Inverse-gap weights, floored at `y_min` and normalized to sum to one so
/// every trace contributes equally to the loss regardless of length.
pub fn sample_weights(gaps: &[f64], y_min: f64) -> Vec<f64> {
    let raw: Vec<f64> = gaps.iter().map(|&y| 1.0 / y.max(y_min)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    /// Squash interval width U_sub - L_sub per row.
    pub spans: Vec<f64>,
    pub ticks: Vec<u64>,
    /// Row index of the first sample with a finite incumbent.
    pub first_finite_upper: Option<usize>,
}

/// Per-tick feature rows: substituted bounds, three windowed bound means,
/// tick, node count, a missing-incumbent flag, then the instance parameters
/// in key order. Infinite bounds are replaced by a sentinel one scale unit
/// beyond the first proved bound so window arithmetic stays finite.
pub fn featurize(trace: &BoundTrace, theta: &BTreeMap<String, f64>) -> FeatureMatrix {
    let anchor = trace
        .samples
        .iter()
        .flat_map(|s| [s.lower, s.upper])
        .find(|v| v.is_finite())
        .unwrap_or(0.0);
    let span_unit = 1.0 + anchor.abs();
    let sub_upper = |u: f64| if u.is_finite() { u } else { anchor + span_unit };
    let sub_lower = |l: f64| if l.is_finite() { l } else { anchor - span_unit };

    let n = trace.samples.len();
    let u_sub: Vec<f64> = trace.samples.iter().map(|s| sub_upper(s.upper)).collect();
    let l_sub: Vec<f64> = trace.samples.iter().map(|s| sub_lower(s.lower)).collect();
    let mut pref_u = vec![0.0; n + 1];
    let mut pref_l = vec![0.0; n + 1];
    for i in 0..n {
        pref_u[i + 1] = pref_u[i] + u_sub[i];
        pref_l[i + 1] = pref_l[i] + l_sub[i];
    }
    let window_mean = |pref: &[f64], i: usize, w: usize| {
        let k = w.min(i + 1);
        (pref[i + 1] - pref[i + 1 - k]) / k as f64
    };

    let theta_vals: Vec<f64> = theta.values().copied().collect();
    let mut rows = Vec::with_capacity(n);
    let mut spans = Vec::with_capacity(n);
    let mut ticks = Vec::with_capacity(n);
    let mut first_finite_upper = None;
    for (i, s) in trace.samples.iter().enumerate() {
        if s.upper.is_finite() && first_finite_upper.is_none() {
            first_finite_upper = Some(i);
        }
        let mut row = Vec::with_capacity(11 + theta_vals.len());
        row.push(u_sub[i]);
        row.push(l_sub[i]);
        for w in WINDOWS {
            row.push(window_mean(&pref_u, i, w));
            row.push(window_mean(&pref_l, i, w));
        }
        row.push(s.tick as f64);
        row.push(s.nodes_explored as f64);
        row.push(if s.upper.is_finite() { 0.0 } else { 1.0 });
        row.extend_from_slice(&theta_vals);
        rows.push(row);
        spans.push((u_sub[i] - l_sub[i]).max(0.0));
        ticks.push(s.tick);
    }
    FeatureMatrix {
        rows,
        spans,
        ticks,
        first_finite_upper,
    }
}

fn standardize_row(row: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    row.iter()
        .zip(mean)
        .zip(std)
        .map(|((x, m), s)| (x - m) / s)
        .collect()
}

/// Training rows for one trace: standardized features, absolute gap targets,
/// normalized weights, squash spans. Pre-incumbent samples are dropped since
/// their target would be infinite.
struct TraceData {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    w: Vec<f64>,
    spans: Vec<f64>,
}

pub fn train(views: &[TraceView<'_>], config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut width = None;
    let mut raw: Vec<(FeatureMatrix, f64, &str)> = Vec::new();
    for view in views {
        let z_star = view.trace.z_star.ok_or_else(|| TrainError::MissingOptimum {
            instance_id: view.trace.instance_id.clone(),
        })?;
        let feats = featurize(view.trace, view.theta);
        let got = feats.rows.first().map_or(0, |r| r.len());
        match width {
            None => width = Some(got),
            Some(expected) if expected != got => {
                return Err(TrainError::InconsistentFeatures {
                    expected,
                    got,
                    instance_id: view.trace.instance_id.clone(),
                })
            }
            _ => {}
        }
        raw.push((feats, z_star, view.trace.instance_id.as_str()));
    }
    let width = width.ok_or(TrainError::EmptyDataset)?;

    // Fit the standardizer over every usable sample before splitting traces.
    let mut mean = vec![0.0; width];
    let mut count = 0usize;
    for (feats, _, _) in &raw {
        let start = match feats.first_finite_upper {
            Some(i) => i,
            None => continue,
        };
        for row in &feats.rows[start..] {
            for (a, x) in mean.iter_mut().zip(row) {
                *a += x;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyDataset);
    }
    for a in &mut mean {
        *a /= count as f64;
    }
    let mut var = vec![0.0; width];
    for (feats, _, _) in &raw {
        let start = match feats.first_finite_upper {
            Some(i) => i,
            None => continue,
        };
        for row in &feats.rows[start..] {
            for ((a, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *a += (x - m) * (x - m);
            }
        }
    }
    // A column that never varies in training (the missing-incumbent flag is
    // the usual one) gets divisor 1, not the floor: flooring would blow
    // prediction-time rows where the column finally moves up to 1e8 sigma
    // and saturate the net.
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / count as f64).sqrt();
            if s < STD_FLOOR {
                1.0
            } else {
                s
            }
        })
        .collect();

    let mut data: Vec<TraceData> = Vec::new();
    for (feats, z_star, id) in &raw {
        let start = match feats.first_finite_upper {
            Some(i) => i,
            None => continue,
        };
        let _ = id;
        let upper_at = |i: usize| feats.rows[i][0];
        let y: Vec<f64> = (start..feats.rows.len())
            .map(|i| upper_at(i) - z_star)
            .collect();
        let w = sample_weights(&y, config.y_min);
        let x = feats.rows[start..]
            .iter()
            .map(|r| standardize_row(r, &mean, &std))
            .collect();
        let spans = feats.spans[start..].to_vec();
        data.push(TraceData { x, y, w, spans });
    }
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mut sizes = vec![width];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut mlp = Mlp::glorot(&sizes, &mut rng);
    let mut adam = Adam::new(mlp.params.len(), config.learning_rate);

    let full_loss = |mlp: &Mlp| -> f64 {
        data.iter().map(|td| trace_loss(mlp, td)).sum::<f64>() / data.len() as f64
    };
    let initial = full_loss(&mlp);
    if !initial.is_finite() {
        return Err(TrainError::NonFiniteLoss { epoch: 0 });
    }
    let mut loss_history = vec![initial];
    let mut best = (0usize, initial, mlp.params.clone());

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut grad = vec![0.0; mlp.params.len()];
            for &ti in chunk {
                accumulate_gradient(&mlp, &data[ti], 1.0 / chunk.len() as f64, &mut grad);
            }
            adam.step(&mut mlp.params, &grad);
        }
        let loss = full_loss(&mlp);
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        loss_history.push(loss);
        if loss < best.1 {
            best = (epoch, loss, mlp.params.clone());
        }
    }

    let predictor = GapPredictor {
        sizes,
        params: best.2,
        feat_mean: mean,
        feat_std: std,
    };
    Ok(TrainOutcome {
        predictor,
        loss_history,
        best_epoch: best.0,
    })
}

/// Weighted squared error of one trace under the squashed model.
fn trace_loss(mlp: &Mlp, td: &TraceData) -> f64 {
    td.x
        .iter()
        .zip(&td.y)
        .zip(&td.w)
        .zip(&td.spans)
        .map(|(((x, &y), &w), &span)| {
            let pred = squash(mlp.predict(x), 0.0, span);
            w * (pred - y) * (pred - y)
        })
        .sum()
}

/// Adds `scale` times the gradient of `trace_loss` to `grad`.
fn accumulate_gradient(mlp: &Mlp, td: &TraceData, scale: f64, grad: &mut [f64]) {
    for (((x, &y), &w), &span) in td.x.iter().zip(&td.y).zip(&td.w).zip(&td.spans) {
        let (acts, raw) = mlp.forward(x);
        let s = sigmoid(raw);
        let pred = span * s;
        // d loss / d raw, through the squash.
        let dl_draw = scale * w * 2.0 * (pred - y) * span * s * (1.0 - s);
        mlp.backward(&acts, dl_draw, grad);
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    fn glorot(sizes: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
        let mut params = Vec::with_capacity(Self::param_count(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-limit..limit));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp {
            sizes: sizes.to_vec(),
            params,
        }
    }

    /// Activations per layer (input first); final entry is the raw output.
    fn forward(&self, x: &[f64]) -> (Vec<Vec<f64>>, f64) {
        debug_assert_eq!(x.len(), self.sizes[0]);
        let layers = self.sizes.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        let mut off = 0;
        for l in 0..layers {
            let (nin, nout) = (self.sizes[l], self.sizes[l + 1]);
            let input = acts[l].clone();
            let mut out = vec![0.0; nout];
            for (r, o) in out.iter_mut().enumerate() {
                let mut z = self.params[off + nout * nin + r];
                let wrow = &self.params[off + r * nin..off + (r + 1) * nin];
                for (wv, xv) in wrow.iter().zip(&input) {
                    z += wv * xv;
                }
                *o = if l + 1 < layers { z.max(0.0) } else { z };
            }
            acts.push(out);
            off += nout * (nin + 1);
        }
        let raw = acts[layers][0];
        (acts, raw)
    }

    fn predict(&self, x: &[f64]) -> f64 {
        self.forward(x).1
    }

    /// Accumulates d loss / d params into `grad` given d loss / d raw output.
    /// ReLU derivative is read off the stored activations (a > 0 iff z > 0).
    fn backward(&self, acts: &[Vec<f64>], dl_draw: f64, grad: &mut [f64]) {
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l + 1] * (self.sizes[l] + 1);
        }
        let mut delta = vec![dl_draw];
        for l in (0..layers).rev() {
            let (nin, nout) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let input = &acts[l];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let wgrad = &mut grad[off + r * nin..off + (r + 1) * nin];
                for (g, xv) in wgrad.iter_mut().zip(input) {
                    *g += d * xv;
                }
                grad[off + nout * nin + r] += d;
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; nin];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let wrow = &self.params[off + r * nin..off + (r + 1) * nin];
                for (p, wv) in prev.iter_mut().zip(wrow) {
                    *p += d * wv;
                }
            }
            for (p, a) in prev.iter_mut().zip(&acts[l]) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub param_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares the analytic gradient against central differences on a synthetic
/// weighted-squash dataset. Checks go through the entire loss: squash, spans,
/// weights and the network itself.
pub fn gradient_check(seed: u64, checks: usize) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 4;
    let mut data = Vec::new();
    for _ in 0..3 {
        let len = 6;
        let x: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..width).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let spans: Vec<f64> = (0..len).map(|_| rng.random_range(0.5..3.0)).collect();
        let y: Vec<f64> = spans
            .iter()
            .map(|&s| rng.random_range(0.0..s))
            .collect();
        let w = sample_weights(&y, 1e-3);
        data.push(TraceData { x, y, w, spans });
    }
    let sizes = vec![width, 8, 1];
    let mut mlp = Mlp::glorot(&sizes, &mut rng);

    let loss_of = |mlp: &Mlp| -> f64 {
        data.iter().map(|td| trace_loss(mlp, td)).sum::<f64>() / data.len() as f64
    };
    let mut grad = vec![0.0; mlp.params.len()];
    for td in &data {
        accumulate_gradient(&mlp, td, 1.0 / data.len() as f64, &mut grad);
    }

    let h = 1e-5;
    let mut out = Vec::with_capacity(checks);
    for _ in 0..checks {
        let i = rng.random_range(0..mlp.params.len());
        let orig = mlp.params[i];
        mlp.params[i] = orig + h;
        let up = loss_of(&mlp);
        mlp.params[i] = orig - h;
        let down = loss_of(&mlp);
        mlp.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad[i];
        let rel_err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
        out.push(GradCheck {
            param_index: i,
            analytic,
            numeric,
            rel_err,
        });
    }
    out
}
