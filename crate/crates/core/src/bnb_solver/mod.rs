//! Branch and bound over LP relaxations, instrumented with a bound trace.
//!
//! Time is measured in ticks: one tick per trace sample, one sample per
//! expanded node plus one extra sample per new incumbent, so ticks are a
//! deterministic stand-in for wall time. The trace records the incumbent
//! value U(t) and the proved lower bound L(t) after every event; downstream
//! stages only ever look at these two step functions.

mod simplex;

pub use simplex::{lp_relax, LpFailure, LpSolution};

use crate::instances::{ConSense, InstanceError, MilpInstance};
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeSelection {
    BestBound,
    DepthFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branching {
    MostFractional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnbConfig {
    /// Relative gap at which the solve declares success. Zero means run to a
    /// full optimality proof.
    pub epsilon: f64,
    /// Maximum number of expanded nodes.
    pub tick_limit: u64,
    pub node_selection: NodeSelection,
    pub branching: Branching,
    /// How close to an integer an LP value must be to count as integral.
    pub integrality_tol: f64,
    /// Round-and-repair incumbent search at every fractional node.
    pub rounding_heuristic: bool,
    /// Per-LP pivot budget; hitting it prunes the node and flags the trace.
    pub pivot_limit: usize,
}

impl Default for BnbConfig {
    fn default() -> Self {
        BnbConfig {
            epsilon: 1e-3,
            tick_limit: 2_000_000,
            node_selection: NodeSelection::BestBound,
            branching: Branching::MostFractional,
            integrality_tol: 1e-6,
            rounding_heuristic: true,
            pivot_limit: 50_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    /// Gap closed to epsilon (or the tree was exhausted).
    OptimalWithinEps,
    /// Ran out of node budget, or a callback requested an early exit.
    TickLimit,
    Infeasible,
    Unbounded,
}

/// Bounds snapshot at one tick. `upper` is `+inf` until the first incumbent;
/// `lower` is `-inf` until the root LP gives a proof.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub tick: u64,
    #[serde(with = "bound_value")]
    pub upper: f64,
    #[serde(with = "bound_value")]
    pub lower: f64,
    pub nodes_explored: u64,
    /// Set only on the extra sample that marks an incumbent discovery.
    pub incumbent_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub id: u32,
    pub tick: u64,
    pub objective: f64,
    pub solution: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTrace {
    pub instance_id: String,
    pub status: SolveStatus,
    /// Epsilon the solve ran with (not the downstream stopping tolerance).
    pub epsilon: f64,
    pub samples: Vec<TraceSample>,
    pub incumbents: Vec<Incumbent>,
    /// Exact optimum; set when the gap closed all the way to zero.
    pub z_star: Option<f64>,
    pub stopped_by_callback: bool,
    /// Nodes discarded because their LP hit the pivot budget. Nonzero means
    /// the optimality proof is best-effort.
    pub numeric_prunes: u64,
}

impl BoundTrace {
    pub fn final_sample(&self) -> Option<&TraceSample> {
        self.samples.last()
    }

    /// Upper bound in effect at `tick` (step-function semantics).
    pub fn upper_at(&self, tick: u64) -> f64 {
        match self.samples.iter().rev().find(|s| s.tick <= tick) {
            Some(s) => s.upper,
            None => f64::INFINITY,
        }
    }

    pub fn terminal_tick(&self) -> u64 {
        self.samples.last().map_or(0, |s| s.tick)
    }
}

/// Structural invariants every recorded trace must satisfy: ticks strictly
/// increase, the upper bound never rises, the lower bound never falls, the
/// bounds never cross, node counts never shrink, incumbents strictly improve,
/// and the proved optimum (when given) sits between the bounds. Returns the
/// first violation as text.
pub fn verify_trace(trace: &BoundTrace, z_star: Option<f64>) -> Result<(), String> {
    if trace.samples.is_empty() {
        return Err("trace has no samples".into());
    }
    let mut prev: Option<&TraceSample> = None;
    for s in &trace.samples {
        if let Some(p) = prev {
            if s.tick <= p.tick {
                return Err(format!("tick {} does not advance past {}", s.tick, p.tick));
            }
            if s.upper > p.upper {
                return Err(format!("upper bound rose at tick {}", s.tick));
            }
            if s.lower < p.lower {
                return Err(format!("lower bound fell at tick {}", s.tick));
            }
            if s.nodes_explored < p.nodes_explored {
                return Err(format!("node count shrank at tick {}", s.tick));
            }
        }
        if s.lower > s.upper {
            return Err(format!("bounds crossed at tick {}", s.tick));
        }
        if let Some(z) = z_star {
            if s.lower.is_finite() && s.lower > z + 1e-9 {
                return Err(format!("lower bound {} above optimum {z} at tick {}", s.lower, s.tick));
            }
            if s.upper.is_finite() && s.upper < z - 1e-9 {
                return Err(format!("upper bound {} below optimum {z} at tick {}", s.upper, s.tick));
            }
        }
        prev = Some(s);
    }
    let mut last_obj = f64::INFINITY;
    for inc in &trace.incumbents {
        if inc.objective >= last_obj {
            return Err(format!("incumbent {} does not improve", inc.id));
        }
        last_obj = inc.objective;
    }
    let last = trace.samples.last().expect("checked nonempty");
    if trace.status == SolveStatus::OptimalWithinEps
        && algorithmic_gap(last.upper, last.lower) > trace.epsilon
    {
        return Err("declared optimal but the final gap exceeds epsilon".into());
    }
    if trace.z_star.is_some() && algorithmic_gap(last.upper, last.lower) != 0.0 {
        return Err("claims an exact optimum without a closed gap".into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub trace: BoundTrace,
    pub best_objective: Option<f64>,
    pub best_solution: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickAction {
    Continue,
    Stop,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    InvalidInstance(#[from] InstanceError),
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
}

/// Relative algorithmic gap (U - L) / |L|, the solver's own progress measure.
/// Infinite while either bound is missing or L sits at zero with U above it;
/// zero as soon as the bounds meet.
pub fn algorithmic_gap(upper: f64, lower: f64) -> f64 {
    if upper == lower {
        return 0.0;
    }
    if !upper.is_finite() || !lower.is_finite() || lower == 0.0 {
        return f64::INFINITY;
    }
    (upper - lower) / lower.abs()
}

pub fn solve(inst: &MilpInstance, config: &BnbConfig) -> Result<SolveResult, SolveError> {
    solve_with_callback(inst, config, |_| TickAction::Continue)
}

pub fn solve_with_callback(
    inst: &MilpInstance,
    config: &BnbConfig,
    mut on_tick: impl FnMut(&TraceSample) -> TickAction,
) -> Result<SolveResult, SolveError> {
    inst.validate()?;
    validate_config(config)?;
    let mut driver = Driver::new(inst, config);
    let status = driver.run(&mut on_tick);
    Ok(driver.finish(status))
}

fn validate_config(config: &BnbConfig) -> Result<(), SolveError> {
    if config.epsilon.is_nan() || config.epsilon < 0.0 {
        return Err(SolveError::InvalidConfig(format!(
            "epsilon must be nonnegative, got {}",
            config.epsilon
        )));
    }
    if !(0.0..0.5).contains(&config.integrality_tol) {
        return Err(SolveError::InvalidConfig(format!(
            "integrality_tol must be in [0, 0.5), got {}",
            config.integrality_tol
        )));
    }
    if config.pivot_limit == 0 {
        return Err(SolveError::InvalidConfig("pivot_limit must be positive".into()));
    }
    Ok(())
}

struct Node {
    id: u64,
    /// Best proved bound inherited from the parent LP (lifted).
    bound: f64,
    depth: u32,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

struct HeapEntry {
    bits: u64,
    id: u64,
    node: Node,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        (self.bits, self.id) == (other.bits, other.id)
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.bits, self.id).cmp(&(other.bits, other.id))
    }
}

enum OpenSet {
    Best(BinaryHeap<Reverse<HeapEntry>>),
    Depth(Vec<Node>),
}

impl OpenSet {
    fn new(selection: NodeSelection) -> Self {
        match selection {
            NodeSelection::BestBound => OpenSet::Best(BinaryHeap::new()),
            NodeSelection::DepthFirst => OpenSet::Depth(Vec::new()),
        }
    }

    fn push(&mut self, node: Node) {
        match self {
            OpenSet::Best(heap) => heap.push(Reverse(HeapEntry {
                bits: ordered_bits(node.bound),
                id: node.id,
                node,
            })),
            OpenSet::Depth(stack) => stack.push(node),
        }
    }

    fn pop(&mut self) -> Option<Node> {
        match self {
            OpenSet::Best(heap) => heap.pop().map(|Reverse(e)| e.node),
            OpenSet::Depth(stack) => stack.pop(),
        }
    }
}

/// Monotone f64 -> u64 mapping (total order, infinities included).
fn ordered_bits(v: f64) -> u64 {
    let b = v.to_bits();
    if b & (1 << 63) != 0 {
        !b
    } else {
        b | (1 << 63)
    }
}

struct Driver<'a> {
    inst: &'a MilpInstance,
    config: &'a BnbConfig,
    /// All-integer variables and all-integer objective: bounds can be lifted
    /// to the next integer and incumbent comparisons are exact.
    pure_integer: bool,
    open: OpenSet,
    open_bounds: BTreeMap<u64, u32>,
    next_node_id: u64,
    next_tick: u64,
    nodes_explored: u64,
    upper: f64,
    lower_reported: f64,
    best_solution: Option<Vec<f64>>,
    samples: Vec<TraceSample>,
    incumbents: Vec<Incumbent>,
    numeric_prunes: u64,
    stopped_by_callback: bool,
}

impl<'a> Driver<'a> {
    fn new(inst: &'a MilpInstance, config: &'a BnbConfig) -> Self {
        let pure_integer = inst.is_integer.iter().all(|&b| b)
            && inst.objective.iter().all(|c| c.fract() == 0.0);
        let mut driver = Driver {
            inst,
            config,
            pure_integer,
            open: OpenSet::new(config.node_selection),
            open_bounds: BTreeMap::new(),
            next_node_id: 0,
            next_tick: 0,
            nodes_explored: 0,
            upper: f64::INFINITY,
            lower_reported: f64::NEG_INFINITY,
            best_solution: None,
            samples: Vec::new(),
            incumbents: Vec::new(),
            numeric_prunes: 0,
            stopped_by_callback: false,
        };
        driver.push_node(Node {
            id: 0,
            bound: f64::NEG_INFINITY,
            depth: 0,
            lower: inst.var_lower.clone(),
            upper: inst.var_upper.clone(),
        });
        driver.next_node_id = 1;
        driver
    }

    fn push_node(&mut self, node: Node) {
        *self.open_bounds.entry(ordered_bits(node.bound)).or_insert(0) += 1;
        self.open.push(node);
    }

    fn remove_bound(&mut self, bound: f64) {
        let key = ordered_bits(bound);
        match self.open_bounds.get_mut(&key) {
            Some(count) if *count > 1 => *count -= 1,
            _ => {
                self.open_bounds.remove(&key);
            }
        }
    }

    /// Threshold above which a node bound proves it cannot improve on the
    /// incumbent.
    fn prune_threshold(&self) -> f64 {
        if self.pure_integer {
            self.upper
        } else {
            self.upper - 1e-9 * self.upper.abs().max(1.0)
        }
    }

    fn lift(&self, lp_bound: f64) -> f64 {
        if self.pure_integer {
            (lp_bound - 1e-6).ceil()
        } else {
            lp_bound
        }
    }

    fn run(&mut self, on_tick: &mut impl FnMut(&TraceSample) -> TickAction) -> SolveStatus {
        loop {
            if self.nodes_explored >= self.config.tick_limit {
                return SolveStatus::TickLimit;
            }
            let Some(node) = self.open.pop() else {
                // Tree exhausted without incumbent: nothing feasible anywhere.
                return SolveStatus::Infeasible;
            };
            self.remove_bound(node.bound);
            if node.bound >= self.prune_threshold() {
                continue;
            }

            let upper_before = self.upper;
            let mut new_incumbent: Option<u32> = None;
            match lp_relax(self.inst, &node.lower, &node.upper, self.config.pivot_limit) {
                Err(LpFailure::Infeasible) => {
                    self.nodes_explored += 1;
                }
                Err(LpFailure::Unbounded) => {
                    self.nodes_explored += 1;
                    if node.id == 0 {
                        self.emit(upper_before, None, on_tick);
                        return SolveStatus::Unbounded;
                    }
                    // A subproblem of a box-bounded family cannot be unbounded;
                    // treat survivors as numerical and drop the node.
                    self.numeric_prunes += 1;
                }
                Err(LpFailure::PivotLimitExceeded) => {
                    self.nodes_explored += 1;
                    self.numeric_prunes += 1;
                }
                Ok(sol) => {
                    self.nodes_explored += 1;
                    let bound = self.lift(sol.objective);
                    match self.integral_point(&sol.x) {
                        Some((obj, snapped)) => {
                            new_incumbent = self.offer_incumbent(obj, snapped);
                        }
                        None => {
                            if self.config.rounding_heuristic {
                                if let Some((obj, x)) = self.round_and_repair(&sol.x) {
                                    new_incumbent = self.offer_incumbent(obj, x);
                                }
                            }
                            if bound < self.prune_threshold() {
                                self.branch(&node, &sol.x, bound);
                            }
                        }
                    }
                }
            }

            self.update_lower();
            let stop = self.emit(upper_before, None, on_tick) == TickAction::Stop;
            let stop = if let Some(id) = new_incumbent {
                let tick = self.next_tick;
                self.incumbents[id as usize].tick = tick;
                self.emit(self.upper, Some(id), on_tick) == TickAction::Stop || stop
            } else {
                stop
            };
            if stop {
                self.stopped_by_callback = true;
                return SolveStatus::TickLimit;
            }

            if algorithmic_gap(self.upper, self.lower_reported) <= self.config.epsilon {
                return SolveStatus::OptimalWithinEps;
            }
            if self.open_bounds.is_empty() {
                return if self.incumbents.is_empty() {
                    SolveStatus::Infeasible
                } else {
                    // update_lower already snapped L to U.
                    SolveStatus::OptimalWithinEps
                };
            }
        }
    }

    /// L(t) is the max over time of min(best open bound, U): any bound proved
    /// once stays proved, and exhausting or pruning the tree closes L onto U.
    fn update_lower(&mut self) {
        let open_min = self
            .open_bounds
            .first_key_value()
            .map_or(f64::INFINITY, |(&bits, _)| unordered_bits(bits));
        let candidate = open_min.min(self.upper);
        if candidate.is_finite() && candidate > self.lower_reported {
            self.lower_reported = candidate;
        }
    }

    fn emit(
        &mut self,
        upper: f64,
        incumbent_id: Option<u32>,
        on_tick: &mut impl FnMut(&TraceSample) -> TickAction,
    ) -> TickAction {
        let sample = TraceSample {
            tick: self.next_tick,
            upper,
            lower: self.lower_reported,
            nodes_explored: self.nodes_explored,
            incumbent_id,
        };
        self.next_tick += 1;
        self.samples.push(sample);
        on_tick(&sample)
    }

    /// Snaps a within-tolerance LP point to integers and verifies it exactly;
    /// returns the checked objective and point.
    fn integral_point(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let tol = self.config.integrality_tol;
        let mut snapped = x.to_vec();
        for j in 0..self.inst.num_vars() {
            if self.inst.is_integer[j] {
                let r = x[j].round();
                if (x[j] - r).abs() > tol {
                    return None;
                }
                snapped[j] = r;
            }
        }
        if !point_feasible(self.inst, &snapped) {
            return None;
        }
        let obj = dot(&self.inst.objective, &snapped);
        Some((obj, snapped))
    }

    fn offer_incumbent(&mut self, objective: f64, solution: Vec<f64>) -> Option<u32> {
        if objective < self.upper {
            let id = self.incumbents.len() as u32;
            self.upper = objective;
            self.best_solution = Some(solution.clone());
            self.incumbents.push(Incumbent {
                id,
                tick: 0, // patched when the incumbent sample is emitted
                objective,
                solution,
            });
            Some(id)
        } else {
            None
        }
    }

    fn branch(&mut self, node: &Node, x: &[f64], bound: f64) {
        let Some(j) = branch_variable(x, &self.inst.is_integer, self.config.integrality_tol)
        else {
            // All integer variables are exactly integral yet the point failed
            // verification; nothing to branch on, so drop the node rather than
            // loop forever.
            self.numeric_prunes += 1;
            return;
        };
        let mut left = Node {
            id: self.next_node_id,
            bound,
            depth: node.depth + 1,
            lower: node.lower.clone(),
            upper: node.upper.clone(),
        };
        left.upper[j] = x[j].floor();
        let mut right = Node {
            id: self.next_node_id + 1,
            bound,
            depth: node.depth + 1,
            lower: node.lower.clone(),
            upper: node.upper.clone(),
        };
        right.lower[j] = x[j].ceil();
        self.next_node_id += 2;
        self.push_node(left);
        self.push_node(right);
    }

    /// Round-and-repair incumbent search. Pure-integer instances repair by
    /// greedy single steps that maximally shrink total violation; mixed ones
    /// fix the rounded integers and re-solve the continuous rest, opening the
    /// most rounded-down integer one step at a time if that LP is infeasible.
    fn round_and_repair(&self, lp_x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let inst = self.inst;
        let n = inst.num_vars();
        let mut x: Vec<f64> = lp_x.to_vec();
        for j in 0..n {
            if inst.is_integer[j] {
                x[j] = lp_x[j].round().clamp(inst.var_lower[j], inst.var_upper[j]);
            }
        }
        let has_continuous = inst.is_integer.iter().any(|&b| !b);
        if !has_continuous {
            let repaired = greedy_repair(inst, x)?;
            let obj = dot(&inst.objective, &repaired);
            return Some((obj, repaired));
        }

        let mut attempts = inst.num_integer_vars() + 1;
        loop {
            let mut lo = inst.var_lower.clone();
            let mut hi = inst.var_upper.clone();
            for j in 0..n {
                if inst.is_integer[j] {
                    lo[j] = x[j];
                    hi[j] = x[j];
                }
            }
            match lp_relax(inst, &lo, &hi, self.config.pivot_limit) {
                Ok(sol) => {
                    let mut full = sol.x;
                    for j in 0..n {
                        if inst.is_integer[j] {
                            full[j] = x[j];
                        }
                    }
                    if !point_feasible(inst, &full) {
                        return None;
                    }
                    return Some((dot(&inst.objective, &full), full));
                }
                Err(LpFailure::Infeasible) => {
                    attempts -= 1;
                    if attempts == 0 {
                        return None;
                    }
                    // Raise the integer variable that rounding shaved the most.
                    let j = (0..n)
                        .filter(|&j| inst.is_integer[j] && x[j] < inst.var_upper[j])
                        .max_by(|&a, &b| {
                            let da = lp_x[a] - x[a];
                            let db = lp_x[b] - x[b];
                            da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                        })?;
                    x[j] += 1.0;
                }
                Err(_) => return None,
            }
        }
    }

    fn finish(mut self, status: SolveStatus) -> SolveResult {
        let z_star = if status == SolveStatus::OptimalWithinEps
            && algorithmic_gap(self.upper, self.lower_reported) == 0.0
        {
            Some(self.upper)
        } else {
            None
        };
        let best_objective = self.incumbents.last().map(|i| i.objective);
        let trace = BoundTrace {
            instance_id: self.inst.id.clone(),
            status,
            epsilon: self.config.epsilon,
            samples: std::mem::take(&mut self.samples),
            incumbents: std::mem::take(&mut self.incumbents),
            z_star,
            stopped_by_callback: self.stopped_by_callback,
            numeric_prunes: self.numeric_prunes,
        };
        SolveResult {
            trace,
            best_objective,
            best_solution: self.best_solution.take(),
        }
    }
}

fn unordered_bits(bits: u64) -> f64 {
    if bits & (1 << 63) != 0 {
        f64::from_bits(bits & !(1 << 63))
    } else {
        f64::from_bits(!bits)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn point_feasible(inst: &MilpInstance, x: &[f64]) -> bool {
    const TOL: f64 = 1e-7;
    for (j, &xj) in x.iter().enumerate() {
        if xj < inst.var_lower[j] - TOL || xj > inst.var_upper[j] + TOL {
            return false;
        }
    }
    for i in 0..inst.num_cons() {
        let act = dot(inst.row(i), x);
        let ok = match inst.con_sense[i] {
            ConSense::Le => act <= inst.con_rhs[i] + TOL,
            ConSense::Ge => act >= inst.con_rhs[i] - TOL,
            ConSense::Eq => (act - inst.con_rhs[i]).abs() <= TOL,
        };
        if !ok {
            return false;
        }
    }
    true
}

/// Most-fractional rule: the integer variable whose LP value sits closest to
/// half-integrality, lowest index on ties. Falls back to the largest
/// fractional remainder below tolerance so a failed snap still progresses.
fn branch_variable(x: &[f64], is_integer: &[bool], tol: f64) -> Option<usize> {
    let score = |v: f64| {
        let f = v - v.floor();
        f.min(1.0 - f)
    };
    let mut best: Option<(usize, f64)> = None;
    for j in 0..x.len() {
        if !is_integer[j] {
            continue;
        }
        let s = score(x[j]);
        if s > tol && best.is_none_or(|(_, bs)| s > bs) {
            best = Some((j, s));
        }
    }
    if best.is_none() {
        for j in 0..x.len() {
            if is_integer[j] {
                let s = score(x[j]);
                if s > 0.0 && best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((j, s));
                }
            }
        }
    }
    best.map(|(j, _)| j)
}

/// Greedy repair for all-integer roundings: take the single +/-1 step that
/// shrinks total constraint violation the most until feasible or stuck.
fn greedy_repair(inst: &MilpInstance, mut x: Vec<f64>) -> Option<Vec<f64>> {
    let m = inst.num_cons();
    let n = inst.num_vars();
    let violation = |acts: &[f64]| -> f64 {
        (0..m)
            .map(|i| match inst.con_sense[i] {
                ConSense::Le => (acts[i] - inst.con_rhs[i]).max(0.0),
                ConSense::Ge => (inst.con_rhs[i] - acts[i]).max(0.0),
                ConSense::Eq => (acts[i] - inst.con_rhs[i]).abs(),
            })
            .sum()
    };
    let mut acts: Vec<f64> = (0..m).map(|i| dot(inst.row(i), &x)).collect();
    let mut v = violation(&acts);
    for _ in 0..2 * n {
        if v <= 0.0 {
            return Some(x);
        }
        let mut best: Option<(f64, usize, f64)> = None; // (new violation, var, step)
        for (j, &is_int) in inst.is_integer.iter().enumerate() {
            if !is_int {
                continue;
            }
            for step in [1.0, -1.0] {
                let nv = x[j] + step;
                if nv < inst.var_lower[j] || nv > inst.var_upper[j] {
                    continue;
                }
                let mut trial = acts.clone();
                for (i, t) in trial.iter_mut().enumerate() {
                    *t += step * inst.row(i)[j];
                }
                let tv = violation(&trial);
                if best.is_none_or(|(bv, _, _)| tv < bv) {
                    best = Some((tv, j, step));
                }
            }
        }
        let (tv, j, step) = best?;
        if tv >= v {
            return None;
        }
        x[j] += step;
        for (i, a) in acts.iter_mut().enumerate() {
            *a += step * inst.row(i)[j];
        }
        v = tv;
    }
    (v <= 0.0).then_some(x)
}

/// On-disk encoding for bound fields: infinities become the reserved strings
/// "inf" / "-inf" since JSON has no literal for them.
pub mod bound_value {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, ser: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            ser.serialize_f64(*v)
        } else if *v > 0.0 {
            ser.serialize_str("inf")
        } else {
            ser.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(D::Error::custom(format!("unknown bound sentinel {other:?}"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{
        brute_force_solve, generate_family, FamilyParams, KnapsackParams, SetCoverParams, Split,
    };

    fn knapsack3() -> MilpInstance {
        MilpInstance::knapsack("k3", &[6.0, 10.0, 12.0], &[vec![1.0, 2.0, 3.0]], &[5.0])
    }

    fn exact_config() -> BnbConfig {
        BnbConfig {
            epsilon: 0.0,
            ..BnbConfig::default()
        }
    }

    #[test]
    fn gap_examples() {
        assert_eq!(algorithmic_gap(10.0, 8.0), 0.25);
        assert_eq!(algorithmic_gap(5.0, 5.0), 0.0);
        assert_eq!(algorithmic_gap(3.0, 0.0), f64::INFINITY);
        assert_eq!(algorithmic_gap(0.0, 0.0), 0.0);
        assert_eq!(algorithmic_gap(f64::INFINITY, 1.0), f64::INFINITY);
        assert_eq!(algorithmic_gap(1.0, f64::NEG_INFINITY), f64::INFINITY);
        assert_eq!(
            algorithmic_gap(f64::INFINITY, f64::INFINITY),
            0.0,
            "equal sentinels mean the bounds met"
        );
    }

    #[test]
    fn tiny_knapsack_solves_to_brute_force_optimum() {
        let inst = knapsack3();
        let res = solve(&inst, &exact_config()).unwrap();
        assert_eq!(res.trace.status, SolveStatus::OptimalWithinEps);
        assert_eq!(res.best_objective, Some(-22.0));
        assert_eq!(res.trace.z_star, Some(-22.0));
        assert_eq!(res.best_solution.unwrap(), vec![0.0, 1.0, 1.0]);
        let oracle = brute_force_solve(&inst).unwrap();
        assert_eq!(oracle.objective, -22.0);
    }

    #[test]
    fn root_heuristic_finds_early_incumbent() {
        let inst = knapsack3();
        let res = solve(&inst, &exact_config()).unwrap();
        let first = &res.trace.incumbents[0];
        assert_eq!(first.tick, 1, "incumbent sample right after the root sample");
        assert_eq!(first.objective, -22.0, "greedy repair lands on the optimum here");
    }

    #[test]
    fn integral_root_closes_in_one_node() {
        // LP optimum is integral: two independent items, no interaction.
        let inst = MilpInstance::knapsack(
            "easy",
            &[5.0, 4.0],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[1.0, 1.0],
        );
        let res = solve(&inst, &exact_config()).unwrap();
        assert_eq!(res.trace.status, SolveStatus::OptimalWithinEps);
        let last = res.trace.final_sample().unwrap();
        assert_eq!(last.nodes_explored, 1);
        assert_eq!(res.best_objective, Some(-9.0));
    }

    #[test]
    fn infeasible_instance_reports_status_with_trace() {
        let mut inst = MilpInstance::knapsack("inf", &[1.0], &[vec![1.0]], &[2.0]);
        inst.con_sense[0] = ConSense::Ge;
        let res = solve(&inst, &exact_config()).unwrap();
        assert_eq!(res.trace.status, SolveStatus::Infeasible);
        assert!(res.trace.incumbents.is_empty());
        assert!(res.best_objective.is_none());
        assert_eq!(res.trace.samples.len(), 1);
    }

    #[test]
    fn unbounded_root_is_reported() {
        let mut inst = MilpInstance::knapsack("unb", &[1.0], &[vec![0.0]], &[1.0]);
        inst.objective[0] = -1.0;
        inst.var_upper[0] = f64::INFINITY;
        inst.is_integer[0] = false;
        let res = solve(&inst, &exact_config()).unwrap();
        assert_eq!(res.trace.status, SolveStatus::Unbounded);
    }

    #[test]
    fn tick_limit_truncates_search() {
        let params = FamilyParams::Knapsack(KnapsackParams {
            items: 20,
            ..KnapsackParams::default()
        });
        let inst = generate_family(&params, 5, 1, Split::Train).unwrap().instances[0].clone();
        let config = BnbConfig {
            epsilon: 0.0,
            tick_limit: 3,
            ..BnbConfig::default()
        };
        let res = solve(&inst, &config).unwrap();
        assert_eq!(res.trace.status, SolveStatus::TickLimit);
        assert!(res.trace.final_sample().unwrap().nodes_explored <= 3);
    }

    #[test]
    fn callback_stop_keeps_first_incumbent() {
        let inst = knapsack3();
        let res = solve_with_callback(&inst, &exact_config(), |s| {
            if s.incumbent_id.is_some() {
                TickAction::Stop
            } else {
                TickAction::Continue
            }
        })
        .unwrap();
        assert_eq!(res.trace.status, SolveStatus::TickLimit);
        assert!(res.trace.stopped_by_callback);
        assert_eq!(res.trace.incumbents.len(), 1);
        assert_eq!(
            res.best_objective,
            Some(res.trace.incumbents[0].objective)
        );
    }

    #[test]
    fn branch_variable_prefers_half_fractional_lowest_index() {
        let x = [0.5, 0.5, 0.2];
        let isint = [true, true, true];
        assert_eq!(branch_variable(&x, &isint, 1e-6), Some(0));
        let x2 = [0.9, 0.45, 0.0];
        assert_eq!(branch_variable(&x2, &isint, 1e-6), Some(1));
        let integral = [1.0, 0.0, 1.0];
        assert_eq!(branch_variable(&integral, &isint, 1e-6), None);
    }

    #[test]
    fn trace_invariants_and_oracle_agreement_on_random_instances() {
        let families = [
            FamilyParams::Knapsack(KnapsackParams {
                items: 12,
                ..KnapsackParams::default()
            }),
            FamilyParams::SetCover(SetCoverParams {
                universe: 10,
                sets: 12,
                density: 0.3,
                cost_max: 20,
            }),
        ];
        for params in families {
            let set = generate_family(&params, 21, 12, Split::Test).unwrap();
            for inst in &set.instances {
                let res = solve(inst, &exact_config()).unwrap();
                let oracle = brute_force_solve(inst).unwrap();
                assert_eq!(res.trace.status, SolveStatus::OptimalWithinEps);
                assert_eq!(
                    res.best_objective,
                    Some(oracle.objective),
                    "{} solver vs enumeration",
                    inst.id
                );
                assert_eq!(res.trace.z_star, Some(oracle.objective));
                check_trace_invariants(&res.trace, oracle.objective);
            }
        }
    }

    pub(crate) fn check_trace_invariants(trace: &BoundTrace, z_star: f64) {
        if let Err(msg) = verify_trace(trace, Some(z_star)) {
            panic!("{}: {msg}", trace.instance_id);
        }
    }

    #[test]
    fn identical_runs_produce_identical_traces() {
        let params = FamilyParams::Knapsack(KnapsackParams::default());
        let inst = generate_family(&params, 9, 1, Split::Train).unwrap().instances[0].clone();
        let a = solve(&inst, &exact_config()).unwrap();
        let b = solve(&inst, &exact_config()).unwrap();
        assert_eq!(
            serde_json::to_vec(&a.trace).unwrap(),
            serde_json::to_vec(&b.trace).unwrap()
        );
    }

    #[test]
    fn depth_first_matches_best_bound_optimum() {
        let params = FamilyParams::Knapsack(KnapsackParams {
            items: 12,
            ..KnapsackParams::default()
        });
        let inst = generate_family(&params, 33, 1, Split::Train).unwrap().instances[0].clone();
        let dfs = BnbConfig {
            epsilon: 0.0,
            node_selection: NodeSelection::DepthFirst,
            ..BnbConfig::default()
        };
        let a = solve(&inst, &exact_config()).unwrap();
        let b = solve(&inst, &dfs).unwrap();
        assert_eq!(a.best_objective, b.best_objective);
        let oracle = brute_force_solve(&inst).unwrap();
        check_trace_invariants(&b.trace, oracle.objective);
    }

    #[test]
    fn bound_sentinels_round_trip_through_json() {
        let s = TraceSample {
            tick: 0,
            upper: f64::INFINITY,
            lower: f64::NEG_INFINITY,
            nodes_explored: 1,
            incumbent_id: None,
        };
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"inf\""));
        assert!(text.contains("\"-inf\""));
        let back: TraceSample = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
