//! Exact oracle: full enumeration of integer assignments, with a residual LP
//! per assignment when continuous variables exist.
//!
//! The LP code here is a deliberately separate textbook implementation
//! (standard form, two-phase, dense tableau) so results can cross-check the
//! solver's bounded-variable simplex without sharing any code path.

use super::{ConSense, InstanceError, MilpInstance};
use thiserror::Error;

const FEAS_TOL: f64 = 1e-7;
const PIVOT_TOL: f64 = 1e-9;
const MAX_ENUMERATIONS: u128 = 1 << 21;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceSolution {
    pub objective: f64,
    pub solution: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum BruteForceError {
    #[error("enumeration too large: {integer_vars} integer variables, {enumerations} assignments")]
    TooLarge {
        integer_vars: usize,
        enumerations: u128,
    },
    #[error("no feasible integer assignment")]
    Infeasible,
    #[error("objective unbounded below")]
    Unbounded,
    #[error("variable {var} has bounds the oracle cannot shift to standard form")]
    UnsupportedBounds { var: usize },
    #[error("LP pivot limit hit in oracle")]
    LpStalled,
    #[error(transparent)]
    Malformed(#[from] InstanceError),
}

/// Exact optimum by enumerating every integer assignment. Kept independent of
/// the branch-and-bound path so it can serve as its correctness oracle.
pub fn brute_force_solve(inst: &MilpInstance) -> Result<BruteForceSolution, BruteForceError> {
    inst.validate()?;
    let n = inst.num_vars();
    let int_idx: Vec<usize> = (0..n).filter(|&j| inst.is_integer[j]).collect();
    let cont_idx: Vec<usize> = (0..n).filter(|&j| !inst.is_integer[j]).collect();
    if int_idx.len() > 20 {
        return Err(BruteForceError::TooLarge {
            integer_vars: int_idx.len(),
            enumerations: 0,
        });
    }

    let mut lows = Vec::new();
    let mut highs = Vec::new();
    let mut enumerations: u128 = 1;
    for &j in &int_idx {
        let lo = inst.var_lower[j].ceil() as i64;
        let hi = inst.var_upper[j].floor() as i64;
        if lo > hi {
            return Err(BruteForceError::Infeasible);
        }
        lows.push(lo);
        highs.push(hi);
        enumerations = enumerations.saturating_mul((hi - lo + 1) as u128);
        if enumerations > MAX_ENUMERATIONS {
            return Err(BruteForceError::TooLarge {
                integer_vars: int_idx.len(),
                enumerations,
            });
        }
    }

    let residual = if cont_idx.is_empty() {
        None
    } else {
        Some(ResidualLp::new(inst, &int_idx, &cont_idx)?)
    };

    let mut best: Option<BruteForceSolution> = None;
    let mut assign = lows.clone();
    loop {
        if let Some(candidate) = evaluate_assignment(inst, &int_idx, &assign, residual.as_ref())? {
            if best.as_ref().is_none_or(|b| candidate.objective < b.objective) {
                best = Some(candidate);
            }
        }
        // Odometer increment, lexicographic from the low corner.
        let mut pos = assign.len();
        loop {
            if pos == 0 {
                return best.ok_or(BruteForceError::Infeasible);
            }
            pos -= 1;
            if assign[pos] < highs[pos] {
                assign[pos] += 1;
                break;
            }
            assign[pos] = lows[pos];
        }
    }
}

/// Solves the LP relaxation (integrality dropped) with the oracle's own
/// simplex. Exists to cross-check the solver's LP bounds.
pub fn reference_lp_relaxation(inst: &MilpInstance) -> Result<(f64, Vec<f64>), BruteForceError> {
    inst.validate()?;
    let rows: Vec<Vec<f64>> = (0..inst.num_cons()).map(|i| inst.row(i).to_vec()).collect();
    let lp = StdLp::build(
        &inst.objective,
        &rows,
        &inst.con_sense,
        &inst.con_rhs,
        &inst.var_lower,
        &inst.var_upper,
    )?;
    lp.solve()
}

fn evaluate_assignment(
    inst: &MilpInstance,
    int_idx: &[usize],
    assign: &[i64],
    residual: Option<&ResidualLp>,
) -> Result<Option<BruteForceSolution>, BruteForceError> {
    let n = inst.num_vars();
    let obj_int: f64 = int_idx
        .iter()
        .zip(assign)
        .map(|(&j, &v)| inst.objective[j] * v as f64)
        .sum();

    match residual {
        None => {
            for i in 0..inst.num_cons() {
                let row = inst.row(i);
                let act: f64 = int_idx
                    .iter()
                    .zip(assign)
                    .map(|(&j, &v)| row[j] * v as f64)
                    .sum();
                let ok = match inst.con_sense[i] {
                    ConSense::Le => act <= inst.con_rhs[i] + FEAS_TOL,
                    ConSense::Ge => act >= inst.con_rhs[i] - FEAS_TOL,
                    ConSense::Eq => (act - inst.con_rhs[i]).abs() <= FEAS_TOL,
                };
                if !ok {
                    return Ok(None);
                }
            }
            let mut x = vec![0.0; n];
            for (&j, &v) in int_idx.iter().zip(assign) {
                x[j] = v as f64;
            }
            Ok(Some(BruteForceSolution {
                objective: obj_int,
                solution: x,
            }))
        }
        Some(res) => match res.solve(inst, int_idx, assign)? {
            None => Ok(None),
            Some((obj_cont, x_cont)) => {
                let mut x = vec![0.0; n];
                for (&j, &v) in int_idx.iter().zip(assign) {
                    x[j] = v as f64;
                }
                for (&j, &v) in res.cont_idx.iter().zip(&x_cont) {
                    x[j] = v;
                }
                Ok(Some(BruteForceSolution {
                    objective: obj_int + obj_cont,
                    solution: x,
                }))
            }
        },
    }
}

/// Pre-extracted continuous sub-LP; per assignment only the rhs changes.
struct ResidualLp {
    cont_idx: Vec<usize>,
    objective: Vec<f64>,
    rows: Vec<Vec<f64>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ResidualLp {
    fn new(
        inst: &MilpInstance,
        _int_idx: &[usize],
        cont_idx: &[usize],
    ) -> Result<Self, BruteForceError> {
        let rows = (0..inst.num_cons())
            .map(|i| cont_idx.iter().map(|&j| inst.row(i)[j]).collect())
            .collect();
        Ok(ResidualLp {
            cont_idx: cont_idx.to_vec(),
            objective: cont_idx.iter().map(|&j| inst.objective[j]).collect(),
            rows,
            lower: cont_idx.iter().map(|&j| inst.var_lower[j]).collect(),
            upper: cont_idx.iter().map(|&j| inst.var_upper[j]).collect(),
        })
    }

    fn solve(
        &self,
        inst: &MilpInstance,
        int_idx: &[usize],
        assign: &[i64],
    ) -> Result<Option<(f64, Vec<f64>)>, BruteForceError> {
        let mut rhs = Vec::with_capacity(inst.num_cons());
        for i in 0..inst.num_cons() {
            let row = inst.row(i);
            let act: f64 = int_idx
                .iter()
                .zip(assign)
                .map(|(&j, &v)| row[j] * v as f64)
                .sum();
            rhs.push(inst.con_rhs[i] - act);
        }
        let lp = StdLp::build(
            &self.objective,
            &self.rows,
            &inst.con_sense,
            &rhs,
            &self.lower,
            &self.upper,
        )?;
        match lp.solve() {
            Ok(sol) => Ok(Some(sol)),
            Err(BruteForceError::Infeasible) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Minimize c.z subject to Az = b, z >= 0, built from a row/sense/box
/// formulation. Two-phase dense tableau with Bland's rule.
struct StdLp {
    /// Constraint rows, each `ncols` coefficients.
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    cost: Vec<f64>,
    ncols: usize,
    art_start: usize,
    /// Maps structural column -> (original var, shift, sign) for extraction.
    recover: Vec<(usize, f64, f64)>,
    nvars: usize,
}

impl StdLp {
    fn build(
        c: &[f64],
        a: &[Vec<f64>],
        senses: &[ConSense],
        b: &[f64],
        lower: &[f64],
        upper: &[f64],
    ) -> Result<Self, BruteForceError> {
        let nvars = c.len();
        // Shift every variable to z >= 0. Finite lower: z = x - l. Infinite
        // lower with finite upper: z = u - x. Doubly infinite is not needed by
        // any family here.
        let mut shift = vec![0.0; nvars];
        let mut sign = vec![1.0; nvars];
        let mut residual_upper = vec![f64::INFINITY; nvars];
        for j in 0..nvars {
            if lower[j].is_finite() {
                shift[j] = lower[j];
                sign[j] = 1.0;
                residual_upper[j] = upper[j] - lower[j];
            } else if upper[j].is_finite() {
                shift[j] = upper[j];
                sign[j] = -1.0;
                residual_upper[j] = f64::INFINITY;
            } else {
                return Err(BruteForceError::UnsupportedBounds { var: j });
            }
        }

        let n_ub = residual_upper.iter().filter(|u| u.is_finite()).count();
        let n_slack: usize =
            senses.iter().filter(|s| **s != ConSense::Eq).count() + n_ub;
        let nrows = a.len() + n_ub;
        let ncols = nvars + n_slack + nrows;
        let art_start = nvars + n_slack;

        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(nrows);
        let mut rhs = Vec::with_capacity(nrows);
        let mut slack_cursor = nvars;
        for (i, arow) in a.iter().enumerate() {
            let mut row = vec![0.0; ncols];
            let mut bi = b[i];
            for j in 0..nvars {
                row[j] = arow[j] * sign[j];
                bi -= arow[j] * shift[j];
            }
            match senses[i] {
                ConSense::Le => {
                    row[slack_cursor] = 1.0;
                    slack_cursor += 1;
                }
                ConSense::Ge => {
                    row[slack_cursor] = -1.0;
                    slack_cursor += 1;
                }
                ConSense::Eq => {}
            }
            rows.push(row);
            rhs.push(bi);
        }
        for j in 0..nvars {
            if residual_upper[j].is_finite() {
                let mut row = vec![0.0; ncols];
                row[j] = 1.0;
                row[slack_cursor] = 1.0;
                slack_cursor += 1;
                rows.push(row);
                rhs.push(residual_upper[j]);
            }
        }
        debug_assert_eq!(slack_cursor, art_start);

        // Normalize to b >= 0, then give every row its artificial.
        for (i, row) in rows.iter_mut().enumerate() {
            if rhs[i] < 0.0 {
                rhs[i] = -rhs[i];
                for v in row.iter_mut() {
                    *v = -*v;
                }
            }
            row[art_start + i] = 1.0;
        }

        let mut cost = vec![0.0; ncols];
        for j in 0..nvars {
            cost[j] = c[j] * sign[j];
        }
        let recover = (0..nvars).map(|j| (j, shift[j], sign[j])).collect();
        Ok(StdLp {
            rows,
            rhs,
            cost,
            ncols,
            art_start,
            recover,
            nvars,
        })
    }

    fn solve(mut self) -> Result<(f64, Vec<f64>), BruteForceError> {
        let m = self.rows.len();
        let mut basis: Vec<usize> = (0..m).map(|i| self.art_start + i).collect();

        // Phase-1 reduced costs: sum of artificial rows, negated.
        let mut cost1 = vec![0.0; self.ncols];
        for row in &self.rows {
            for (c1, v) in cost1.iter_mut().zip(row) {
                *c1 -= v;
            }
        }
        cost1[self.art_start..].fill(0.0);
        // Phase-2 reduced costs start at the original costs: artificials cost 0
        // and form the basis.
        let mut cost2 = self.cost.clone();

        // Artificials may never re-enter in either phase, so both scans stop
        // at art_start.
        self.run_phase(&mut basis, &mut cost1, &mut cost2, self.art_start)?;
        let infeas: f64 = basis
            .iter()
            .zip(&self.rhs)
            .filter(|(&bv, _)| bv >= self.art_start)
            .map(|(_, &v)| v)
            .sum();
        if infeas > FEAS_TOL {
            return Err(BruteForceError::Infeasible);
        }
        self.evict_artificials(&mut basis, &mut cost1, &mut cost2);

        self.run_phase(&mut basis, &mut cost2, &mut cost1, self.art_start)?;

        let mut z = vec![0.0; self.nvars];
        for (i, &bv) in basis.iter().enumerate() {
            if bv < self.nvars {
                z[bv] = self.rhs[i];
            }
        }
        let mut x = vec![0.0; self.nvars];
        let mut obj = 0.0;
        for &(j, shift, sign) in &self.recover {
            x[j] = shift + sign * z[j];
            // cost[j] holds c_j * sign and sign^2 = 1, so c_j = cost[j] * sign.
            obj += self.cost[j] * sign * x[j];
        }
        Ok((obj, x))
    }

    /// Bland's rule iteration on `active` reduced costs; `shadow` is kept in
    /// sync so the next phase starts consistent. Columns >= `col_limit` never
    /// enter.
    fn run_phase(
        &mut self,
        basis: &mut [usize],
        active: &mut [f64],
        shadow: &mut [f64],
        col_limit: usize,
    ) -> Result<(), BruteForceError> {
        let max_pivots = 50_000 + 200 * (self.ncols + self.rows.len());
        for _ in 0..max_pivots {
            let Some(enter) = (0..col_limit).find(|&j| active[j] < -PIVOT_TOL) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][enter];
                if a > PIVOT_TOL {
                    let ratio = self.rhs[i] / a;
                    let better = match leave {
                        None => true,
                        Some((li, lr)) => {
                            ratio < lr - PIVOT_TOL
                                || (ratio < lr + PIVOT_TOL && basis[i] < basis[li])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((r, _)) = leave else {
                return Err(BruteForceError::Unbounded);
            };
            self.pivot(basis, active, shadow, r, enter);
        }
        Err(BruteForceError::LpStalled)
    }

    fn pivot(
        &mut self,
        basis: &mut [usize],
        active: &mut [f64],
        shadow: &mut [f64],
        r: usize,
        enter: usize,
    ) {
        let piv = self.rows[r][enter];
        for v in self.rows[r].iter_mut() {
            *v /= piv;
        }
        self.rhs[r] /= piv;
        let pivot_row = self.rows[r].clone();
        let pivot_rhs = self.rhs[r];
        for i in 0..self.rows.len() {
            if i == r {
                continue;
            }
            let f = self.rows[i][enter];
            if f != 0.0 {
                for (v, pv) in self.rows[i].iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                self.rows[i][enter] = 0.0;
                self.rhs[i] -= f * pivot_rhs;
                if self.rhs[i] < 0.0 && self.rhs[i] > -PIVOT_TOL {
                    self.rhs[i] = 0.0;
                }
            }
        }
        for costs in [active, shadow] {
            let f = costs[enter];
            if f != 0.0 {
                for (v, pv) in costs.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                costs[enter] = 0.0;
            }
        }
        basis[r] = enter;
    }

    /// Pivots basic artificials out after phase 1; rows that cannot release
    /// one are redundant and get dropped.
    fn evict_artificials(&mut self, basis: &mut Vec<usize>, cost1: &mut [f64], cost2: &mut [f64]) {
        let mut r = 0;
        while r < self.rows.len() {
            if basis[r] >= self.art_start {
                if let Some(enter) =
                    (0..self.art_start).find(|&j| self.rows[r][j].abs() > PIVOT_TOL)
                {
                    self.pivot(basis, cost1, cost2, r, enter);
                } else {
                    self.rows.remove(r);
                    self.rhs.remove(r);
                    basis.remove(r);
                    continue;
                }
            }
            r += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate_family, FamilyParams, KnapsackParams, Split};
    use std::collections::BTreeMap;

    fn tiny_knapsack() -> MilpInstance {
        MilpInstance::knapsack("k3", &[6.0, 10.0, 12.0], &[vec![1.0, 2.0, 3.0]], &[5.0])
    }

    #[test]
    fn enumerates_tiny_knapsack_exactly() {
        let sol = brute_force_solve(&tiny_knapsack()).unwrap();
        assert_eq!(sol.objective, -22.0);
        assert_eq!(sol.solution, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn reports_infeasible_when_no_assignment_fits() {
        let mut inst = MilpInstance::knapsack("inf", &[1.0], &[vec![1.0]], &[5.0]);
        inst.con_sense[0] = ConSense::Ge;
        inst.con_rhs[0] = 2.0;
        assert!(matches!(
            brute_force_solve(&inst),
            Err(BruteForceError::Infeasible)
        ));
    }

    #[test]
    fn unconstrained_binary_min_prefers_zero() {
        let inst = MilpInstance {
            id: "one".into(),
            family: crate::instances::Family::Knapsack,
            objective: vec![1.0],
            con_matrix: vec![],
            con_rhs: vec![],
            con_sense: vec![],
            var_lower: vec![0.0],
            var_upper: vec![1.0],
            is_integer: vec![true],
            theta_seed: 0,
            theta_params: BTreeMap::new(),
        };
        let sol = brute_force_solve(&inst).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert_eq!(sol.solution, vec![0.0]);
    }

    #[test]
    fn too_many_integer_variables_is_rejected() {
        let n = 21;
        let inst = MilpInstance::knapsack(
            "big",
            &vec![1.0; n],
            &[vec![1.0; n]],
            &[3.0],
        );
        assert!(matches!(
            brute_force_solve(&inst),
            Err(BruteForceError::TooLarge { integer_vars: 21, .. })
        ));
    }

    #[test]
    fn lp_relaxation_of_tiny_knapsack_is_fractional_greedy() {
        let (obj, x) = reference_lp_relaxation(&tiny_knapsack()).unwrap();
        assert!((obj - -24.0).abs() < 1e-9);
        assert!((x[0] - 1.0).abs() < 1e-9);
        assert!((x[1] - 1.0).abs() < 1e-9);
        assert!((x[2] - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn lp_detects_unboundedness() {
        let inst = MilpInstance {
            id: "unb".into(),
            family: crate::instances::Family::Knapsack,
            objective: vec![-1.0],
            con_matrix: vec![],
            con_rhs: vec![],
            con_sense: vec![],
            var_lower: vec![0.0],
            var_upper: vec![f64::INFINITY],
            is_integer: vec![false],
            theta_seed: 0,
            theta_params: BTreeMap::new(),
        };
        assert!(matches!(
            reference_lp_relaxation(&inst),
            Err(BruteForceError::Unbounded)
        ));
    }

    #[test]
    fn mixed_integer_facility_instance_solves_through_residual_lp() {
        // Facilities: open costs [3, 10], capacity 2 each; two unit-demand
        // customers, assignment costs 1 from facility 0 and 5 from facility 1.
        // Best plan opens facility 0 only: 3 + 1 + 1 = 5.
        let nf = 2;
        let nc = 2;
        let n = nf + nc * nf;
        let var = |i: usize, j: usize| nf + i * nf + j;
        let mut objective = vec![3.0, 10.0];
        objective.extend(vec![1.0, 5.0, 1.0, 5.0]);
        let mut con_matrix = Vec::new();
        let mut con_rhs = Vec::new();
        let mut con_sense = Vec::new();
        for i in 0..nc {
            let mut row = vec![0.0; n];
            row[var(i, 0)] = 1.0;
            row[var(i, 1)] = 1.0;
            con_matrix.extend(row);
            con_rhs.push(1.0);
            con_sense.push(ConSense::Eq);
        }
        for j in 0..nf {
            let mut row = vec![0.0; n];
            row[j] = -2.0;
            row[var(0, j)] = 1.0;
            row[var(1, j)] = 1.0;
            con_matrix.extend(row);
            con_rhs.push(0.0);
            con_sense.push(ConSense::Le);
        }
        let mut is_integer = vec![false; n];
        is_integer[0] = true;
        is_integer[1] = true;
        let inst = MilpInstance {
            id: "cflp2x2".into(),
            family: crate::instances::Family::CflpSmall,
            objective,
            con_matrix,
            con_rhs,
            con_sense,
            var_lower: vec![0.0; n],
            var_upper: vec![1.0; n],
            is_integer,
            theta_seed: 0,
            theta_params: BTreeMap::new(),
        };
        let sol = brute_force_solve(&inst).unwrap();
        assert!((sol.objective - 5.0).abs() < 1e-9);
        assert_eq!(sol.solution[0], 1.0);
        assert_eq!(sol.solution[1], 0.0);
    }

    #[test]
    fn generated_knapsacks_are_feasible_and_bounded() {
        let params = FamilyParams::Knapsack(KnapsackParams {
            items: 12,
            ..KnapsackParams::default()
        });
        let set = generate_family(&params, 7, 10, Split::Train).unwrap();
        for inst in &set.instances {
            let sol = brute_force_solve(inst).unwrap();
            assert!(sol.objective <= 0.0, "taking nothing is always feasible");
        }
    }
}
