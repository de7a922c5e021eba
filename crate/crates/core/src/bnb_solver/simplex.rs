//! Bounded-variable primal simplex on a dense tableau.
//!
//! Every constraint row gets a slack whose bounds encode the row sense, so
//! the working system is always `Ax + Is = b` over box-bounded columns.
//! Phase 1 adds one artificial per initially violated row. Bland's
//! smallest-index rule everywhere keeps pivoting deterministic and cycle-free.

use crate::instances::{ConSense, MilpInstance};
use thiserror::Error;

const RC_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const RATIO_TIE_TOL: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-7;
/// Reduced costs are recomputed from the tableau at this pivot cadence to cap
/// accumulated drift.
const RC_REFRESH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub objective: f64,
    /// Structural variable values only.
    pub x: Vec<f64>,
    pub pivots: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LpFailure {
    #[error("LP relaxation infeasible")]
    Infeasible,
    #[error("LP relaxation unbounded")]
    Unbounded,
    #[error("pivot limit exceeded")]
    PivotLimitExceeded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ColState {
    Basic,
    AtLower,
    AtUpper,
    /// Doubly unbounded column sitting at zero.
    Free,
}

enum StepOutcome {
    Optimal,
    Moved,
}

/// Solves the LP relaxation of `inst` under the given box bounds (node bounds
/// during branch and bound, instance bounds at the root).
pub fn lp_relax(
    inst: &MilpInstance,
    lower: &[f64],
    upper: &[f64],
    pivot_limit: usize,
) -> Result<LpSolution, LpFailure> {
    Simplex::new(inst, lower, upper, pivot_limit).solve()
}

struct Simplex {
    m: usize,
    nvars: usize,
    /// Columns: structural, then one slack per row, then one artificial per
    /// row. `art_start = nvars + m`.
    art_start: usize,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    x: Vec<f64>,
    state: Vec<ColState>,
    basis: Vec<usize>,
    cost: Vec<f64>,
    reduced: Vec<f64>,
    pivot_limit: usize,
    pivots: usize,
}

impl Simplex {
    fn new(inst: &MilpInstance, lb: &[f64], ub: &[f64], pivot_limit: usize) -> Self {
        let nvars = inst.num_vars();
        let m = inst.num_cons();
        let ncols = nvars + 2 * m;
        let art_start = nvars + m;

        let mut lower = vec![0.0; ncols];
        let mut upper = vec![f64::INFINITY; ncols];
        lower[..nvars].copy_from_slice(lb);
        upper[..nvars].copy_from_slice(ub);
        for i in 0..m {
            let (sl, su) = match inst.con_sense[i] {
                ConSense::Le => (0.0, f64::INFINITY),
                ConSense::Ge => (f64::NEG_INFINITY, 0.0),
                ConSense::Eq => (0.0, 0.0),
            };
            lower[nvars + i] = sl;
            upper[nvars + i] = su;
        }

        let mut rows = Vec::with_capacity(m);
        for i in 0..m {
            let mut row = vec![0.0; ncols];
            row[..nvars].copy_from_slice(inst.row(i));
            row[nvars + i] = 1.0;
            rows.push(row);
        }

        let mut cost = vec![0.0; ncols];
        cost[..nvars].copy_from_slice(&inst.objective);

        Simplex {
            m,
            nvars,
            art_start,
            rows,
            rhs: inst.con_rhs.clone(),
            lower,
            upper,
            x: vec![0.0; ncols],
            state: vec![ColState::AtLower; ncols],
            basis: vec![0; m],
            cost,
            reduced: vec![0.0; ncols],
            pivot_limit,
            pivots: 0,
        }
    }

    fn solve(mut self) -> Result<LpSolution, LpFailure> {
        if self.lower[..self.nvars]
            .iter()
            .zip(&self.upper[..self.nvars])
            .any(|(l, u)| l > u)
        {
            return Err(LpFailure::Infeasible);
        }

        let need_phase1 = self.install_basis();
        if need_phase1 {
            let mut art_cost = vec![0.0; self.art_start + self.m];
            art_cost[self.art_start..].fill(1.0);
            // A sum of nonnegative artificials cannot be unbounded below; that
            // branch only fires on numerical breakdown.
            match self.run(&art_cost) {
                Ok(()) => {}
                Err(LpFailure::Unbounded) => return Err(LpFailure::PivotLimitExceeded),
                Err(e) => return Err(e),
            }
            let infeas: f64 = self.x[self.art_start..].iter().map(|v| v.abs()).sum();
            if infeas > FEAS_TOL {
                return Err(LpFailure::Infeasible);
            }
            // Pin artificials at zero for phase 2. Ones still basic sit at
            // zero and leave through degenerate pivots if ever disturbed.
            for j in self.art_start..self.art_start + self.m {
                self.upper[j] = 0.0;
                self.x[j] = 0.0;
            }
        }

        let cost = self.cost.clone();
        self.run(&cost)?;

        let objective = (0..self.nvars).map(|j| self.cost[j] * self.x[j]).sum();
        Ok(LpSolution {
            objective,
            x: self.x[..self.nvars].to_vec(),
            pivots: self.pivots,
        })
    }

    /// Puts slacks (or artificials where the slack bounds cannot absorb the
    /// residual) into the basis. Returns whether phase 1 is required.
    fn install_basis(&mut self) -> bool {
        // Nonbasic start: structural columns at the finite bound nearest zero.
        for j in 0..self.nvars {
            let (l, u) = (self.lower[j], self.upper[j]);
            if l.is_finite() && (!u.is_finite() || l.abs() <= u.abs()) {
                self.state[j] = ColState::AtLower;
                self.x[j] = l;
            } else if u.is_finite() {
                self.state[j] = ColState::AtUpper;
                self.x[j] = u;
            } else {
                self.state[j] = ColState::Free;
                self.x[j] = 0.0;
            }
        }

        let mut need_phase1 = false;
        for i in 0..self.m {
            let slack = self.nvars + i;
            let art = self.art_start + i;
            let act: f64 = (0..self.nvars).map(|j| self.rows[i][j] * self.x[j]).sum();
            let resid = self.rhs[i] - act;
            let (sl, su) = (self.lower[slack], self.upper[slack]);
            if resid >= sl - FEAS_TOL && resid <= su + FEAS_TOL {
                self.basis[i] = slack;
                self.state[slack] = ColState::Basic;
                self.x[slack] = resid.clamp(sl, su.min(f64::MAX));
                self.x[art] = 0.0;
                self.state[art] = ColState::AtLower;
            } else {
                let clamped = resid.clamp(sl, su);
                self.x[slack] = clamped;
                self.state[slack] = if resid < sl {
                    ColState::AtLower
                } else {
                    ColState::AtUpper
                };
                let leftover = resid - clamped;
                // Orient the artificial column so its basic value is positive.
                self.rows[i][art] = leftover.signum();
                self.x[art] = leftover.abs();
                self.basis[i] = art;
                self.state[art] = ColState::Basic;
                need_phase1 = true;
            }
        }
        need_phase1
    }

    fn refresh_reduced(&mut self, cost: &[f64]) {
        self.reduced.copy_from_slice(cost);
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for (d, a) in self.reduced.iter_mut().zip(&self.rows[i]) {
                    *d -= cb * a;
                }
            }
        }
        for i in 0..self.m {
            self.reduced[self.basis[i]] = 0.0;
        }
    }

    fn run(&mut self, cost: &[f64]) -> Result<(), LpFailure> {
        self.refresh_reduced(cost);
        let mut since_refresh = 0usize;
        loop {
            if self.pivots >= self.pivot_limit {
                return Err(LpFailure::PivotLimitExceeded);
            }
            if since_refresh >= RC_REFRESH {
                self.refresh_reduced(cost);
                since_refresh = 0;
            }
            match self.step()? {
                StepOutcome::Optimal => return Ok(()),
                StepOutcome::Moved => since_refresh += 1,
            }
        }
    }

    fn step(&mut self) -> Result<StepOutcome, LpFailure> {
        // Entering: smallest improvable index (Bland). Artificials never
        // re-enter; fixed columns never move.
        let mut entering = None;
        for j in 0..self.art_start {
            if self.lower[j] == self.upper[j] {
                continue;
            }
            let d = self.reduced[j];
            let dir = match self.state[j] {
                ColState::Basic => continue,
                ColState::AtLower => {
                    if d < -RC_TOL {
                        1.0
                    } else {
                        continue;
                    }
                }
                ColState::AtUpper => {
                    if d > RC_TOL {
                        -1.0
                    } else {
                        continue;
                    }
                }
                ColState::Free => {
                    if d < -RC_TOL {
                        1.0
                    } else if d > RC_TOL {
                        -1.0
                    } else {
                        continue;
                    }
                }
            };
            entering = Some((j, dir));
            break;
        }
        let Some((enter, t)) = entering else {
            return Ok(StepOutcome::Optimal);
        };

        let flip_limit = self.upper[enter] - self.lower[enter];

        // Ratio test: first basic column driven to one of its bounds blocks
        // the move. Ties resolve to the smallest basic index (Bland).
        let mut block: Option<(usize, f64, ColState)> = None;
        for i in 0..self.m {
            let rate = -t * self.rows[i][enter];
            if rate.abs() <= PIVOT_TOL {
                continue;
            }
            let bi = self.basis[i];
            let (room, hit) = if rate > 0.0 {
                (self.upper[bi] - self.x[bi], ColState::AtUpper)
            } else {
                (self.x[bi] - self.lower[bi], ColState::AtLower)
            };
            if !room.is_finite() {
                continue;
            }
            let delta = room.max(0.0) / rate.abs();
            let take = match &block {
                None => true,
                Some((brow, bdelta, _)) => {
                    delta < bdelta - RATIO_TIE_TOL
                        || (delta < bdelta + RATIO_TIE_TOL && bi < self.basis[*brow])
                }
            };
            if take {
                block = Some((i, delta, hit));
            }
        }

        let blocked_delta = block.as_ref().map(|(_, d, _)| *d);
        let step_len = match blocked_delta {
            Some(d) => flip_limit.min(d),
            None => flip_limit,
        };
        if !step_len.is_finite() {
            return Err(LpFailure::Unbounded);
        }

        // Move entering and basics along the direction using the pre-pivot
        // column.
        let col: Vec<f64> = (0..self.m).map(|i| self.rows[i][enter]).collect();
        self.x[enter] += t * step_len;
        for (&c, &bi) in col.iter().zip(&self.basis) {
            if c != 0.0 {
                self.x[bi] -= t * c * step_len;
            }
        }
        self.pivots += 1;

        let do_flip = match blocked_delta {
            None => true,
            Some(d) => flip_limit <= d,
        };
        if do_flip {
            self.state[enter] = if t > 0.0 {
                ColState::AtUpper
            } else {
                ColState::AtLower
            };
            self.x[enter] = if t > 0.0 {
                self.upper[enter]
            } else {
                self.lower[enter]
            };
            return Ok(StepOutcome::Moved);
        }

        let (r, _, hit) = block.expect("pivot without blocking row");
        let leave = self.basis[r];
        self.x[leave] = match hit {
            ColState::AtUpper => self.upper[leave],
            _ => self.lower[leave],
        };
        self.state[leave] = hit;

        let piv = self.rows[r][enter];
        let inv = 1.0 / piv;
        for v in self.rows[r].iter_mut() {
            *v *= inv;
        }
        self.rows[r][enter] = 1.0;
        let pivot_row = self.rows[r].clone();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.rows[i][enter];
            if f != 0.0 {
                for (v, pv) in self.rows[i].iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                self.rows[i][enter] = 0.0;
            }
        }
        let f = self.reduced[enter];
        if f != 0.0 {
            for (d, pv) in self.reduced.iter_mut().zip(&pivot_row) {
                *d -= f * pv;
            }
        }
        self.reduced[enter] = 0.0;

        self.basis[r] = enter;
        self.state[enter] = ColState::Basic;
        Ok(StepOutcome::Moved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::MilpInstance;

    fn knapsack3() -> MilpInstance {
        MilpInstance::knapsack("k3", &[6.0, 10.0, 12.0], &[vec![1.0, 2.0, 3.0]], &[5.0])
    }

    #[test]
    fn relaxed_knapsack_takes_fractional_greedy_solution() {
        let inst = knapsack3();
        let sol = lp_relax(&inst, &inst.var_lower, &inst.var_upper, 1000).unwrap();
        assert!((sol.objective - -24.0).abs() < 1e-9);
        assert!((sol.x[0] - 1.0).abs() < 1e-9);
        assert!((sol.x[1] - 1.0).abs() < 1e-9);
        assert!((sol.x[2] - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn fully_fixed_bounds_return_that_point() {
        let inst = knapsack3();
        let fixed = [0.0, 1.0, 1.0];
        let sol = lp_relax(&inst, &fixed, &fixed, 1000).unwrap();
        assert!((sol.objective - -22.0).abs() < 1e-12);
        assert_eq!(sol.x, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn contradictory_row_is_infeasible() {
        // x1 >= 2 with x1 in [0, 1].
        let mut inst = MilpInstance::knapsack("inf", &[1.0], &[vec![1.0]], &[2.0]);
        inst.con_sense[0] = ConSense::Ge;
        let got = lp_relax(&inst, &inst.var_lower, &inst.var_upper, 1000);
        assert_eq!(got.unwrap_err(), LpFailure::Infeasible);
    }

    #[test]
    fn open_ray_is_unbounded() {
        let mut inst = MilpInstance::knapsack("unb", &[1.0], &[vec![0.0]], &[1.0]);
        inst.objective[0] = -1.0;
        inst.var_upper[0] = f64::INFINITY;
        inst.is_integer[0] = false;
        let got = lp_relax(&inst, &inst.var_lower, &inst.var_upper, 1000);
        assert_eq!(got.unwrap_err(), LpFailure::Unbounded);
    }

    #[test]
    fn equality_and_ge_rows_are_honored() {
        // min x1 + 4 x2  s.t.  x1 + x2 = 1, x1 - x2 >= -0.5, x in [0, 1]^2.
        // Optimum pushes x2 down to the GE boundary: x = (0.25, 0.75)?  No:
        // cost favors x1, so x2 shrinks until x1 - x2 = -0.5 binds the other
        // way only if x1 small. Check: x = (1, 0) satisfies both rows and
        // costs 1, which is minimal since any x2 > 0 costs extra 3 x2.
        let inst = MilpInstance {
            id: "eqge".into(),
            family: crate::instances::Family::Knapsack,
            objective: vec![1.0, 4.0],
            con_matrix: vec![1.0, 1.0, 1.0, -1.0],
            con_rhs: vec![1.0, -0.5],
            con_sense: vec![ConSense::Eq, ConSense::Ge],
            var_lower: vec![0.0, 0.0],
            var_upper: vec![1.0, 1.0],
            is_integer: vec![false, false],
            theta_seed: 0,
            theta_params: Default::default(),
        };
        let sol = lp_relax(&inst, &inst.var_lower, &inst.var_upper, 1000).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-9, "objective {}", sol.objective);
        assert!((sol.x[0] - 1.0).abs() < 1e-9);
        assert!(sol.x[1].abs() < 1e-9);
    }

    #[test]
    fn pivot_limit_is_reported() {
        let inst = knapsack3();
        let got = lp_relax(&inst, &inst.var_lower, &inst.var_upper, 0);
        assert_eq!(got.unwrap_err(), LpFailure::PivotLimitExceeded);
    }

    #[test]
    fn agrees_with_reference_simplex_on_random_boxes() {
        use crate::instances::{
            generate_family, reference_lp_relaxation, CflpParams, FamilyParams, KnapsackParams,
            SetCoverParams, Split,
        };
        let families = [
            FamilyParams::Knapsack(KnapsackParams::default()),
            FamilyParams::SetCover(SetCoverParams::default()),
            FamilyParams::CflpSmall(CflpParams::default()),
        ];
        for params in families {
            let set = generate_family(&params, 99, 8, Split::Train).unwrap();
            for inst in &set.instances {
                let ours = lp_relax(inst, &inst.var_lower, &inst.var_upper, 50_000).unwrap();
                let (ref_obj, _) = reference_lp_relaxation(inst).unwrap();
                assert!(
                    (ours.objective - ref_obj).abs() <= 1e-7 * (1.0 + ref_obj.abs()),
                    "{}: bounded-variable {} vs reference {}",
                    inst.id,
                    ours.objective,
                    ref_obj
                );
            }
        }
    }
}
