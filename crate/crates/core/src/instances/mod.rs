//! Parametric MILP instance families and the exact enumeration oracle.
//!
//! All instances are minimization problems over dense rows. Integer data is
//! used everywhere so small problems round-trip through f64 exactly.

mod brute;
mod gen;

pub use brute::{brute_force_solve, reference_lp_relaxation, BruteForceError, BruteForceSolution};
pub use gen::{
    generate_family, instance_seed, CflpParams, FamilyParams, KnapsackParams, SetCoverParams,
};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Knapsack,
    SetCover,
    CflpSmall,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Family::Knapsack => "knapsack",
            Family::SetCover => "set_cover",
            Family::CflpSmall => "cflp_small",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Family {
    type Err = InstanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "knapsack" => Ok(Family::Knapsack),
            "set_cover" => Ok(Family::SetCover),
            "cflp_small" => Ok(Family::CflpSmall),
            other => Err(InstanceError::UnknownFamily(other.to_string())),
        }
    }
}

/// Constraint sense for one dense row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConSense {
    Le,
    Ge,
    Eq,
}

/// Which stage of the pipeline an instance belongs to. The three splits draw
/// from disjoint seed streams, so enlarging one never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Split::Train => "train",
            Split::Calibration => "calibration",
            Split::Test => "test",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("unknown family: {0}")]
    UnknownFamily(String),
    #[error("parameter {name} = {value} outside allowed range {range}")]
    ParamOutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("instance {id} is malformed: {reason}")]
    Malformed { id: String, reason: String },
}

/// One minimization MILP: minimize `objective . x` subject to dense rows
/// `con_matrix[i] . x  (sense_i)  con_rhs[i]` and box bounds on `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilpInstance {
    pub id: String,
    pub family: Family,
    pub objective: Vec<f64>,
    /// Row-major, `num_cons * num_vars` entries.
    pub con_matrix: Vec<f64>,
    pub con_rhs: Vec<f64>,
    pub con_sense: Vec<ConSense>,
    pub var_lower: Vec<f64>,
    pub var_upper: Vec<f64>,
    pub is_integer: Vec<bool>,
    /// Seed the generator drew this instance from.
    pub theta_seed: u64,
    /// Scalar summary of the draw, used as predictor features.
    pub theta_params: BTreeMap<String, f64>,
}

impl MilpInstance {
    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_cons(&self) -> usize {
        self.con_rhs.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.num_vars();
        &self.con_matrix[i * n..(i + 1) * n]
    }

    pub fn num_integer_vars(&self) -> usize {
        self.is_integer.iter().filter(|b| **b).count()
    }

    /// Multi-constraint 0/1 knapsack encoded as minimization: maximizing
    /// `values . x` becomes minimizing `-values . x`.
    pub fn knapsack(
        id: impl Into<String>,
        values: &[f64],
        weight_rows: &[Vec<f64>],
        capacities: &[f64],
    ) -> Self {
        assert_eq!(weight_rows.len(), capacities.len());
        let n = values.len();
        let mut con_matrix = Vec::with_capacity(weight_rows.len() * n);
        for row in weight_rows {
            assert_eq!(row.len(), n);
            con_matrix.extend_from_slice(row);
        }
        MilpInstance {
            id: id.into(),
            family: Family::Knapsack,
            objective: values.iter().map(|v| -v).collect(),
            con_matrix,
            con_rhs: capacities.to_vec(),
            con_sense: vec![ConSense::Le; capacities.len()],
            var_lower: vec![0.0; n],
            var_upper: vec![1.0; n],
            is_integer: vec![true; n],
            theta_seed: 0,
            theta_params: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), InstanceError> {
        let n = self.num_vars();
        let m = self.num_cons();
        let fail = |reason: String| {
            Err(InstanceError::Malformed {
                id: self.id.clone(),
                reason,
            })
        };
        if n == 0 {
            return fail("no variables".into());
        }
        if self.con_matrix.len() != n * m {
            return fail(format!(
                "matrix has {} entries, expected {}",
                self.con_matrix.len(),
                n * m
            ));
        }
        if self.con_sense.len() != m {
            return fail("sense/rhs length mismatch".into());
        }
        if self.var_lower.len() != n || self.var_upper.len() != n || self.is_integer.len() != n {
            return fail("bound/integrality length mismatch".into());
        }
        for j in 0..n {
            let (l, u) = (self.var_lower[j], self.var_upper[j]);
            if l > u {
                return fail(format!("variable {j} has empty bound interval [{l}, {u}]"));
            }
            if l.is_nan() || u.is_nan() {
                return fail(format!("variable {j} has NaN bound"));
            }
            if self.is_integer[j] && !(l.is_finite() && u.is_finite()) {
                return fail(format!("integer variable {j} needs finite bounds"));
            }
        }
        if self
            .objective
            .iter()
            .chain(&self.con_matrix)
            .chain(&self.con_rhs)
            .any(|v| !v.is_finite())
        {
            return fail("non-finite coefficient".into());
        }
        Ok(())
    }
}

/// A generated batch together with the seed that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceSet {
    pub split: Split,
    pub master_seed: u64,
    pub instances: Vec<MilpInstance>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knapsack_encoding_matches_hand_expansion() {
        let inst = MilpInstance::knapsack(
            "k3",
            &[6.0, 10.0, 12.0],
            &[vec![1.0, 2.0, 3.0]],
            &[5.0],
        );
        assert_eq!(inst.objective, vec![-6.0, -10.0, -12.0]);
        assert_eq!(inst.con_matrix, vec![1.0, 2.0, 3.0]);
        assert_eq!(inst.con_rhs, vec![5.0]);
        assert_eq!(inst.con_sense, vec![ConSense::Le]);
        assert_eq!(inst.var_lower, vec![0.0; 3]);
        assert_eq!(inst.var_upper, vec![1.0; 3]);
        assert!(inst.is_integer.iter().all(|&b| b));
        inst.validate().unwrap();
    }

    #[test]
    fn validate_rejects_empty_bound_interval() {
        let mut inst = MilpInstance::knapsack("bad", &[1.0], &[vec![1.0]], &[1.0]);
        inst.var_lower[0] = 2.0;
        assert!(matches!(
            inst.validate(),
            Err(InstanceError::Malformed { .. })
        ));
    }
}
