//! Early stopping for branch-and-bound MILP solves.
//!
//! The pieces fit together as a pipeline: [`instances`] generates parametric
//! MILP families, [`bnb_solver`] solves them while recording bound traces on a
//! deterministic tick axis, [`gap_predictor`] learns to estimate the remaining
//! optimality gap from a trace prefix, [`conformal`] calibrates a stopping
//! threshold on held-out traces so that stopping early keeps solutions within
//! a requested tolerance with a guaranteed probability, and [`evaluation`]
//! measures what the calibrated rule actually does on test instances.
//! [`pipeline`] wires the stages to files on disk for the CLI.

#![forbid(unsafe_code)]

pub mod bnb_solver;
pub mod conformal;
pub mod evaluation;
pub mod gap_predictor;
pub mod instances;
pub mod pipeline;
pub mod trace_math;
