//! Constrained linear MPC with a velocity-scheduled prediction model.

pub mod controller;
pub mod hildreth;
pub mod model;
pub mod prediction;
pub mod qp;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};

pub use controller::{MpcController, MpcOutput, DEFAULT_REBUILD_THRESHOLD};
pub use hildreth::{hildreth_solve, ActiveSetReport, HildrethSettings, HildrethSolver, QpSolution};
pub use model::{augment, discretize, expm, AugmentedModel, DiscreteStateSpace};
pub use prediction::{build_prediction, PredictionMatrices};
pub use qp::{assemble_qp, QpProblem};

/// Controller sample time (s).
pub const DEFAULT_TS: f64 = 0.05;

/// The four tunable knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcParams {
    pub np: usize,
    pub nc: usize,
    pub q: f64,
    pub r: f64,
}

impl Default for MpcParams {
    fn default() -> Self {
        Self {
            np: 35,
            nc: 8,
            q: 10.0,
            r: 0.01,
        }
    }
}

impl MpcParams {
    pub fn validate(&self) -> Result<()> {
        if self.nc < 1 || self.nc > self.np {
            return Err(Error::invalid(
                "mpc.nc",
                format!("need 1 <= nc <= np, got nc={} np={}", self.nc, self.np),
            ));
        }
        ensure_positive("mpc.q", self.q)?;
        ensure_positive("mpc.r", self.r)?;
        Ok(())
    }
}

/// Symmetric bounds on input rate, input amplitude and (optionally) output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConstraints {
    /// Steering change per sample (rad).
    pub du_max: f64,
    /// Steering amplitude (rad).
    pub u_max: f64,
    /// Lateral position bound (m); disabled when `None`.
    #[serde(default)]
    pub y_max: Option<f64>,
}

impl Default for MpcConstraints {
    fn default() -> Self {
        Self {
            du_max: PI / 12.0,
            u_max: PI / 6.0,
            y_max: None,
        }
    }
}

impl MpcConstraints {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("mpc.du_max", self.du_max)?;
        ensure_positive("mpc.u_max", self.u_max)?;
        if let Some(y) = self.y_max {
            ensure_positive("mpc.y_max", y)?;
        }
        Ok(())
    }
}
