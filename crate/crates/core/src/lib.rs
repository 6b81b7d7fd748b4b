//! Velocity-adaptive lateral MPC for path tracking.
//!
//! The crate covers the whole pipeline: a linear single-track model for
//! prediction and a nonlinear magic-formula plant for simulation
//! ([`vehicle`]), a constrained MPC solved with Hildreth's method
//! ([`mpc`]), offline tuning of the horizons and weights with an improved
//! particle swarm ([`pso`]), online adaptation of those knobs with MLP
//! ([`nn`]) or ANFIS ([`anfis`]) regressors, and closed-loop scenarios with
//! tracking metrics ([`scenario`]).

pub mod adapt;
pub mod anfis;
pub mod error;
pub mod mpc;
pub mod nn;
pub mod pso;
pub mod scenario;
pub mod vehicle;

pub use error::{Error, Result};
