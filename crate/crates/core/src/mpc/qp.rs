use nalgebra::{DMatrix, DVector};

use super::prediction::PredictionMatrices;
use super::{MpcConstraints, MpcParams};
use crate::error::{Error, Result};

/// `min ½ΔUᵀEΔU + ΔUᵀK  s.t.  MΔU ≤ γ`
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub e: DMatrix<f64>,
    pub k: DVector<f64>,
    pub m: DMatrix<f64>,
    pub gamma: DVector<f64>,
}

/// Hessian `ΦᵀQΦ + R` with `Q = q·I`, `R = r·I`; `E` and `K` describe `J/2`.
pub fn hessian(pred: &PredictionMatrices, params: &MpcParams) -> DMatrix<f64> {
    let nc = pred.nc();
    let mut e = pred.phi.tr_mul(&pred.phi) * params.q;
    for i in 0..nc {
        e[(i, i)] += params.r;
    }
    e
}

/// Stacked constraint matrix: `[I; −I; L; −L]` and, with output bounds, `[Φ; −Φ]`.
/// `L` is the lower-triangular ones matrix accumulating moves into amplitudes.
pub fn constraint_matrix(pred: &PredictionMatrices, cons: &MpcConstraints) -> DMatrix<f64> {
    let nc = pred.nc();
    let np = pred.np();
    let rows = 4 * nc + if cons.y_max.is_some() { 2 * np } else { 0 };
    let mut m = DMatrix::zeros(rows, nc);
    for i in 0..nc {
        m[(i, i)] = 1.0;
        m[(nc + i, i)] = -1.0;
        for j in 0..=i {
            m[(2 * nc + i, j)] = 1.0;
            m[(3 * nc + i, j)] = -1.0;
        }
    }
    if cons.y_max.is_some() {
        m.view_mut((4 * nc, 0), (np, nc)).copy_from(&pred.phi);
        m.view_mut((4 * nc + np, 0), (np, nc)).copy_from(&(-&pred.phi));
    }
    m
}

/// Right-hand side matching [`constraint_matrix`].
pub fn constraint_bounds(
    pred: &PredictionMatrices,
    free_response: &DVector<f64>,
    cons: &MpcConstraints,
    u_prev: f64,
) -> DVector<f64> {
    let nc = pred.nc();
    let np = pred.np();
    let rows = 4 * nc + if cons.y_max.is_some() { 2 * np } else { 0 };
    let mut gamma = DVector::zeros(rows);
    for i in 0..nc {
        gamma[i] = cons.du_max;
        gamma[nc + i] = cons.du_max;
        gamma[2 * nc + i] = cons.u_max - u_prev;
        gamma[3 * nc + i] = cons.u_max + u_prev;
    }
    if let Some(y_max) = cons.y_max {
        for i in 0..np {
            gamma[4 * nc + i] = y_max - free_response[i];
            gamma[4 * nc + np + i] = y_max + free_response[i];
        }
    }
    gamma
}

/// Linear term `−ΦᵀQ(R_s − F·x̃)`.
pub fn linear_term(pred: &PredictionMatrices, free_response: &DVector<f64>, r_s: &[f64], q: f64) -> DVector<f64> {
    let err = DVector::from_iterator(pred.np(), r_s.iter().zip(free_response.iter()).map(|(r, f)| r - f));
    -(pred.phi.tr_mul(&err) * q)
}

pub fn assemble_qp(
    pred: &PredictionMatrices,
    x_aug: &DVector<f64>,
    r_s: &[f64],
    params: &MpcParams,
    cons: &MpcConstraints,
    u_prev: f64,
) -> Result<QpProblem> {
    if r_s.len() != pred.np() {
        return Err(Error::Dimension(format!(
            "reference window has {} samples, horizon is {}",
            r_s.len(),
            pred.np()
        )));
    }
    if x_aug.len() != pred.f.ncols() {
        return Err(Error::Dimension(format!("augmented state has {} entries", x_aug.len())));
    }
    let free = &pred.f * x_aug;
    Ok(QpProblem {
        e: hessian(pred, params),
        k: linear_term(pred, &free, r_s, params.q),
        m: constraint_matrix(pred, cons),
        gamma: constraint_bounds(pred, &free, cons, u_prev),
    })
}
