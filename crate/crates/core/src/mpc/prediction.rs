use nalgebra::{DMatrix, RowVector5};

use super::model::AugmentedModel;
use crate::error::{Error, Result};

/// Stacked output prediction `Y = F·x̃ + Φ·ΔU` over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    /// Free response, `np × 5`.
    pub f: DMatrix<f64>,
    /// Forced response, `np × nc`, lower triangular.
    pub phi: DMatrix<f64>,
}

impl PredictionMatrices {
    pub fn np(&self) -> usize {
        self.f.nrows()
    }

    pub fn nc(&self) -> usize {
        self.phi.ncols()
    }
}

pub fn build_prediction(aug: &AugmentedModel, np: usize, nc: usize) -> Result<PredictionMatrices> {
    if nc == 0 || nc > np {
        return Err(Error::invalid("nc", format!("need 1 <= nc <= np, got nc={nc}, np={np}")));
    }
    let mut f = DMatrix::zeros(np, 5);
    // markov[i] = C̃·Ã^i·B̃
    let mut markov = Vec::with_capacity(np);
    let mut c_pow: RowVector5<f64> = aug.c_aug;
    for i in 0..np {
        markov.push((c_pow * aug.b_aug)[0]);
        c_pow *= aug.a_aug;
        f.row_mut(i).copy_from(&c_pow);
    }
    let phi = DMatrix::from_fn(np, nc, |i, j| if i >= j { markov[i - j] } else { 0.0 });
    Ok(PredictionMatrices { f, phi })
}
