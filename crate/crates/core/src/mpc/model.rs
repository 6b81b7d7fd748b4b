use nalgebra::{DMatrix, Matrix1x4, Matrix4, RowVector5, SMatrix, Vector4, Vector5};

use crate::error::{Error, Result};
use crate::vehicle::ContinuousStateSpace;

pub type Matrix5 = SMatrix<f64, 5, 5>;

/// Zero-order-hold discretisation of the lateral model.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStateSpace {
    pub a_d: Matrix4<f64>,
    pub b_d: Vector4<f64>,
    pub c_d: Matrix1x4<f64>,
    pub ts: f64,
}

/// Velocity-form model: state `[Δx; y]`, input `Δu`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedModel {
    pub a_aug: Matrix5,
    pub b_aug: Vector5<f64>,
    pub c_aug: RowVector5<f64>,
}

const TAYLOR_TERMS: usize = 13;

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("expm of {}x{} matrix", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("expm of non-finite matrix".into()));
    }
    let n = m.nrows();
    let norm = (0..n)
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = m / 2f64.powi(squarings);

    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=TAYLOR_TERMS {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    if result.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix exponential overflowed".into()));
    }
    Ok(result)
}

/// Exact ZOH: `exp([[A, B], [0, 0]]·ts)` yields `A_d` and `B_d` together.
pub fn discretize(css: &ContinuousStateSpace, ts: f64) -> Result<DiscreteStateSpace> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::invalid("ts", format!("sample time must be > 0, got {ts}")));
    }
    let mut block = DMatrix::zeros(5, 5);
    block.view_mut((0, 0), (4, 4)).copy_from(&css.a);
    block.view_mut((0, 4), (4, 1)).copy_from(&css.b);
    let e = expm(&(block * ts))?;
    let a_d = Matrix4::from_fn(|i, j| e[(i, j)]);
    let b_d = Vector4::from_fn(|i, _| e[(i, 4)]);
    Ok(DiscreteStateSpace {
        a_d,
        b_d,
        c_d: css.c,
        ts,
    })
}

/// Adds the output integrator: `Ã = [[A, 0], [CA, 1]]`, `B̃ = [B; CB]`, `C̃ = [0 0 0 0 1]`.
pub fn augment(dss: &DiscreteStateSpace) -> AugmentedModel {
    let ca = dss.c_d * dss.a_d;
    let cb = (dss.c_d * dss.b_d)[0];
    let mut a_aug = Matrix5::zeros();
    a_aug.fixed_view_mut::<4, 4>(0, 0).copy_from(&dss.a_d);
    a_aug.fixed_view_mut::<1, 4>(4, 0).copy_from(&ca);
    a_aug[(4, 4)] = 1.0;
    let mut b_aug = Vector5::zeros();
    b_aug.fixed_rows_mut::<4>(0).copy_from(&dss.b_d);
    b_aug[4] = cb;
    AugmentedModel {
        a_aug,
        b_aug,
        c_aug: RowVector5::new(0.0, 0.0, 0.0, 0.0, 1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::{linear_lateral_matrices, VehicleParams};
    use approx::assert_relative_eq;

    fn scalar_system(a: f64, b: f64) -> ContinuousStateSpace {
        let mut am = Matrix4::zeros();
        am[(0, 0)] = a;
        ContinuousStateSpace {
            a: am,
            b: Vector4::new(b, 0.0, 0.0, 0.0),
            c: Matrix1x4::new(0.0, 0.0, 0.0, 1.0),
        }
    }

    #[test]
    fn zero_dynamics_is_integrator() {
        let css = ContinuousStateSpace {
            a: Matrix4::zeros(),
            b: Vector4::new(1.0, 2.0, -3.0, 0.5),
            c: Matrix1x4::new(0.0, 0.0, 0.0, 1.0),
        };
        let d = discretize(&css, 0.05).unwrap();
        assert_eq!(d.a_d, Matrix4::identity());
        assert_relative_eq!(d.b_d, css.b * 0.05, epsilon = 1e-15);
    }

    #[test]
    fn scalar_closed_form() {
        let d = discretize(&scalar_system(-1.0, 1.0), 0.1).unwrap();
        let exact_a = (-0.1f64).exp();
        let exact_b = (exact_a - 1.0) / -1.0;
        assert!((d.a_d[(0, 0)] - exact_a).abs() < 1e-12);
        assert!((d.b_d[0] - exact_b).abs() < 1e-12);
        assert_relative_eq!(d.a_d[(0, 0)], 0.9048374, epsilon = 1e-7);
        assert_relative_eq!(d.b_d[0], 0.0951626, epsilon = 1e-7);
    }

    #[test]
    fn semigroup_property() {
        for vx in [3.0, 15.0, 27.0] {
            let css = linear_lateral_matrices(&VehicleParams::default(), vx).unwrap();
            let d1 = discretize(&css, 0.05).unwrap();
            let d2 = discretize(&css, 0.1).unwrap();
            let diff = (d2.a_d - d1.a_d * d1.a_d).norm();
            assert!(diff < 1e-10, "vx={vx} diff={diff}");
        }
    }

    #[test]
    fn large_norm_exponential() {
        // forces several squarings
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, -3.0, 0.0]);
        let e = expm(&m).unwrap();
        assert_relative_eq!(e[(0, 0)], 3f64.cos(), epsilon = 1e-12);
        assert_relative_eq!(e[(0, 1)], 3f64.sin(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_sample_time() {
        let css = scalar_system(-1.0, 1.0);
        assert!(discretize(&css, 0.0).is_err());
        assert!(discretize(&css, f64::NAN).is_err());
    }

    #[test]
    fn augment_blocks() {
        let dss = DiscreteStateSpace {
            a_d: Matrix4::identity(),
            b_d: Vector4::zeros(),
            c_d: Matrix1x4::new(0.0, 0.0, 0.0, 1.0),
            ts: 0.05,
        };
        let aug = augment(&dss);
        assert_eq!(aug.a_aug.row(4).clone_owned(), RowVector5::new(0.0, 0.0, 0.0, 1.0, 1.0));
        assert_eq!(aug.b_aug, Vector5::zeros());
        assert_eq!(aug.c_aug, RowVector5::new(0.0, 0.0, 0.0, 0.0, 1.0));
        assert_eq!(aug.a_aug.fixed_view::<4, 1>(0, 4).clone_owned(), Vector4::zeros());
    }

    #[test]
    fn integrator_row_holds_output() {
        let css = linear_lateral_matrices(&VehicleParams::default(), 12.0).unwrap();
        let aug = augment(&discretize(&css, 0.05).unwrap());
        let x = Vector5::new(0.0, 0.0, 0.0, 0.0, 2.75);
        assert_eq!((aug.c_aug * aug.a_aug * x)[0], 2.75);
    }
}
