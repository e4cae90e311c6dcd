//! Fixtures shared by unit tests across modules: the three-state shift
//! register with its two knowledge filters.

use nalgebra::{DMatrix, DVector};

use crate::gaussian::Gaussian;
use crate::model::{attach_observation, LinearStochasticSystem, ObservedSystem};

pub fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(v))
}

/// `A` = down-shift, `B = e3`, `H = [0 0 1]`, `Qw = diag(1, 1, 0.05)`,
/// `x(0) ~ N(0, sigma0)`.
pub fn shift_system(sigma0: DMatrix<f64>) -> LinearStochasticSystem {
    let a = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let b = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
    let h = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]);
    let qw = diag(&[1.0, 1.0, 0.05]);
    let init = Gaussian::new(DVector::zeros(3), sigma0).unwrap();
    LinearStochasticSystem::new(a, b, h, qw, init).unwrap()
}

/// The two-row filter exposing the second and third state.
pub fn observed_two_row(sigma0: DMatrix<f64>) -> ObservedSystem {
    let c = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let n = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
    attach_observation(shift_system(sigma0), c, n).unwrap()
}

/// The scalar filter exposing only the output state.
pub fn observed_scalar(sigma0: DMatrix<f64>) -> ObservedSystem {
    let c = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]);
    let n = DMatrix::identity(1, 1);
    attach_observation(shift_system(sigma0), c, n).unwrap()
}
