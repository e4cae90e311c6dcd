//! Discrete algebraic Riccati equation and the time-invariant abstractions.
//!
//! The filter-form DARE is
//!
//! ```text
//! X = A X A^T - A X C^T [C X C^T]^{-1} C X A^T + Qw
//! ```
//!
//! A PD solution `X` is stabilizing when `A - F C` is stable for
//! `F = A X C^T (C X C^T)^{-1}`. With `Sigma0 = X` the a priori state
//! variance is constant and the abstract model is time-invariant. When
//! instead `Sigma0 - X` is strictly PD, an auxiliary measurement
//! `ytilde = x(0) + wtilde`, `wtilde ~ N(0, R)` with
//! `R = (X^{-1} - Sigma0^{-1})^{-1}` forces `P(1|0) = X` and yields the
//! time-invariant model that differs only in its initial law.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::gaussian::{Gaussian, GaussianError, CONDITION_CAP};
use crate::kalman::{AbstractModel, Flavor, MatrixSchedule};
use crate::linalg;
use crate::model::{ObservedSystem, PD_MARGIN};

/// Relative convergence tolerance of the fixed-point iteration.
const FIXED_POINT_TOL: f64 = 1e-12;
/// Iteration cap.
const MAX_ITERATIONS: usize = 10_000;
/// Margin on the stabilizing spectral-radius check.
const STABILITY_MARGIN: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DareError {
    #[error("C Qw C^T is not strictly positive definite (min eigenvalue {min_eig:.3e})")]
    NoisePremiseViolated { min_eig: f64 },
    #[error("fixed-point iteration exceeded {cap} iterations (last step delta {delta:.3e})")]
    NoConvergence { cap: usize, delta: f64 },
    #[error("solution is not stabilizing: spectral radius of A - F C is {rho}")]
    NotStabilizing { rho: f64 },
    #[error("Lemma premise violated: Sigma0 differs from X by {deviation:.3e} (tolerance {tolerance:.3e})")]
    PremiseViolated { deviation: f64, tolerance: f64 },
    #[error("Assumption 2 violated: min eig(Sigma0 - X) = {min_eig:.3e}")]
    Assumption2Violated { min_eig: f64 },
    #[error("X^-1 - Sigma0^-1 is not invertible within the conditioning cap (condition number of Sigma0 - X is {cond:.3e})")]
    SingularR { cond: f64 },
    #[error("innovation covariance C X C^T is ill-conditioned (condition number {cond:.3e})")]
    IllConditionedInnovation { cond: f64 },
    #[error("auxiliary measurement failed the Woodbury-chain validation (max residual {residual:.3e})")]
    WoodburyValidationFailed { residual: f64 },
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// A stabilizing DARE solution with its derived constants.
#[derive(Debug, Clone)]
pub struct DareSolution {
    pub x: DMatrix<f64>,
    /// `F = A X C^T (C X C^T)^{-1}`.
    pub f: DMatrix<f64>,
    /// `K = X C^T [C X C^T]^{-1}`.
    pub k: DMatrix<f64>,
    /// `P = X - K C X`.
    pub p: DMatrix<f64>,
    /// `Sigma_v = C X C^T`.
    pub sigma_v: DMatrix<f64>,
    /// Max-norm residual of the DARE at `x`.
    pub residual: f64,
    /// Spectral radius of `A - F C`.
    pub spectral_radius: f64,
}

fn riccati_map(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    qw: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>, DareError> {
    let s = linalg::symmetrize(&(c * x * c.transpose()));
    let cond = linalg::symmetric_condition_number(&s);
    if !(cond <= CONDITION_CAP) {
        return Err(DareError::IllConditionedInnovation { cond });
    }
    let axct = a * x * c.transpose();
    let correction = linalg::right_divide_spd(&axct, &s)
        .ok_or(DareError::IllConditionedInnovation { cond })? * axct.transpose();
    Ok(linalg::symmetrize(&(a * x * a.transpose() - correction + qw)))
}

/// Solves the DARE by fixed-point iteration of the Riccati map from
/// `X0 = Qw`, then validates the residual and the stabilizing property.
pub fn solve_dare(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    qw: &DMatrix<f64>,
) -> Result<DareSolution, DareError> {
    let c_qw_ct = c * qw * c.transpose();
    let min_eig = linalg::min_eigenvalue(&c_qw_ct);
    if !linalg::is_strictly_pd(&c_qw_ct, PD_MARGIN) {
        return Err(DareError::NoisePremiseViolated { min_eig });
    }

    let mut x = linalg::symmetrize(qw);
    let mut delta = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        let next = riccati_map(a, c, qw, &x)?;
        delta = linalg::max_abs(&(&next - &x));
        x = next;
        if delta <= FIXED_POINT_TOL * (1.0 + linalg::max_abs(&x)) {
            return finish_solution(a, c, qw, x);
        }
    }
    Err(DareError::NoConvergence { cap: MAX_ITERATIONS, delta })
}

fn finish_solution(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    qw: &DMatrix<f64>,
    x: DMatrix<f64>,
) -> Result<DareSolution, DareError> {
    let sigma_v = linalg::symmetrize(&(c * &x * c.transpose()));
    let cond = linalg::symmetric_condition_number(&sigma_v);
    let k = linalg::right_divide_spd(&(&x * c.transpose()), &sigma_v)
        .ok_or(DareError::IllConditionedInnovation { cond })?;
    let f = a * &k;
    let p = linalg::symmetrize(&(&x - &k * c * &x));
    let residual = linalg::max_abs(&(&x - riccati_map(a, c, qw, &x)?));
    let rho = linalg::spectral_radius(&(a - &f * c));
    if rho >= 1.0 - STABILITY_MARGIN {
        return Err(DareError::NotStabilizing { rho });
    }
    Ok(DareSolution { x, f, k, p, sigma_v, residual, spectral_radius: rho })
}

/// The auxiliary initial measurement `ytilde = x(0) + wtilde`,
/// `wtilde ~ N(0, R)`, with the conditioning gain `L = Sigma0 [Sigma0 + R]^{-1}`.
#[derive(Debug, Clone)]
pub struct AuxiliaryMeasurement {
    pub r: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

/// Scaled residuals of the five equivalent identities relating `R`,
/// `Sigma0` and `X` (the Woodbury chain). All should vanish for a valid
/// auxiliary measurement.
pub fn woodbury_chain_residuals(
    sigma0: &DMatrix<f64>,
    x: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Vec<f64> {
    let n = sigma0.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let scale = 1.0 + linalg::max_abs(sigma0);
    let x_inv = linalg::spd_solve(x, &eye).expect("X is PD");
    let s_inv = linalg::spd_solve(sigma0, &eye).expect("Sigma0 is PD");

    // 1) R (X^-1 - Sigma0^-1) = I
    let r1 = linalg::max_abs(&(r * (&x_inv - &s_inv) - &eye));
    // 2) R = (Sigma0^-1 - Sigma0^-1 X Sigma0^-1)^-1 - Sigma0
    let m = &s_inv - &s_inv * x * &s_inv;
    let m_inv = linalg::spd_solve(&m, &eye).expect("chain matrix is PD");
    let r2 = linalg::max_abs(&(r - (&m_inv - sigma0)));
    // 3) (R + Sigma0)^-1 = Sigma0^-1 - Sigma0^-1 X Sigma0^-1
    let rs_inv = linalg::spd_solve(&(r + sigma0), &eye).expect("R + Sigma0 is PD");
    let r3 = linalg::max_abs(&(&rs_inv - &m));
    // 4) Sigma0 (R + Sigma0)^-1 Sigma0 = Sigma0 - X
    let mid = sigma0 * &rs_inv * sigma0;
    let r4 = linalg::max_abs(&(&mid - (sigma0 - x)));
    // 5) X = Sigma0 - Sigma0 (R + Sigma0)^-1 Sigma0
    let r5 = linalg::max_abs(&((sigma0 - &mid) - x));

    vec![r1 / scale, r2 / scale, r3 / scale, r4 / scale, r5 / scale]
}

/// Builds the time-invariant abstract model under the premise
/// `Sigma0 = X` (a stabilizing solution).
pub fn build_invariant(
    obs: &ObservedSystem,
    sol: &DareSolution,
) -> Result<AbstractModel, DareError> {
    let sigma0 = obs.system.init.covariance();
    let deviation = linalg::max_abs(&(sigma0 - &sol.x));
    let tolerance = 1e-9 * (1.0 + linalg::max_abs(&sol.x));
    if deviation > tolerance {
        return Err(DareError::PremiseViolated { deviation, tolerance });
    }
    if !linalg::is_strictly_pd(&sol.sigma_v, PD_MARGIN) {
        let cond = linalg::symmetric_condition_number(&sol.sigma_v);
        return Err(DareError::IllConditionedInnovation { cond });
    }
    let init_cov = linalg::symmetrize(&(&sol.x - &sol.p));
    let init = Gaussian::new(obs.system.init.mean().clone(), init_cov)?;
    Ok(AbstractModel {
        a: obs.system.a.clone(),
        b: obs.system.b.clone(),
        h: obs.system.h.clone(),
        gains: MatrixSchedule::Constant(sol.k.clone()),
        innovation_covs: MatrixSchedule::Constant(sol.sigma_v.clone()),
        init,
        flavor: Flavor::TimeInvariant,
    })
}

/// Builds the time-invariant abstract model under Assumption 2
/// (`Sigma0 - X` strictly PD), together with the auxiliary measurement
/// that realizes it.
pub fn build_invariant_star(
    obs: &ObservedSystem,
    sol: &DareSolution,
) -> Result<(AbstractModel, AuxiliaryMeasurement), DareError> {
    let sigma0 = obs.system.init.covariance();
    let gap = linalg::symmetrize(&(sigma0 - &sol.x));
    let min_eig = linalg::min_eigenvalue(&gap);
    if !linalg::is_strictly_pd(&gap, PD_MARGIN) {
        return Err(DareError::Assumption2Violated { min_eig });
    }
    if !linalg::is_strictly_pd(&sol.sigma_v, PD_MARGIN) {
        let cond = linalg::symmetric_condition_number(&sol.sigma_v);
        return Err(DareError::IllConditionedInnovation { cond });
    }
    let cond_gap = linalg::symmetric_condition_number(&gap);
    if !(cond_gap <= CONDITION_CAP) {
        return Err(DareError::SingularR { cond: cond_gap });
    }

    // R = (X^-1 - Sigma0^-1)^-1 = Sigma0 (Sigma0 - X)^-1 X, via one PD solve.
    let r = linalg::symmetrize(
        &(sigma0
            * linalg::spd_solve(&gap, &sol.x).ok_or(DareError::SingularR { cond: cond_gap })?),
    );
    let l = linalg::right_divide_spd(sigma0, &(&r + sigma0))
        .ok_or(DareError::SingularR { cond: cond_gap })?;
    let aux = AuxiliaryMeasurement { r, l };

    let worst = woodbury_chain_residuals(sigma0, &sol.x, &aux.r)
        .into_iter()
        .fold(0.0f64, f64::max);
    if worst > 1e-9 {
        return Err(DareError::WoodburyValidationFailed { residual: worst });
    }

    let init_cov = linalg::symmetrize(&(sigma0 - &sol.p));
    let init = Gaussian::new(obs.system.init.mean().clone(), init_cov)?;
    let model = AbstractModel {
        a: obs.system.a.clone(),
        b: obs.system.b.clone(),
        h: obs.system.h.clone(),
        gains: MatrixSchedule::Constant(sol.k.clone()),
        innovation_covs: MatrixSchedule::Constant(sol.sigma_v.clone()),
        init,
        flavor: Flavor::TimeInvariantStar,
    };
    Ok((model, aux))
}

/// The embedded initial state after the auxiliary measurement:
/// `mubar0 = mu0 + L (x(0) + wtilde - mu0)`, then
/// `xbar(0) = mubar0 + K (C x(0) - C mubar0)`.
///
/// Over random draws the result is distributed `N(mu0, Sigma0 - P(0|0))`.
pub fn posterior_after_auxiliary(
    obs: &ObservedSystem,
    sol: &DareSolution,
    aux: &AuxiliaryMeasurement,
    x0_draw: &DVector<f64>,
    w_tilde_draw: &DVector<f64>,
) -> DVector<f64> {
    let mu0 = obs.system.init.mean();
    let c = &obs.obs.c;
    let mu_bar = mu0 + &aux.l * (x0_draw + w_tilde_draw - mu0);
    &mu_bar + &sol.k * (c * x0_draw - c * &mu_bar)
}
