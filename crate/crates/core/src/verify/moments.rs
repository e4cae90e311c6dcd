//! Exact stacked output moments of linear closed loops.
//!
//! Every supported closed loop is first written as a time-varying linear
//! recursion
//!
//! ```text
//! s(0)   = m0 + G0 e0,        e0 ~ N(0, Q0)
//! s(t+1) = M_t s(t) + c_t + G_t e_t,   e_t ~ N(0, Q_t)
//! z(t)   = H_t s(t) + d_t
//! ```
//!
//! over the primitive Gaussian vector `(e0, e_0, ..., e_{T-1})`. Two
//! independent moment accumulations are provided: the affine route stacks
//! the coefficient rows of every output and forms `J Sigma J^T` in one
//! product, while the recursive route propagates means and covariances
//! (including all cross-time blocks) step by step. They serve as a
//! double-entry check on each other.

use nalgebra::{DMatrix, DVector};

use super::{ClosedLoop, StackedGaussian, VerifyError};
use crate::kalman::KalmanError;
use crate::linalg;
use crate::model::Policy;

pub(super) struct LoopDescriptor {
    state_dim: usize,
    out_dim: usize,
    init_mean: DVector<f64>,
    init_noise: DMatrix<f64>,
    init_cov: DMatrix<f64>,
    steps: Vec<Step>,
    out_maps: Vec<(DMatrix<f64>, DVector<f64>)>,
}

struct Step {
    trans: DMatrix<f64>,
    offset: DVector<f64>,
    noise_in: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
}

fn policy_coefficients<'p>(
    policy: &'p Policy,
    t: usize,
) -> Result<(&'p DMatrix<f64>, &'p DVector<f64>), VerifyError> {
    policy
        .linear_coefficients(t)
        .ok_or(VerifyError::UnsupportedPolicy)?
        .map_err(VerifyError::from)
}

pub(super) fn build_descriptor(
    closed_loop: &ClosedLoop<'_>,
    horizon: usize,
) -> Result<LoopDescriptor, VerifyError> {
    match closed_loop {
        ClosedLoop::Concrete { system, policy } => {
            let n = system.state_dim();
            let mut steps = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let (f, g) = policy_coefficients(policy, t)?;
                check_policy_dims(f, system.input_dim(), n)?;
                steps.push(Step {
                    trans: &system.a + &system.b * f,
                    offset: &system.b * g,
                    noise_in: DMatrix::identity(n, n),
                    noise_cov: system.qw.clone(),
                });
            }
            Ok(LoopDescriptor {
                state_dim: n,
                out_dim: system.output_dim(),
                init_mean: system.init.mean().clone(),
                init_noise: DMatrix::identity(n, n),
                init_cov: system.init.covariance().clone(),
                steps,
                out_maps: (0..=horizon)
                    .map(|_| (system.h.clone(), DVector::zeros(system.output_dim())))
                    .collect(),
            })
        }
        ClosedLoop::Abstract { model, policy } => {
            let n = model.state_dim();
            let mut steps = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let (f, g) = policy_coefficients(policy, t)?;
                check_policy_dims(f, model.input_dim(), n)?;
                steps.push(Step {
                    trans: &model.a + &model.b * f,
                    offset: &model.b * g,
                    noise_in: model.gain_at(t + 1)?.clone(),
                    noise_cov: model.innovation_cov_at(t + 1)?.clone(),
                });
            }
            Ok(LoopDescriptor {
                state_dim: n,
                out_dim: model.output_dim(),
                init_mean: model.init.mean().clone(),
                init_noise: DMatrix::identity(n, n),
                init_cov: model.init.covariance().clone(),
                steps,
                out_maps: (0..=horizon)
                    .map(|_| (model.h.clone(), DVector::zeros(model.output_dim())))
                    .collect(),
            })
        }
        ClosedLoop::APriori { process, policy } => {
            // Augmented state (xhat, v(t)) so the output map is memoryless:
            // zhat(t) = N C xhat(t) + N v(t).
            if horizon > process.horizon() {
                return Err(VerifyError::Kalman(KalmanError::OutOfSchedule {
                    t: horizon,
                    len: process.horizon(),
                }));
            }
            let n = process.state_dim();
            let q = process.c.nrows();
            let p = process.n.nrows();
            let s_dim = n + q;
            let m = process.b.ncols();

            let mut init_noise = DMatrix::zeros(s_dim, q);
            init_noise.view_mut((n, 0), (q, q)).copy_from(&DMatrix::identity(q, q));
            let mut init_mean = DVector::zeros(s_dim);
            init_mean.rows_mut(0, n).copy_from(&process.init_mean);

            let nc = &process.n * &process.c;
            let mut out_map = DMatrix::zeros(p, s_dim);
            out_map.view_mut((0, 0), (p, n)).copy_from(&nc);
            out_map.view_mut((0, n), (p, q)).copy_from(&process.n);

            let mut steps = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let (f, g) = policy_coefficients(policy, t)?;
                check_policy_dims(f, m, n)?;
                let mut trans = DMatrix::zeros(s_dim, s_dim);
                trans
                    .view_mut((0, 0), (n, n))
                    .copy_from(&(&process.a + &process.b * f));
                trans
                    .view_mut((0, n), (n, q))
                    .copy_from(&(&process.a * &process.gains[t]));
                let mut offset = DVector::zeros(s_dim);
                offset.rows_mut(0, n).copy_from(&(&process.b * g));
                let mut noise_in = DMatrix::zeros(s_dim, q);
                noise_in.view_mut((n, 0), (q, q)).copy_from(&DMatrix::identity(q, q));
                steps.push(Step {
                    trans,
                    offset,
                    noise_in,
                    noise_cov: process.innovation_covs[t + 1].clone(),
                });
            }
            Ok(LoopDescriptor {
                state_dim: s_dim,
                out_dim: p,
                init_mean,
                init_noise,
                init_cov: process.innovation_covs[0].clone(),
                steps,
                out_maps: (0..=horizon).map(|_| (out_map.clone(), DVector::zeros(p))).collect(),
            })
        }
        ClosedLoop::Refined { observed, model, aux, policy } => {
            // Joint state (x, xbar) coupled through the realized innovation
            // v(t+1) = C A (x - xbar) + C w(t).
            let system = &observed.system;
            let n = system.state_dim();
            let c = &observed.obs.c;
            let p = system.output_dim();
            let s_dim = 2 * n;

            let (init_noise, init_cov) = match aux {
                None => {
                    let sigma0 = system.init.covariance();
                    let s = linalg::symmetrize(&(c * sigma0 * c.transpose()));
                    let cond = linalg::symmetric_condition_number(&s);
                    let k0 = linalg::right_divide_spd(&(sigma0 * c.transpose()), &s).ok_or(
                        VerifyError::Kalman(KalmanError::IllConditionedInnovation { t: 0, cond }),
                    )?;
                    let mut init_noise = DMatrix::zeros(s_dim, n);
                    init_noise.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
                    init_noise.view_mut((n, 0), (n, n)).copy_from(&(&k0 * c));
                    (init_noise, sigma0.clone())
                }
                Some(aux) => {
                    let k = model.gain_at(1)?;
                    let kc = k * c;
                    let eye = DMatrix::<f64>::identity(n, n);
                    let ikc_l = (&eye - &kc) * &aux.l;
                    let mut init_noise = DMatrix::zeros(s_dim, 2 * n);
                    init_noise.view_mut((0, 0), (n, n)).copy_from(&eye);
                    init_noise.view_mut((n, 0), (n, n)).copy_from(&(&ikc_l + &kc));
                    init_noise.view_mut((n, n), (n, n)).copy_from(&ikc_l);
                    let mut init_cov = DMatrix::zeros(2 * n, 2 * n);
                    init_cov.view_mut((0, 0), (n, n)).copy_from(system.init.covariance());
                    init_cov.view_mut((n, n), (n, n)).copy_from(&aux.r);
                    (init_noise, init_cov)
                }
            };

            let mut init_mean = DVector::zeros(s_dim);
            init_mean.rows_mut(0, n).copy_from(system.init.mean());
            init_mean.rows_mut(n, n).copy_from(system.init.mean());

            let mut out_map = DMatrix::zeros(p, s_dim);
            out_map.view_mut((0, 0), (p, n)).copy_from(&system.h);

            let mut steps = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let (f, g) = policy_coefficients(policy, t)?;
                check_policy_dims(f, system.input_dim(), n)?;
                let k = model.gain_at(t + 1)?;
                let kca = k * c * &system.a;
                let bf = &system.b * f;
                let bg = &system.b * g;

                let mut trans = DMatrix::zeros(s_dim, s_dim);
                trans.view_mut((0, 0), (n, n)).copy_from(&system.a);
                trans.view_mut((0, n), (n, n)).copy_from(&bf);
                trans.view_mut((n, 0), (n, n)).copy_from(&kca);
                trans
                    .view_mut((n, n), (n, n))
                    .copy_from(&(&system.a - &kca + &bf));
                let mut offset = DVector::zeros(s_dim);
                offset.rows_mut(0, n).copy_from(&bg);
                offset.rows_mut(n, n).copy_from(&bg);
                let mut noise_in = DMatrix::zeros(s_dim, n);
                noise_in.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
                noise_in.view_mut((n, 0), (n, n)).copy_from(&(k * c));
                steps.push(Step { trans, offset, noise_in, noise_cov: system.qw.clone() });
            }
            Ok(LoopDescriptor {
                state_dim: s_dim,
                out_dim: p,
                init_mean,
                init_noise,
                init_cov,
                steps,
                out_maps: (0..=horizon).map(|_| (out_map.clone(), DVector::zeros(p))).collect(),
            })
        }
    }
}

fn check_policy_dims(gain: &DMatrix<f64>, m: usize, state_dim: usize) -> Result<(), VerifyError> {
    if gain.nrows() != m || gain.ncols() != state_dim {
        return Err(VerifyError::DimensionMismatch(format!(
            "policy gain is {}x{}, expected {m}x{state_dim}",
            gain.nrows(),
            gain.ncols()
        )));
    }
    Ok(())
}

/// Affine route: stack every output's coefficient row over the primitive
/// vector and form the covariance in one product.
pub(super) fn evaluate_affine(desc: &LoopDescriptor) -> StackedGaussian {
    let horizon = desc.steps.len();
    let p = desc.out_dim;
    let block_offsets: Vec<usize> = {
        let mut offs = vec![0usize];
        let mut acc = desc.init_cov.nrows();
        for step in &desc.steps {
            offs.push(acc);
            acc += step.noise_cov.nrows();
        }
        offs.push(acc);
        offs
    };
    let total = *block_offsets.last().unwrap();

    let mut coeff = DMatrix::zeros(desc.state_dim, total);
    coeff
        .view_mut((0, 0), (desc.state_dim, desc.init_cov.nrows()))
        .copy_from(&desc.init_noise);
    let mut mean_state = desc.init_mean.clone();

    let mut j = DMatrix::zeros((horizon + 1) * p, total);
    let mut mean = DVector::zeros((horizon + 1) * p);

    for t in 0..=horizon {
        let (h, d) = &desc.out_maps[t];
        j.view_mut((t * p, 0), (p, total)).copy_from(&(h * &coeff));
        mean.rows_mut(t * p, p).copy_from(&(h * &mean_state + d));
        if t < horizon {
            let step = &desc.steps[t];
            coeff = &step.trans * coeff;
            coeff
                .view_mut((0, block_offsets[t + 1]), (desc.state_dim, step.noise_cov.nrows()))
                .copy_from(&step.noise_in);
            mean_state = &step.trans * mean_state + &step.offset;
        }
    }

    // Sigma = J Q J^T with block-diagonal Q.
    let mut jq = DMatrix::zeros((horizon + 1) * p, total);
    let k0 = desc.init_cov.nrows();
    jq.view_mut((0, 0), ((horizon + 1) * p, k0))
        .copy_from(&(j.view((0, 0), ((horizon + 1) * p, k0)) * &desc.init_cov));
    for (t, step) in desc.steps.iter().enumerate() {
        let off = block_offsets[t + 1];
        let k = step.noise_cov.nrows();
        let block = j.view((0, off), ((horizon + 1) * p, k)) * &step.noise_cov;
        jq.view_mut((0, off), ((horizon + 1) * p, k)).copy_from(&block);
    }
    let covariance = linalg::symmetrize(&(&jq * j.transpose()));

    StackedGaussian { mean, covariance, horizon, output_dim: p }
}

/// Recursive route: propagate the joint moments of
/// `(z(0), ..., z(t), s(t))` one step at a time.
pub(super) fn evaluate_recursive(desc: &LoopDescriptor) -> StackedGaussian {
    let horizon = desc.steps.len();
    let p = desc.out_dim;
    let total_out = (horizon + 1) * p;

    let mut mean = DVector::zeros(total_out);
    let mut covariance = DMatrix::zeros(total_out, total_out);

    let mut m_s = desc.init_mean.clone();
    let mut p_ss =
        linalg::symmetrize(&(&desc.init_noise * &desc.init_cov * desc.init_noise.transpose()));
    // Cov(z(tau), s(t)) for each recorded tau.
    let mut p_zs: Vec<DMatrix<f64>> = Vec::with_capacity(horizon + 1);

    for t in 0..=horizon {
        let (h, d) = &desc.out_maps[t];
        mean.rows_mut(t * p, p).copy_from(&(h * &m_s + d));
        for (tau, czs) in p_zs.iter().enumerate() {
            let cross = czs * h.transpose();
            covariance.view_mut((tau * p, t * p), (p, p)).copy_from(&cross);
            covariance
                .view_mut((t * p, tau * p), (p, p))
                .copy_from(&cross.transpose());
        }
        covariance
            .view_mut((t * p, t * p), (p, p))
            .copy_from(&linalg::symmetrize(&(h * &p_ss * h.transpose())));
        p_zs.push(h * &p_ss);

        if t < horizon {
            let step = &desc.steps[t];
            m_s = &step.trans * m_s + &step.offset;
            p_ss = linalg::symmetrize(
                &(&step.trans * &p_ss * step.trans.transpose()
                    + &step.noise_in * &step.noise_cov * step.noise_in.transpose()),
            );
            for czs in p_zs.iter_mut() {
                *czs = &*czs * step.trans.transpose();
            }
        }
    }

    StackedGaussian { mean, covariance, horizon, output_dim: p }
}
