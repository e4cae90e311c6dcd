//! The time-varying abstraction pipeline: Kalman/Riccati recursions, the
//! innovation, and the innovation-process realizations that serve as
//! abstract models.
//!
//! With `P_hat(t) = P(t|t-1)` and `P_bar(t) = P(t|t)`, the recursion is
//!
//! ```text
//! K(t)       = P_hat(t) C^T [C P_hat(t) C^T]^{-1}
//! P_bar(t)   = P_hat(t) - K(t) C P_hat(t)
//! P_hat(t+1) = A P_bar(t) A^T + Qw,        P_hat(0) = Sigma0
//! ```
//!
//! The a posteriori innovation process
//!
//! ```text
//! xbar(t+1) = A xbar(t) + B u(t) + K(t+1) v(t+1)
//! zbar(t)   = H xbar(t)
//! xbar(0) ~ N(mu0, Sigma0 - P_bar(0)),   v(t) ~ N(0, C P_hat(t) C^T)
//! ```
//!
//! is the abstract model: same state dimension as the original system but
//! driven by `q < n` noise coordinates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::gaussian::{Gaussian, GaussianError, CONDITION_CAP};
use crate::linalg;
use crate::model::{History, ModelError, ObservedSystem, Policy, Trajectory};

#[derive(Debug, Error)]
pub enum KalmanError {
    #[error("Assumption 1 violated: {0}")]
    Assumption1Violated(String),
    #[error("innovation covariance is ill-conditioned at step {t}: condition number {cond:.3e}")]
    IllConditionedInnovation { t: usize, cond: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("gain schedule covers t = 1..={len} but gain K({t}) was requested")]
    OutOfSchedule { t: usize, len: usize },
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Kalman gain `K = P C^T [C P C^T]^{-1}` via a symmetric PD solve,
/// together with the innovation covariance `S = C P C^T`.
fn gain_and_innovation(
    c: &DMatrix<f64>,
    p_hat: &DMatrix<f64>,
    t: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>), KalmanError> {
    let s = linalg::symmetrize(&(c * p_hat * c.transpose()));
    let cond = linalg::symmetric_condition_number(&s);
    if !(cond <= CONDITION_CAP) {
        return Err(KalmanError::IllConditionedInnovation { t, cond });
    }
    let gain = linalg::right_divide_spd(&(p_hat * c.transpose()), &s)
        .ok_or(KalmanError::IllConditionedInnovation { t, cond })?;
    Ok((gain, s))
}

/// Per-step covariances and gains of the filter recursion over a horizon.
#[derive(Debug, Clone)]
pub struct RiccatiSchedule {
    pub horizon: usize,
    /// `P(t|t-1)` for `t = 0..=horizon`; `a_priori[0] = Sigma0`.
    pub a_priori: Vec<DMatrix<f64>>,
    /// `P(t|t)` for `t = 0..=horizon`.
    pub a_posteriori: Vec<DMatrix<f64>>,
    /// `K(t)` for `t = 0..=horizon`.
    pub gains: Vec<DMatrix<f64>>,
    /// `Sigma_v(t) = C P(t|t-1) C^T` for `t = 0..=horizon`.
    pub innovation_covs: Vec<DMatrix<f64>>,
}

/// Runs the covariance/gain recursion for `t = 0..=horizon`.
pub fn riccati_schedule(
    obs: &ObservedSystem,
    horizon: usize,
) -> Result<RiccatiSchedule, KalmanError> {
    if !obs.assumption1.holds {
        return Err(KalmanError::Assumption1Violated(obs.assumption1.to_string()));
    }
    let a = &obs.system.a;
    let c = &obs.obs.c;
    let qw = &obs.system.qw;
    let q = obs.q();

    let mut a_priori = Vec::with_capacity(horizon + 1);
    let mut a_posteriori = Vec::with_capacity(horizon + 1);
    let mut gains = Vec::with_capacity(horizon + 1);
    let mut innovation_covs = Vec::with_capacity(horizon + 1);

    let mut p_hat = obs.system.init.covariance().clone();
    for t in 0..=horizon {
        let (gain, s) = gain_and_innovation(c, &p_hat, t)?;
        debug_assert!(
            linalg::max_abs(&(c * &gain - DMatrix::identity(q, q))) < 1e-10,
            "gain identity C K(t) = I violated at t = {t}"
        );
        let p_bar = linalg::symmetrize(&(&p_hat - &gain * c * &p_hat));
        a_priori.push(p_hat.clone());
        a_posteriori.push(p_bar.clone());
        gains.push(gain);
        innovation_covs.push(s);
        p_hat = linalg::symmetrize(&(a * &p_bar * a.transpose() + qw));
    }

    Ok(RiccatiSchedule { horizon, a_priori, a_posteriori, gains, innovation_covs })
}

/// The prediction error `v = y - predicted_mean`.
pub fn innovation(
    y: &DVector<f64>,
    predicted_mean: &DVector<f64>,
) -> Result<DVector<f64>, KalmanError> {
    if y.len() != predicted_mean.len() {
        return Err(KalmanError::DimensionMismatch(format!(
            "observation has dimension {} but prediction has dimension {}",
            y.len(),
            predicted_mean.len()
        )));
    }
    Ok(y - predicted_mean)
}

/// Filter state estimates along a realized observation sequence.
#[derive(Debug, Clone)]
pub struct PosteriorSeries {
    /// `x_K(t|t)` for `t = 0..=T`.
    pub posterior_means: Vec<DVector<f64>>,
    /// `P(t|t)` for `t = 0..=T`.
    pub posterior_covs: Vec<DMatrix<f64>>,
    /// `x_K(t|t-1)` for `t = 0..=T`.
    pub prior_means: Vec<DVector<f64>>,
    /// `P(t|t-1)` for `t = 0..=T`.
    pub prior_covs: Vec<DMatrix<f64>>,
}

/// Runs the full filter (means and covariances) on `observations`
/// `y(0..T)` under the deterministic `inputs` `u(0..T-1)`.
pub fn posterior_estimates(
    obs: &ObservedSystem,
    inputs: &[DVector<f64>],
    observations: &[DVector<f64>],
) -> Result<PosteriorSeries, KalmanError> {
    if observations.is_empty() {
        return Err(KalmanError::DimensionMismatch("no observations".into()));
    }
    if inputs.len() + 1 != observations.len() {
        return Err(KalmanError::DimensionMismatch(format!(
            "{} observations require {} inputs, got {}",
            observations.len(),
            observations.len() - 1,
            inputs.len()
        )));
    }
    let horizon = observations.len() - 1;
    let schedule = riccati_schedule(obs, horizon)?;
    let a = &obs.system.a;
    let b = &obs.system.b;
    let c = &obs.obs.c;

    let mut posterior_means = Vec::with_capacity(horizon + 1);
    let mut prior_means = Vec::with_capacity(horizon + 1);
    let mut x_prior = obs.system.init.mean().clone();
    for t in 0..=horizon {
        let v = innovation(&observations[t], &(c * &x_prior))?;
        let x_post = &x_prior + &schedule.gains[t] * v;
        prior_means.push(x_prior.clone());
        posterior_means.push(x_post.clone());
        if t < horizon {
            x_prior = a * &x_post + b * &inputs[t];
        }
    }

    Ok(PosteriorSeries {
        posterior_means,
        posterior_covs: schedule.a_posteriori.clone(),
        prior_means,
        prior_covs: schedule.a_priori.clone(),
    })
}

/// The a priori innovation process, built only as an equivalence-testing
/// intermediate:
///
/// ```text
/// xhat(t+1) = A xhat(t) + B u(t) + A K(t) v(t)
/// y(t)      = C xhat(t) + v(t),   zhat(t) = N y(t)
/// xhat(0) = mu0,   v(t) ~ N(0, Sigma_v(t))
/// ```
#[derive(Debug, Clone)]
pub struct APrioriProcess {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub n: DMatrix<f64>,
    /// `K(t)` for `t = 0..=horizon`.
    pub gains: Vec<DMatrix<f64>>,
    /// `Sigma_v(t)` for `t = 0..=horizon`.
    pub innovation_covs: Vec<DMatrix<f64>>,
    pub init_mean: DVector<f64>,
}

impl APrioriProcess {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.gains.len() - 1
    }

    /// Rolls the process forward; the policy sees `xhat`.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        policy: &Policy,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Trajectory, KalmanError> {
        if horizon > self.horizon() {
            return Err(KalmanError::OutOfSchedule { t: horizon, len: self.horizon() });
        }
        let q = self.c.nrows();
        let samplers: Vec<_> = self.innovation_covs[..=horizon]
            .iter()
            .map(|s| Gaussian::new(DVector::zeros(q), s.clone()).map(|g| g.sampler()))
            .collect::<Result<_, _>>()?;

        let mut states = Vec::with_capacity(horizon + 1);
        let mut inputs = Vec::with_capacity(horizon);
        let mut outputs = Vec::with_capacity(horizon + 1);
        let mut observations = Vec::with_capacity(horizon + 1);
        let mut noises = Vec::with_capacity(horizon);
        let mut history = History::default();

        let mut x = self.init_mean.clone();
        for t in 0..=horizon {
            let v = samplers[t].draw(rng);
            let y = &self.c * &x + &v;
            outputs.push(&self.n * &y);
            observations.push(y);
            states.push(x.clone());
            history.states.push(x.clone());
            if t < horizon {
                let u = policy.evaluate(t, &x, &history)?;
                x = &self.a * &x + &self.b * &u + &self.a * &self.gains[t] * &v;
                history.inputs.push(u.clone());
                inputs.push(u);
                noises.push(v);
            }
        }

        Ok(Trajectory { states, inputs, outputs, observations: Some(observations), noises })
    }
}

/// Builds the a priori innovation process over `t = 0..=horizon`.
pub fn build_a_priori_process(
    obs: &ObservedSystem,
    horizon: usize,
) -> Result<APrioriProcess, KalmanError> {
    let schedule = riccati_schedule(obs, horizon)?;
    Ok(APrioriProcess {
        a: obs.system.a.clone(),
        b: obs.system.b.clone(),
        c: obs.obs.c.clone(),
        n: obs.obs.n.clone(),
        gains: schedule.gains,
        innovation_covs: schedule.innovation_covs,
        init_mean: obs.system.init.mean().clone(),
    })
}

/// Which realization an [`AbstractModel`] is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    TimeVarying,
    TimeInvariant,
    TimeInvariantStar,
}

impl std::fmt::Display for Flavor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Flavor::TimeVarying => "time-varying",
            Flavor::TimeInvariant => "time-invariant",
            Flavor::TimeInvariantStar => "time-invariant-star",
        })
    }
}

/// Gain schedule indexed by the innovation the model consumes: the state
/// update at step `t` uses `K(t+1) v(t+1)`, so scheduled entries cover
/// `t = 1..=horizon`.
#[derive(Debug, Clone)]
pub enum MatrixSchedule {
    Constant(DMatrix<f64>),
    /// `Scheduled(v)` stores `v[t-1]` for time index `t = 1..`.
    Scheduled(Vec<DMatrix<f64>>),
}

impl MatrixSchedule {
    /// Entry for time index `t >= 1`.
    pub fn at(&self, t: usize) -> Result<&DMatrix<f64>, KalmanError> {
        match self {
            MatrixSchedule::Constant(m) => Ok(m),
            MatrixSchedule::Scheduled(v) => {
                v.get(t.wrapping_sub(1)).ok_or(KalmanError::OutOfSchedule { t, len: v.len() })
            }
        }
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            MatrixSchedule::Constant(_) => None,
            MatrixSchedule::Scheduled(v) => Some(v.len()),
        }
    }
}

/// An innovation-process realization of the observed system.
#[derive(Debug, Clone)]
pub struct AbstractModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub gains: MatrixSchedule,
    pub innovation_covs: MatrixSchedule,
    pub init: Gaussian,
    pub flavor: Flavor,
}

impl AbstractModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.h.nrows()
    }

    /// Noise dimension `q` of the innovation input.
    pub fn noise_dim(&self) -> usize {
        match &self.gains {
            MatrixSchedule::Constant(k) => k.ncols(),
            MatrixSchedule::Scheduled(v) => v.first().map_or(0, |k| k.ncols()),
        }
    }

    /// Horizon covered by a scheduled model; `None` when time-invariant.
    pub fn schedule_horizon(&self) -> Option<usize> {
        self.gains.len()
    }

    pub fn gain_at(&self, t: usize) -> Result<&DMatrix<f64>, KalmanError> {
        self.gains.at(t)
    }

    pub fn innovation_cov_at(&self, t: usize) -> Result<&DMatrix<f64>, KalmanError> {
        self.innovation_covs.at(t)
    }

    /// Rolls the abstract model forward under `policy` (over its own state).
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        policy: &Policy,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Trajectory, KalmanError> {
        let q = self.noise_dim();
        let samplers: Vec<_> = match &self.innovation_covs {
            MatrixSchedule::Constant(s) => {
                vec![Gaussian::new(DVector::zeros(q), s.clone())?.sampler()]
            }
            MatrixSchedule::Scheduled(_) => (1..=horizon)
                .map(|t| {
                    let s = self.innovation_cov_at(t)?.clone();
                    Ok(Gaussian::new(DVector::zeros(q), s)?.sampler())
                })
                .collect::<Result<_, KalmanError>>()?,
        };
        let sampler_at = |t: usize| -> &crate::gaussian::GaussianSampler {
            match &self.innovation_covs {
                MatrixSchedule::Constant(_) => &samplers[0],
                MatrixSchedule::Scheduled(_) => &samplers[t - 1],
            }
        };

        let mut states = Vec::with_capacity(horizon + 1);
        let mut inputs = Vec::with_capacity(horizon);
        let mut outputs = Vec::with_capacity(horizon + 1);
        let mut noises = Vec::with_capacity(horizon);
        let mut history = History::default();

        let mut x = self.init.sample(rng);
        for t in 0..horizon {
            outputs.push(&self.h * &x);
            states.push(x.clone());
            history.states.push(x.clone());
            let u = policy.evaluate(t, &x, &history)?;
            let v = sampler_at(t + 1).draw(rng);
            x = &self.a * &x + &self.b * &u + self.gain_at(t + 1)? * &v;
            history.inputs.push(u.clone());
            inputs.push(u);
            noises.push(v);
        }
        outputs.push(&self.h * &x);
        states.push(x);

        Ok(Trajectory { states, inputs, outputs, observations: None, noises })
    }
}

/// Builds the time-varying abstract model over `t = 0..=horizon`.
///
/// The `t = 0` information is folded into the initial law
/// `N(mu0, Sigma0 - P_bar(0))`; the schedules store `K(t)` and
/// `Sigma_v(t)` for `t = 1..=horizon`.
pub fn build_abstract_time_varying(
    obs: &ObservedSystem,
    horizon: usize,
) -> Result<AbstractModel, KalmanError> {
    let schedule = riccati_schedule(obs, horizon)?;
    let init_cov = linalg::symmetrize(
        &(obs.system.init.covariance() - &schedule.a_posteriori[0]),
    );
    let init = Gaussian::new(obs.system.init.mean().clone(), init_cov)?;
    Ok(AbstractModel {
        a: obs.system.a.clone(),
        b: obs.system.b.clone(),
        h: obs.system.h.clone(),
        gains: MatrixSchedule::Scheduled(schedule.gains[1..].to_vec()),
        innovation_covs: MatrixSchedule::Scheduled(schedule.innovation_covs[1..].to_vec()),
        init,
        flavor: Flavor::TimeVarying,
    })
}
