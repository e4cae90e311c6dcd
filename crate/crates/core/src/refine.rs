//! Controller refinement: embedding the abstract model inside a
//! controller for the original system.
//!
//! The embedded state is driven by the realized observations,
//!
//! ```text
//! v(t+1)    = y(t+1) - C A xbar(t) - C B ubar(t)
//! xbar(t+1) = A xbar(t) + B ubar(t) + K(t+1) v(t+1)
//! ```
//!
//! with `u(t) = ubar(t)` applied to the plant unchanged. Since
//! `C K(t) = I`, the embedded state reproduces the observation exactly:
//! `C xbar(t) = y(t)` along the whole run.
//!
//! Initialization depends on the abstraction: the time-varying and
//! Lemma-style time-invariant models start from
//! `xbar(0) = mu0 + K(0)(C x(0) - C mu0)`; the starred model first takes
//! the auxiliary measurement `ytilde = x(0) + wtilde` and conditions on
//! both.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::dare::AuxiliaryMeasurement;
use crate::gaussian::{Gaussian, GaussianError};
use crate::kalman::{AbstractModel, Flavor, KalmanError};
use crate::linalg;
use crate::model::{History, ModelError, ObservedSystem, Policy};
use crate::verify::StateReduction;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("abstract model flavor {got} cannot be refined with {algorithm}")]
    FlavorMismatch { got: Flavor, algorithm: &'static str },
    #[error("time-invariant-star refinement requires the auxiliary measurement")]
    MissingAuxiliary,
    #[error("advance called without a pending input; call next_input first")]
    InputNotRequested,
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefinementMode {
    Algorithm1,
    Algorithm2,
}

/// A live refinement run: the embedded abstract state plus the policy
/// and gain schedule it consumes.
pub struct RefinementSession<'a> {
    mode: RefinementMode,
    observed: &'a ObservedSystem,
    model: &'a AbstractModel,
    policy: &'a Policy,
    projection: Option<&'a StateReduction>,
    ca: DMatrix<f64>,
    cb: DMatrix<f64>,
    time: usize,
    xbar: DVector<f64>,
    pending_input: Option<DVector<f64>>,
    /// Abstract history (projected when a reduction is active) fed to
    /// black-box policies.
    history: History,
    max_obs_residual: f64,
}

impl<'a> RefinementSession<'a> {
    /// Starts the refinement loop for time-varying or Lemma-style
    /// time-invariant abstractions: computes
    /// `K(0) = Sigma0 C^T (C Sigma0 C^T)^{-1}` and
    /// `xbar(0) = mu0 + K(0)(C x(0) - C mu0)`.
    pub fn start_alg1(
        observed: &'a ObservedSystem,
        model: &'a AbstractModel,
        policy: &'a Policy,
        x0: &DVector<f64>,
        projection: Option<&'a StateReduction>,
    ) -> Result<Self, RefineError> {
        if model.flavor == Flavor::TimeInvariantStar {
            return Err(RefineError::FlavorMismatch {
                got: model.flavor,
                algorithm: "Algorithm 1",
            });
        }
        let c = &observed.obs.c;
        let sigma0 = observed.system.init.covariance();
        let s = linalg::symmetrize(&(c * sigma0 * c.transpose()));
        let cond = linalg::symmetric_condition_number(&s);
        let k0 = linalg::right_divide_spd(&(sigma0 * c.transpose()), &s)
            .ok_or(KalmanError::IllConditionedInnovation { t: 0, cond })?;
        let mu0 = observed.system.init.mean();
        let xbar = mu0 + &k0 * (c * x0 - c * mu0);
        Ok(Self::finish_start(
            RefinementMode::Algorithm1,
            observed,
            model,
            policy,
            projection,
            xbar,
            x0,
        ))
    }

    /// Starts the refinement loop for the starred time-invariant
    /// abstraction: draws `wtilde ~ N(0, R)` from the stream, computes
    /// `mubar0 = mu0 + L (x(0) + wtilde - mu0)` and
    /// `xbar(0) = mubar0 + K (C x(0) - C mubar0)`.
    pub fn start_alg2<R: Rng + ?Sized>(
        observed: &'a ObservedSystem,
        model: &'a AbstractModel,
        aux: &AuxiliaryMeasurement,
        policy: &'a Policy,
        x0: &DVector<f64>,
        rng: &mut R,
        projection: Option<&'a StateReduction>,
    ) -> Result<Self, RefineError> {
        if model.flavor != Flavor::TimeInvariantStar {
            return Err(RefineError::FlavorMismatch {
                got: model.flavor,
                algorithm: "Algorithm 2",
            });
        }
        let n = observed.system.state_dim();
        let w_tilde = Gaussian::new(DVector::zeros(n), aux.r.clone())?.sample(rng);
        let c = &observed.obs.c;
        let mu0 = observed.system.init.mean();
        let mu_bar = mu0 + &aux.l * (x0 + &w_tilde - mu0);
        let k = model.gain_at(1)?;
        let xbar = &mu_bar + k * (c * x0 - c * &mu_bar);
        Ok(Self::finish_start(
            RefinementMode::Algorithm2,
            observed,
            model,
            policy,
            projection,
            xbar,
            x0,
        ))
    }

    fn finish_start(
        mode: RefinementMode,
        observed: &'a ObservedSystem,
        model: &'a AbstractModel,
        policy: &'a Policy,
        projection: Option<&'a StateReduction>,
        xbar: DVector<f64>,
        x0: &DVector<f64>,
    ) -> Self {
        let c = &observed.obs.c;
        let mut session = Self {
            mode,
            observed,
            model,
            policy,
            projection,
            ca: c * &observed.system.a,
            cb: c * &observed.system.b,
            time: 0,
            xbar,
            pending_input: None,
            history: History::default(),
            max_obs_residual: 0.0,
        };
        session.record_residual(&(c * x0));
        session.push_state();
        session
    }

    fn project(&self, state: &DVector<f64>) -> DVector<f64> {
        match self.projection {
            Some(map) => map.project_state(state),
            None => state.clone(),
        }
    }

    fn push_state(&mut self) {
        let projected = self.project(&self.xbar);
        self.history.states.push(projected);
    }

    fn record_residual(&mut self, y: &DVector<f64>) {
        let resid = linalg::max_abs_vec(&(&self.observed.obs.c * &self.xbar - y));
        self.max_obs_residual = self.max_obs_residual.max(resid);
    }

    pub fn mode(&self) -> RefinementMode {
        self.mode
    }

    pub fn time(&self) -> usize {
        self.time
    }

    /// The embedded abstract state `xbar(t)`.
    pub fn embedded_state(&self) -> &DVector<f64> {
        &self.xbar
    }

    /// Worst observation-consistency residual `max_t |C xbar(t) - y(t)|`
    /// seen so far.
    pub fn max_observation_residual(&self) -> f64 {
        self.max_obs_residual
    }

    /// Evaluates the abstract policy on `xbar(t)` and returns the input
    /// unchanged (it is applied to the plant as-is).
    pub fn next_input(&mut self) -> Result<DVector<f64>, RefineError> {
        let state = self.project(&self.xbar);
        let u = self.policy.evaluate(self.time, &state, &self.history)?;
        self.pending_input = Some(u.clone());
        Ok(u)
    }

    /// Consumes the plant state `x(t+1)`, forms the realized innovation
    /// and updates the embedded state.
    pub fn advance(&mut self, x_next: &DVector<f64>) -> Result<(), RefineError> {
        let u = self.pending_input.take().ok_or(RefineError::InputNotRequested)?;
        let y_next = &self.observed.obs.c * x_next;
        let v = &y_next - &self.ca * &self.xbar - &self.cb * &u;
        let gain = self.model.gain_at(self.time + 1)?;
        self.xbar =
            &self.observed.system.a * &self.xbar + &self.observed.system.b * &u + gain * v;
        self.time += 1;
        self.record_residual(&y_next);
        self.history.inputs.push(u);
        self.push_state();
        Ok(())
    }
}

/// Paired rollout of the plant and the embedded abstract state.
#[derive(Debug, Clone)]
pub struct CoupledTrajectory {
    pub states: Vec<DVector<f64>>,
    pub abstract_states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// `z(t) = H x(t)`.
    pub outputs: Vec<DVector<f64>>,
    /// `zbar(t) = H xbar(t)`.
    pub abstract_outputs: Vec<DVector<f64>>,
    pub max_observation_residual: f64,
}

/// Drives the plant with noise from the stream and runs the refinement
/// session alongside, recording both output sequences. The algorithm is
/// chosen from the abstraction flavor; starred models require `aux`.
pub fn coupled_simulate<R: Rng + ?Sized>(
    observed: &ObservedSystem,
    model: &AbstractModel,
    aux: Option<&AuxiliaryMeasurement>,
    policy: &Policy,
    horizon: usize,
    rng: &mut R,
    projection: Option<&StateReduction>,
) -> Result<CoupledTrajectory, RefineError> {
    let system = &observed.system;
    let init_sampler = system.init.sampler();
    let noise_sampler = Gaussian::new(DVector::zeros(system.state_dim()), system.qw.clone())?
        .sampler();

    let x0 = init_sampler.draw(rng);
    let mut session = match model.flavor {
        Flavor::TimeInvariantStar => {
            let aux = aux.ok_or(RefineError::MissingAuxiliary)?;
            RefinementSession::start_alg2(observed, model, aux, policy, &x0, rng, projection)?
        }
        _ => RefinementSession::start_alg1(observed, model, policy, &x0, projection)?,
    };

    let h = &system.h;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut abstract_states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon);
    let mut outputs = Vec::with_capacity(horizon + 1);
    let mut abstract_outputs = Vec::with_capacity(horizon + 1);

    let mut x = x0;
    for _ in 0..horizon {
        states.push(x.clone());
        abstract_states.push(session.embedded_state().clone());
        outputs.push(h * &x);
        abstract_outputs.push(h * session.embedded_state());

        let u = session.next_input()?;
        let w = noise_sampler.draw(rng);
        x = &system.a * &x + &system.b * &u + &w;
        session.advance(&x)?;
        inputs.push(u);
    }
    states.push(x.clone());
    abstract_states.push(session.embedded_state().clone());
    outputs.push(h * &x);
    abstract_outputs.push(h * session.embedded_state());

    Ok(CoupledTrajectory {
        states,
        abstract_states,
        inputs,
        outputs,
        abstract_outputs,
        max_observation_residual: session.max_observation_residual(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dare::{build_invariant_star, solve_dare};
    use crate::kalman::build_abstract_time_varying;
    use crate::testutil::{diag, observed_two_row};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn star_setup() -> (ObservedSystem, AbstractModel, AuxiliaryMeasurement) {
        let obs = observed_two_row(diag(&[5.0, 5.0, 5.0]));
        let sol = solve_dare(&obs.system.a, &obs.obs.c, &obs.system.qw).unwrap();
        let (model, aux) = build_invariant_star(&obs, &sol).unwrap();
        (obs, model, aux)
    }

    #[test]
    fn start_alg1_at_mean_embeds_mean() {
        let obs = observed_two_row(diag(&[5.0, 5.0, 5.0]));
        let model = build_abstract_time_varying(&obs, 10).unwrap();
        let policy = Policy::zero(1, 3);
        let session =
            RefinementSession::start_alg1(&obs, &model, &policy, &DVector::zeros(3), None)
                .unwrap();
        assert!(linalg::max_abs_vec(session.embedded_state()) < 1e-14);
    }

    #[test]
    fn start_alg1_projects_observed_coordinates() {
        let obs = observed_two_row(diag(&[5.0, 5.0, 5.0]));
        let model = build_abstract_time_varying(&obs, 10).unwrap();
        let policy = Policy::zero(1, 3);
        let x0 = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let session = RefinementSession::start_alg1(&obs, &model, &policy, &x0, None).unwrap();
        let want = DVector::from_row_slice(&[0.0, 2.0, 3.0]);
        assert!(linalg::max_abs_vec(&(session.embedded_state() - want)) < 1e-12);
    }

    #[test]
    fn start_alg1_rejects_star_flavor() {
        let (obs, model, _) = star_setup();
        let policy = Policy::zero(1, 3);
        assert!(matches!(
            RefinementSession::start_alg1(&obs, &model, &policy, &DVector::zeros(3), None),
            Err(RefineError::FlavorMismatch { .. })
        ));
    }

    #[test]
    fn start_alg2_rejects_other_flavors() {
        let obs = observed_two_row(diag(&[5.0, 5.0, 5.0]));
        let model = build_abstract_time_varying(&obs, 10).unwrap();
        let sol = solve_dare(&obs.system.a, &obs.obs.c, &obs.system.qw).unwrap();
        let (_, aux) = build_invariant_star(&obs, &sol).unwrap();
        let policy = Policy::zero(1, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(matches!(
            RefinementSession::start_alg2(
                &obs,
                &model,
                &aux,
                &policy,
                &DVector::zeros(3),
                &mut rng,
                None
            ),
            Err(RefineError::FlavorMismatch { .. })
        ));
    }

    #[test]
    fn start_alg2_is_deterministic_per_stream() {
        let (obs, model, aux) = star_setup();
        let policy = Policy::zero(1, 3);
        let x0 = DVector::from_row_slice(&[0.5, -0.5, 1.5]);
        let s1 = RefinementSession::start_alg2(
            &obs, &model, &aux, &policy, &x0, &mut ChaCha12Rng::seed_from_u64(4), None,
        )
        .unwrap();
        let s2 = RefinementSession::start_alg2(
            &obs, &model, &aux, &policy, &x0, &mut ChaCha12Rng::seed_from_u64(4), None,
        )
        .unwrap();
        assert_eq!(s1.embedded_state(), s2.embedded_state());
    }

    #[test]
    fn next_input_evaluates_policy_on_embedded_state() {
        let (obs, model, _) = star_setup();
        let policy = Policy::linear(DMatrix::from_row_slice(1, 3, &[0.0, -1.0, 0.0]));
        let x0 = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        // Algorithm 1 initialization formula shared by the gain structure:
        // embedded state (0, 2, 3), so u = -2.
        let model_tv = build_abstract_time_varying(&obs, 10).unwrap();
        let mut session =
            RefinementSession::start_alg1(&obs, &model_tv, &policy, &x0, None).unwrap();
        let u = session.next_input().unwrap();
        assert!((u[0] - (-2.0)).abs() < 1e-12);
        let _ = model;
    }

    #[test]
    fn advance_requires_pending_input() {
        let (obs, model, aux) = star_setup();
        let policy = Policy::zero(1, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut session = RefinementSession::start_alg2(
            &obs, &model, &aux, &policy, &DVector::zeros(3), &mut rng, None,
        )
        .unwrap();
        assert!(matches!(
            session.advance(&DVector::zeros(3)),
            Err(RefineError::InputNotRequested)
        ));
    }

    #[test]
    fn noiseless_coupling_tracks_exactly() {
        // With xbar(t) = x(t) and w(t) = 0 the innovation vanishes and the
        // embedded state reproduces the plant state.
        let (obs, model, _) = star_setup();
        let model_tv = build_abstract_time_varying(&obs, 10).unwrap();
        let policy = Policy::linear(DMatrix::from_row_slice(1, 3, &[0.2, -0.3, 0.4]));
        let x0 = DVector::zeros(3); // equals mu0, so xbar(0) = x(0)
        let mut session =
            RefinementSession::start_alg1(&obs, &model_tv, &policy, &x0, None).unwrap();
        let mut x = x0;
        for _ in 0..5 {
            let u = session.next_input().unwrap();
            x = &obs.system.a * &x + &obs.system.b * &u;
            session.advance(&x).unwrap();
            assert!(linalg::max_abs_vec(&(session.embedded_state() - &x)) < 1e-12);
        }
        let _ = model;
    }

    #[test]
    fn advance_out_of_schedule() {
        let obs = observed_two_row(diag(&[5.0, 5.0, 5.0]));
        let model = build_abstract_time_varying(&obs, 2).unwrap();
        let policy = Policy::zero(1, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let err = coupled_simulate(&obs, &model, None, &policy, 3, &mut rng, None).unwrap_err();
        assert!(matches!(
            err,
            RefineError::Kalman(KalmanError::OutOfSchedule { t: 3, len: 2 })
        ));
    }

    #[test]
    fn coupled_run_keeps_observation_consistency() {
        let (obs, model, aux) = star_setup();
        let policy = Policy::linear(DMatrix::from_row_slice(1, 3, &[0.0, -1.0, 0.0]));
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let traj =
            coupled_simulate(&obs, &model, Some(&aux), &policy, 100, &mut rng, None).unwrap();
        assert!(traj.max_observation_residual <= 1e-9);
        // H = N C here, so the two performance outputs coincide pathwise.
        for t in 0..=100 {
            let d = (&traj.outputs[t] - &traj.abstract_outputs[t]).abs().max();
            assert!(d <= 1e-9, "outputs diverged at t = {t}");
        }
    }

    #[test]
    fn coupled_run_is_deterministic() {
        let (obs, model, aux) = star_setup();
        let policy = Policy::linear(DMatrix::from_row_slice(1, 3, &[0.0, -1.0, 0.0]));
        let t1 = coupled_simulate(
            &obs, &model, Some(&aux), &policy, 50, &mut ChaCha12Rng::seed_from_u64(8), None,
        )
        .unwrap();
        let t2 = coupled_simulate(
            &obs, &model, Some(&aux), &policy, 50, &mut ChaCha12Rng::seed_from_u64(8), None,
        )
        .unwrap();
        assert_eq!(t1.states[50], t2.states[50]);
        assert_eq!(t1.abstract_states[50], t2.abstract_states[50]);
    }

    #[test]
    fn refined_input_equals_abstract_input_bitwise() {
        let (obs, model, aux) = star_setup();
        let policy = Policy::linear(DMatrix::from_row_slice(1, 3, &[0.0, -1.0, 0.0]));
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let traj =
            coupled_simulate(&obs, &model, Some(&aux), &policy, 20, &mut rng, None).unwrap();
        for t in 0..20 {
            let expected = policy
                .evaluate(t, &traj.abstract_states[t], &History::default())
                .unwrap();
            assert_eq!(traj.inputs[t], expected, "input differs at t = {t}");
        }
    }
}
