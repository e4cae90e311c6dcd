//! Domain types for the original system, its knowledge-filtered
//! observation structure, policies, trajectories and bounded-horizon
//! output specifications, plus plain forward simulation.
//!
//! The system is `x(t+1) = A x(t) + B u(t) + w(t)`, `z(t) = H x(t)` with
//! `x(0) ~ N(mu0, Sigma0)` and `w(t) ~ N(0, Qw)`. A knowledge filter is a
//! pair `(C, N)` with `N C = H` and `q < n` exposing only `y(t) = C x(t)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::gaussian::Gaussian;
use crate::linalg;

/// Strictness margin used for the "strictly positive definite" premises.
pub const PD_MARGIN: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Qw is not symmetric positive semidefinite")]
    NoiseNotPsd,
    #[error("N C does not reproduce H: max deviation {deviation:.3e} exceeds {tolerance:.3e}")]
    FactorizationMismatch { deviation: f64, tolerance: f64 },
    #[error("observation dimension q = {q} does not reduce the state dimension n = {n}")]
    NotAReduction { q: usize, n: usize },
    #[error("invalid specification: {0}")]
    InvalidSpecification(String),
    #[error("trajectory of length {got} is too short for the specification horizon {needed}")]
    HorizonTooShort { needed: usize, got: usize },
    #[error("policy schedule ends at step {len} but step {t} was requested")]
    OutOfSchedule { t: usize, len: usize },
}

/// The original linear Gaussian system.
#[derive(Debug, Clone)]
pub struct LinearStochasticSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub qw: DMatrix<f64>,
    pub init: Gaussian,
}

impl LinearStochasticSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        h: DMatrix<f64>,
        qw: DMatrix<f64>,
        init: Gaussian,
    ) -> Result<Self, ModelError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "B has {} rows, expected {n}",
                b.nrows()
            )));
        }
        if h.ncols() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "H has {} columns, expected {n}",
                h.ncols()
            )));
        }
        if qw.nrows() != n || qw.ncols() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "Qw is {}x{}, expected {n}x{n}",
                qw.nrows(),
                qw.ncols()
            )));
        }
        if init.dim() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "initial law has dimension {}, expected {n}",
                init.dim()
            )));
        }
        if !linalg::is_psd(&qw, crate::gaussian::PSD_TOL) {
            return Err(ModelError::NoiseNotPsd);
        }
        Ok(Self { a, b, h, qw, init })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.h.nrows()
    }
}

/// Knowledge filter `(C, N)` with `N C = H` and `q < n`.
#[derive(Debug, Clone)]
pub struct ObservationStructure {
    pub c: DMatrix<f64>,
    pub n: DMatrix<f64>,
}

impl ObservationStructure {
    pub fn q(&self) -> usize {
        self.c.nrows()
    }
}

/// Status of the strict positive-definiteness premise on
/// `C Sigma0 C^T` and `C Qw C^T`.
#[derive(Debug, Clone, Copy)]
pub struct Assumption1Status {
    pub holds: bool,
    pub min_eig_c_sigma0_ct: f64,
    pub min_eig_c_qw_ct: f64,
}

impl fmt::Display for Assumption1Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (min eig C Sigma0 C^T = {:.3e}, min eig C Qw C^T = {:.3e})",
            if self.holds { "holds" } else { "violated" },
            self.min_eig_c_sigma0_ct,
            self.min_eig_c_qw_ct
        )
    }
}

/// A validated pairing of a system with a knowledge filter.
#[derive(Debug, Clone)]
pub struct ObservedSystem {
    pub system: LinearStochasticSystem,
    pub obs: ObservationStructure,
    pub assumption1: Assumption1Status,
}

impl ObservedSystem {
    pub fn q(&self) -> usize {
        self.obs.q()
    }
}

/// Validates `N C = H` and `q < n`, and reports the Assumption-1 status
/// (flagged, not fatal: the DARE path may still apply when it fails).
pub fn attach_observation(
    system: LinearStochasticSystem,
    c: DMatrix<f64>,
    n_map: DMatrix<f64>,
) -> Result<ObservedSystem, ModelError> {
    let n = system.state_dim();
    let p = system.output_dim();
    let q = c.nrows();
    if c.ncols() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "C has {} columns, expected {n}",
            c.ncols()
        )));
    }
    if n_map.nrows() != p || n_map.ncols() != q {
        return Err(ModelError::DimensionMismatch(format!(
            "N is {}x{}, expected {p}x{q}",
            n_map.nrows(),
            n_map.ncols()
        )));
    }
    if q >= n {
        return Err(ModelError::NotAReduction { q, n });
    }
    let deviation = linalg::max_abs(&(&n_map * &c - &system.h));
    let tolerance = 1e-10 * (1.0 + linalg::max_abs(&system.h));
    if deviation > tolerance {
        return Err(ModelError::FactorizationMismatch { deviation, tolerance });
    }
    let c_sigma0_ct = &c * system.init.covariance() * c.transpose();
    let c_qw_ct = &c * &system.qw * c.transpose();
    let min_eig_c_sigma0_ct = linalg::min_eigenvalue(&c_sigma0_ct);
    let min_eig_c_qw_ct = linalg::min_eigenvalue(&c_qw_ct);
    let holds = linalg::is_strictly_pd(&c_sigma0_ct, PD_MARGIN)
        && linalg::is_strictly_pd(&c_qw_ct, PD_MARGIN);
    Ok(ObservedSystem {
        system,
        obs: ObservationStructure { c, n: n_map },
        assumption1: Assumption1Status {
            holds,
            min_eig_c_sigma0_ct,
            min_eig_c_qw_ct,
        },
    })
}

/// State/input history available to black-box policies.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

/// Callback type for black-box policies.
pub type PolicyFn = Arc<dyn Fn(&History) -> DVector<f64> + Send + Sync>;

/// A control policy over the state of the model it is declared against.
#[derive(Clone)]
pub enum Policy {
    TimeInvariantLinear {
        gain: DMatrix<f64>,
        offset: DVector<f64>,
    },
    TimeVaryingLinear {
        schedule: Vec<(DMatrix<f64>, DVector<f64>)>,
    },
    BlackBox(PolicyFn),
}

impl fmt::Debug for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::TimeInvariantLinear { gain, .. } => f
                .debug_struct("TimeInvariantLinear")
                .field("dims", &(gain.nrows(), gain.ncols()))
                .finish(),
            Policy::TimeVaryingLinear { schedule } => f
                .debug_struct("TimeVaryingLinear")
                .field("steps", &schedule.len())
                .finish(),
            Policy::BlackBox(_) => f.write_str("BlackBox"),
        }
    }
}

impl Policy {
    /// Constant linear feedback with zero offset.
    pub fn linear(gain: DMatrix<f64>) -> Self {
        let m = gain.nrows();
        Policy::TimeInvariantLinear {
            gain,
            offset: DVector::zeros(m),
        }
    }

    /// The zero policy for an `m`-input model with `state_dim` states.
    pub fn zero(m: usize, state_dim: usize) -> Self {
        Policy::linear(DMatrix::zeros(m, state_dim))
    }

    /// Open-loop input sequence (zero gains, per-step offsets).
    pub fn open_loop(state_dim: usize, inputs: Vec<DVector<f64>>) -> Self {
        let schedule = inputs
            .into_iter()
            .map(|u| (DMatrix::zeros(u.len(), state_dim), u))
            .collect();
        Policy::TimeVaryingLinear { schedule }
    }

    /// Evaluates the policy at step `t` on `state`, with `history` made
    /// available to black-box policies.
    pub fn evaluate(
        &self,
        t: usize,
        state: &DVector<f64>,
        history: &History,
    ) -> Result<DVector<f64>, ModelError> {
        match self {
            Policy::TimeInvariantLinear { gain, offset } => {
                check_gain_dim(gain, state)?;
                Ok(gain * state + offset)
            }
            Policy::TimeVaryingLinear { schedule } => {
                let (gain, offset) = schedule
                    .get(t)
                    .ok_or(ModelError::OutOfSchedule { t, len: schedule.len() })?;
                check_gain_dim(gain, state)?;
                Ok(gain * state + offset)
            }
            Policy::BlackBox(f) => Ok(f(history)),
        }
    }

    /// Linear coefficients `(F_t, g_t)` for the analytic paths; `None` for
    /// black-box policies.
    pub fn linear_coefficients(
        &self,
        t: usize,
    ) -> Option<Result<(&DMatrix<f64>, &DVector<f64>), ModelError>> {
        match self {
            Policy::TimeInvariantLinear { gain, offset } => Some(Ok((gain, offset))),
            Policy::TimeVaryingLinear { schedule } => Some(
                schedule
                    .get(t)
                    .map(|(g, o)| (g, o))
                    .ok_or(ModelError::OutOfSchedule { t, len: schedule.len() }),
            ),
            Policy::BlackBox(_) => None,
        }
    }
}

fn check_gain_dim(gain: &DMatrix<f64>, state: &DVector<f64>) -> Result<(), ModelError> {
    if gain.ncols() != state.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "policy gain has {} columns but state has dimension {}",
            gain.ncols(),
            state.len()
        )));
    }
    Ok(())
}

/// Closed per-output bounds for one time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self, ModelError> {
        if lower > upper || lower.is_nan() || upper.is_nan() {
            return Err(ModelError::InvalidSpecification(format!(
                "lower bound {lower} exceeds upper bound {upper}"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded() -> Self {
        Self { lower: f64::NEG_INFINITY, upper: f64::INFINITY }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower == f64::NEG_INFINITY && self.upper == f64::INFINITY
    }
}

/// Per-output bounds, either constant over the interval or listed per step.
#[derive(Debug, Clone)]
pub enum SpecBounds {
    Constant(Vec<Bounds>),
    PerStep(Vec<Vec<Bounds>>),
}

/// Predicate over the full output trajectory, for constraints that are not
/// box-shaped. Analytic verification rejects specifications carrying one.
pub type TrajectoryPredicate = Arc<dyn Fn(&[DVector<f64>]) -> bool + Send + Sync>;

/// Bounded-horizon output constraint: every step `t` in the closed interval
/// must keep each output coordinate inside its box, with target
/// satisfaction probability `p`.
#[derive(Clone)]
pub struct Specification {
    pub interval: (usize, usize),
    pub bounds: SpecBounds,
    pub target_probability: f64,
    pub predicate: Option<TrajectoryPredicate>,
}

impl fmt::Debug for Specification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Specification")
            .field("interval", &self.interval)
            .field("target_probability", &self.target_probability)
            .field("has_predicate", &self.predicate.is_some())
            .finish()
    }
}

impl Specification {
    pub fn new(
        interval: (usize, usize),
        bounds: SpecBounds,
        target_probability: f64,
    ) -> Result<Self, ModelError> {
        let (lo, hi) = interval;
        if lo > hi {
            return Err(ModelError::InvalidSpecification(format!(
                "interval start {lo} exceeds end {hi}"
            )));
        }
        if !(0.0..=1.0).contains(&target_probability) {
            return Err(ModelError::InvalidSpecification(format!(
                "target probability {target_probability} outside [0, 1]"
            )));
        }
        if let SpecBounds::PerStep(rows) = &bounds {
            let expected = hi - lo + 1;
            if rows.len() != expected {
                return Err(ModelError::InvalidSpecification(format!(
                    "per-step bounds list has {} rows, expected {expected}",
                    rows.len()
                )));
            }
        }
        Ok(Self { interval, bounds, target_probability, predicate: None })
    }

    pub fn with_predicate(mut self, predicate: TrajectoryPredicate) -> Self {
        self.predicate = Some(predicate);
        self
    }

    /// Bounds applying at step `t`, or `None` when `t` is outside the interval.
    pub fn bounds_at(&self, t: usize) -> Option<&[Bounds]> {
        let (lo, hi) = self.interval;
        if t < lo || t > hi {
            return None;
        }
        match &self.bounds {
            SpecBounds::Constant(row) => Some(row),
            SpecBounds::PerStep(rows) => Some(&rows[t - lo]),
        }
    }

    pub fn horizon(&self) -> usize {
        self.interval.1
    }
}

/// A finite execution: `T+1` states and outputs, `T` inputs and noises.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
    pub observations: Option<Vec<DVector<f64>>>,
    /// Noise draws `w(0..T-1)`, stored so the model equations can be
    /// re-checked bit for bit.
    pub noises: Vec<DVector<f64>>,
}

/// Rolls the system forward for `horizon` steps under `policy`.
///
/// Deterministic given the stream: draws `x(0)` first, then one noise
/// vector per step.
pub fn simulate<R: Rng + ?Sized>(
    system: &LinearStochasticSystem,
    policy: &Policy,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory, ModelError> {
    let init_sampler = system.init.sampler();
    let noise = Gaussian::new(DVector::zeros(system.state_dim()), system.qw.clone())
        .expect("validated at construction");
    let noise_sampler = noise.sampler();

    let mut states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon);
    let mut outputs = Vec::with_capacity(horizon + 1);
    let mut noises = Vec::with_capacity(horizon);
    let mut history = History::default();

    let mut x = init_sampler.draw(rng);
    for t in 0..horizon {
        outputs.push(&system.h * &x);
        states.push(x.clone());
        history.states.push(x.clone());
        let u = policy.evaluate(t, &x, &history)?;
        if u.len() != system.input_dim() {
            return Err(ModelError::DimensionMismatch(format!(
                "policy returned input of dimension {}, expected {}",
                u.len(),
                system.input_dim()
            )));
        }
        let w = noise_sampler.draw(rng);
        x = &system.a * &x + &system.b * &u + &w;
        history.inputs.push(u.clone());
        inputs.push(u);
        noises.push(w);
    }
    outputs.push(&system.h * &x);
    states.push(x);

    Ok(Trajectory { states, inputs, outputs, observations: None, noises })
}

/// Whether the output trajectory satisfies the specification: every
/// constrained step inside its closed box, and the black-box predicate
/// (when present) true.
pub fn satisfies(spec: &Specification, outputs: &[DVector<f64>]) -> Result<bool, ModelError> {
    let needed = spec.horizon() + 1;
    if outputs.len() < needed {
        return Err(ModelError::HorizonTooShort { needed, got: outputs.len() });
    }
    let (lo, hi) = spec.interval;
    for t in lo..=hi {
        let bounds = spec.bounds_at(t).expect("t inside interval");
        let z = &outputs[t];
        if z.len() != bounds.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "output has dimension {} but specification constrains {} coordinates",
                z.len(),
                bounds.len()
            )));
        }
        for (j, b) in bounds.iter().enumerate() {
            if !b.contains(z[j]) {
                return Ok(false);
            }
        }
    }
    if let Some(pred) = &spec.predicate {
        if !pred(outputs) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{diag, shift_system};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn c1() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    #[test]
    fn attach_observation_accepts_example_filter() {
        let sys = shift_system(diag(&[5.0, 5.0, 5.0]));
        let n1 = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let observed = attach_observation(sys, c1(), n1).unwrap();
        assert!(observed.assumption1.holds);
        assert!((observed.assumption1.min_eig_c_sigma0_ct - 5.0).abs() < 1e-12);
        assert!((observed.assumption1.min_eig_c_qw_ct - 0.05).abs() < 1e-12);
    }

    #[test]
    fn attach_observation_rejects_bad_factorization() {
        let sys = shift_system(diag(&[5.0, 5.0, 5.0]));
        let bad_n = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(matches!(
            attach_observation(sys, c1(), bad_n),
            Err(ModelError::FactorizationMismatch { .. })
        ));
    }

    #[test]
    fn attach_observation_rejects_non_reduction() {
        let sys = shift_system(diag(&[5.0, 5.0, 5.0]));
        let c = DMatrix::identity(3, 3);
        let n = DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]);
        assert!(matches!(
            attach_observation(sys, c, n),
            Err(ModelError::NotAReduction { q: 3, n: 3 })
        ));
    }

    #[test]
    fn attach_observation_coarsest_filter() {
        // C = H, N = I is always accepted when p < n.
        let sys = shift_system(diag(&[5.0, 5.0, 5.0]));
        let c = sys.h.clone();
        let n = DMatrix::identity(1, 1);
        let observed = attach_observation(sys, c, n).unwrap();
        assert_eq!(observed.q(), 1);
    }

    #[test]
    fn simulate_deterministic_system() {
        // Qw = 0, Sigma0 = 0, A = 0, zero policy: x(0) = mu0, then 0.
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 1);
        let h = DMatrix::identity(2, 2);
        let qw = DMatrix::zeros(2, 2);
        let mu0 = DVector::from_row_slice(&[3.0, -1.0]);
        let sys =
            LinearStochasticSystem::new(a, b, h, qw, Gaussian::point(mu0.clone())).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let traj = simulate(&sys, &Policy::zero(1, 2), 3, &mut rng).unwrap();
        assert_eq!(traj.states[0], mu0);
        for t in 1..=3 {
            assert_eq!(traj.states[t], DVector::zeros(2));
        }
    }

    #[test]
    fn simulate_same_seed_identical() {
        let sys = shift_system(diag(&[5.0, 5.0, 5.0]));
        let policy = Policy::zero(1, 3);
        let t1 = simulate(&sys, &policy, 10, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        let t2 = simulate(&sys, &policy, 10, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        for t in 0..=10 {
            assert_eq!(t1.states[t], t2.states[t]);
        }
    }

    #[test]
    fn simulate_recovers_model_equations_bitwise() {
        let sys = shift_system(diag(&[5.0, 5.0, 5.0]));
        let policy = Policy::linear(DMatrix::from_row_slice(1, 3, &[0.1, -0.2, 0.3]));
        let traj = simulate(&sys, &policy, 20, &mut ChaCha12Rng::seed_from_u64(11)).unwrap();
        for t in 0..20 {
            let recomputed = &sys.a * &traj.states[t] + &sys.b * &traj.inputs[t] + &traj.noises[t];
            assert_eq!(recomputed, traj.states[t + 1]);
        }
    }

    #[test]
    fn simulate_variance_matches_moment_recursion() {
        // Zero input, T = 2: Var(z(2)) = Var(x1(0)) + Var(w2(0)) + Var(w3(1))
        //                              = 5 + 1 + 0.05 = 6.05.
        let sys = shift_system(diag(&[5.0, 5.0, 5.0]));
        let policy = Policy::zero(1, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let traj = simulate(&sys, &policy, 2, &mut rng).unwrap();
            let z2 = traj.outputs[2][0];
            sum += z2;
            sq += z2 * z2;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = sq / nf - mean * mean;
        let want = 6.05;
        let se = (2.0 * want * want / nf).sqrt();
        assert!((var - want).abs() < 5.0 * se, "var {var} vs {want}");
    }

    #[test]
    fn satisfies_box_and_boundary() {
        let spec = Specification::new(
            (1, 100),
            SpecBounds::Constant(vec![Bounds::new(-1.0, 1.0).unwrap()]),
            0.95,
        )
        .unwrap();
        let zeros: Vec<_> = (0..=100).map(|_| DVector::zeros(1)).collect();
        assert!(satisfies(&spec, &zeros).unwrap());

        let mut bad = zeros.clone();
        bad[50] = DVector::from_row_slice(&[1.5]);
        assert!(!satisfies(&spec, &bad).unwrap());

        // Closed intervals: the boundary itself satisfies.
        let boundary: Vec<_> = (0..=100).map(|_| DVector::from_row_slice(&[1.0])).collect();
        assert!(satisfies(&spec, &boundary).unwrap());
    }

    #[test]
    fn satisfies_horizon_too_short() {
        let spec = Specification::new(
            (1, 10),
            SpecBounds::Constant(vec![Bounds::new(-1.0, 1.0).unwrap()]),
            0.9,
        )
        .unwrap();
        let outputs: Vec<_> = (0..=5).map(|_| DVector::zeros(1)).collect();
        assert!(matches!(
            satisfies(&spec, &outputs),
            Err(ModelError::HorizonTooShort { needed: 11, got: 6 })
        ));
    }

    #[test]
    fn satisfies_predicate_hook() {
        let spec = Specification::new(
            (0, 2),
            SpecBounds::Constant(vec![Bounds::unbounded()]),
            0.5,
        )
        .unwrap()
        .with_predicate(Arc::new(|outputs: &[DVector<f64>]| outputs[0][0] > 0.0));
        let pos: Vec<_> = (0..=2).map(|_| DVector::from_row_slice(&[1.0])).collect();
        let neg: Vec<_> = (0..=2).map(|_| DVector::from_row_slice(&[-1.0])).collect();
        assert!(satisfies(&spec, &pos).unwrap());
        assert!(!satisfies(&spec, &neg).unwrap());
    }

    #[test]
    fn spec_rejects_inverted_interval() {
        assert!(Specification::new(
            (5, 1),
            SpecBounds::Constant(vec![Bounds::unbounded()]),
            0.5
        )
        .is_err());
        assert!(Bounds::new(1.0, -1.0).is_err());
    }
}
