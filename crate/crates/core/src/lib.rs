//! Abstraction of linear Gaussian stochastic systems by knowledge
//! filtering and optimal Kalman filtering, with controller refinement
//! back onto the original system and satisfaction-probability
//! verification.
//!
//! The pipeline: pick an observation pair `(C, N)` with `N C = H` and
//! `q < n`, realize the observed process as an innovation process driven
//! by `q`-dimensional noise (the abstract model), design a controller on
//! the abstraction, then embed the abstract state inside a controller for
//! the original system so that specification satisfaction probabilities
//! transfer exactly.

pub mod dare;
pub mod format;
pub mod gaussian;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod refine;
pub mod verify;

#[cfg(test)]
pub(crate) mod testutil;

pub use dare::{
    build_invariant, build_invariant_star, posterior_after_auxiliary, solve_dare,
    AuxiliaryMeasurement, DareError, DareSolution,
};
pub use gaussian::{
    interval_probability, is_psd, Gaussian, GaussianError, GaussianSampler, JointGaussian,
};
pub use kalman::{
    build_a_priori_process, build_abstract_time_varying, innovation, posterior_estimates,
    riccati_schedule, APrioriProcess, AbstractModel, Flavor, KalmanError, MatrixSchedule,
    RiccatiSchedule,
};
pub use model::{
    attach_observation, satisfies, simulate, Assumption1Status, Bounds, History,
    LinearStochasticSystem, ModelError, ObservationStructure, ObservedSystem, Policy,
    SpecBounds, Specification, Trajectory,
};
pub use refine::{coupled_simulate, CoupledTrajectory, RefineError, RefinementSession};
pub use verify::{
    analytic_satisfaction, equivalence_report, monte_carlo, reduce_states,
    stacked_output_moments, stacked_output_moments_recursive, AnalyticReport, ClosedLoop,
    EquivalenceReport, Method, ProbabilityEstimate, StackedGaussian, StateReduction,
    StepProbability, VerifyError,
};
