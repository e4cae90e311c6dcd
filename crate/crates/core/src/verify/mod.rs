//! Satisfaction-probability computation (analytic where exact, Monte
//! Carlo otherwise), the stacked-moment equivalence oracle, and structural
//! state reduction.

mod moments;
mod reduce;

pub use reduce::{reduce_states, StateReduction};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dare::AuxiliaryMeasurement;
use crate::gaussian::{interval_probability, GaussianError};
use crate::kalman::{APrioriProcess, AbstractModel, KalmanError};
use crate::linalg;
use crate::model::{
    satisfies, simulate, LinearStochasticSystem, ModelError, ObservedSystem, Policy,
    Specification,
};
use crate::refine::{coupled_simulate, RefineError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("analytic verification supports only linear policies")]
    UnsupportedPolicy,
    #[error("specification is not box-shaped (black-box predicate present)")]
    NonBoxSpec,
    #[error("at least one Monte Carlo trial is required")]
    NoTrials,
    #[error("stacked moments cover horizon {have} but the specification needs {need}")]
    HorizonTooShort { need: usize, have: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// Exact Gaussian law of the stacked output trajectory `(z(0), ..., z(T))`
/// in time-major layout.
#[derive(Debug, Clone)]
pub struct StackedGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub horizon: usize,
    pub output_dim: usize,
}

impl StackedGaussian {
    /// Marginal `(mean, variance)` of output coordinate `j` at step `t`.
    pub fn marginal(&self, t: usize, j: usize) -> (f64, f64) {
        let idx = t * self.output_dim + j;
        (self.mean[idx], self.covariance[(idx, idx)])
    }
}

/// A closed loop whose stacked output law can be computed or sampled.
#[derive(Clone, Copy)]
pub enum ClosedLoop<'a> {
    /// The original system driven by a policy over its own state.
    Concrete { system: &'a LinearStochasticSystem, policy: &'a Policy },
    /// An abstract model driven by a policy over its own state.
    Abstract { model: &'a AbstractModel, policy: &'a Policy },
    /// The a priori innovation process (equivalence-testing intermediate).
    APriori { process: &'a APrioriProcess, policy: &'a Policy },
    /// The original system driven through the refinement: the policy sees
    /// the embedded abstract state. `aux` selects the starred
    /// initialization.
    Refined {
        observed: &'a ObservedSystem,
        model: &'a AbstractModel,
        aux: Option<&'a AuxiliaryMeasurement>,
        policy: &'a Policy,
    },
}

/// Exact stacked output moments over `t = 0..=horizon` via the affine map
/// of the primitive noise vector.
pub fn stacked_output_moments(
    closed_loop: &ClosedLoop<'_>,
    horizon: usize,
) -> Result<StackedGaussian, VerifyError> {
    let desc = moments::build_descriptor(closed_loop, horizon)?;
    Ok(moments::evaluate_affine(&desc))
}

/// Same moments via step-by-step propagation of the joint state/output
/// covariance; an independent accumulation kept as a double-entry check on
/// [`stacked_output_moments`].
pub fn stacked_output_moments_recursive(
    closed_loop: &ClosedLoop<'_>,
    horizon: usize,
) -> Result<StackedGaussian, VerifyError> {
    let desc = moments::build_descriptor(closed_loop, horizon)?;
    Ok(moments::evaluate_recursive(&desc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    AnalyticProduct,
    AnalyticMarginal,
    MonteCarlo,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::AnalyticProduct => "analytic-product",
            Method::AnalyticMarginal => "analytic-marginal",
            Method::MonteCarlo => "monte-carlo",
        })
    }
}

/// A satisfaction-probability estimate with a 95% interval.
#[derive(Debug, Clone)]
pub struct ProbabilityEstimate {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub trials: u64,
    pub seed: u64,
    pub method: Method,
}

/// Probability that one output coordinate stays inside its box at one step.
#[derive(Debug, Clone, Copy)]
pub struct StepProbability {
    pub time: usize,
    pub output_index: usize,
    pub probability: f64,
}

/// Analytic satisfaction result: the estimate plus the per-step marginal
/// table. When the constrained coordinates are correlated the product is
/// not exact; the interval then carries the Frechet bounds and `note`
/// recommends Monte Carlo.
#[derive(Debug, Clone)]
pub struct AnalyticReport {
    pub estimate: ProbabilityEstimate,
    pub per_step: Vec<StepProbability>,
    pub note: Option<String>,
}

/// Relative threshold below which cross-covariances between constrained
/// coordinates are treated as exact zeros.
const DIAGONAL_TOL: f64 = 1e-12;

/// Computes per-step marginal interval probabilities exactly. When the
/// stacked covariance restricted to the constrained coordinates is
/// diagonal, their product is the exact satisfaction probability
/// (method `analytic-product`); otherwise only the marginals are exact
/// (method `analytic-marginal`) and the joint probability is bracketed by
/// the Frechet bounds.
pub fn analytic_satisfaction(
    stacked: &StackedGaussian,
    spec: &Specification,
) -> Result<AnalyticReport, VerifyError> {
    if spec.predicate.is_some() {
        return Err(VerifyError::NonBoxSpec);
    }
    if stacked.horizon < spec.horizon() {
        return Err(VerifyError::HorizonTooShort {
            need: spec.horizon(),
            have: stacked.horizon,
        });
    }
    let p = stacked.output_dim;
    let (lo, hi) = spec.interval;

    // Constrained scalar coordinates: inside the interval and not (-inf, inf).
    let mut constrained: Vec<(usize, usize)> = Vec::new();
    let mut per_step = Vec::new();
    let mut product = 1.0f64;
    let mut violation_sum = 0.0f64;
    let mut min_prob = 1.0f64;
    for t in lo..=hi {
        let bounds = spec.bounds_at(t).expect("t inside interval");
        if bounds.len() != p {
            return Err(VerifyError::DimensionMismatch(format!(
                "specification constrains {} coordinates but output dimension is {p}",
                bounds.len()
            )));
        }
        for (j, b) in bounds.iter().enumerate() {
            if b.is_unbounded() {
                continue;
            }
            let (mean, var) = stacked.marginal(t, j);
            let prob = interval_probability(mean, var, b.lower, b.upper)?;
            per_step.push(StepProbability { time: t, output_index: j, probability: prob });
            constrained.push((t, j));
            product *= prob;
            violation_sum += 1.0 - prob;
            min_prob = min_prob.min(prob);
        }
    }

    if constrained.is_empty() {
        return Ok(AnalyticReport {
            estimate: ProbabilityEstimate {
                point: 1.0,
                ci_low: 1.0,
                ci_high: 1.0,
                trials: 0,
                seed: 0,
                method: Method::AnalyticProduct,
            },
            per_step,
            note: None,
        });
    }

    // Diagonality of the constrained submatrix decides exactness.
    let scale = constrained
        .iter()
        .map(|&(t, j)| stacked.marginal(t, j).1)
        .fold(0.0f64, f64::max);
    let tol = DIAGONAL_TOL * (1.0 + scale);
    let mut diagonal = true;
    'outer: for (a, &(ta, ja)) in constrained.iter().enumerate() {
        for &(tb, jb) in constrained.iter().skip(a + 1) {
            let ia = ta * p + ja;
            let ib = tb * p + jb;
            if stacked.covariance[(ia, ib)].abs() > tol {
                diagonal = false;
                break 'outer;
            }
        }
    }

    let estimate = if diagonal {
        ProbabilityEstimate {
            point: product,
            ci_low: product,
            ci_high: product,
            trials: 0,
            seed: 0,
            method: Method::AnalyticProduct,
        }
    } else {
        ProbabilityEstimate {
            point: product,
            ci_low: (1.0 - violation_sum).max(0.0),
            ci_high: min_prob,
            trials: 0,
            seed: 0,
            method: Method::AnalyticMarginal,
        }
    };
    let note = (!diagonal).then(|| {
        "constrained outputs are correlated across steps; marginals are exact but the joint \
         probability is only bracketed (Frechet bounds) - use Monte Carlo for a point estimate"
            .to_string()
    });
    Ok(AnalyticReport { estimate, per_step, note })
}

/// The per-trial stream: derived deterministically from `(seed, trial)`,
/// so results are independent of execution order and worker count.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn rollout_satisfies(
    closed_loop: &ClosedLoop<'_>,
    spec: &Specification,
    horizon: usize,
    rng: &mut ChaCha12Rng,
) -> Result<bool, VerifyError> {
    let outputs = match closed_loop {
        ClosedLoop::Concrete { system, policy } => {
            simulate(system, policy, horizon, rng)?.outputs
        }
        ClosedLoop::Abstract { model, policy } => model.simulate(policy, horizon, rng)?.outputs,
        ClosedLoop::APriori { process, policy } => {
            process.simulate(policy, horizon, rng)?.outputs
        }
        ClosedLoop::Refined { observed, model, aux, policy } => {
            coupled_simulate(observed, model, *aux, policy, horizon, rng, None)?.outputs
        }
    };
    Ok(satisfies(spec, &outputs)?)
}

/// Estimates the satisfaction probability from `trials` independent seeded
/// rollouts, with an exact (Clopper-Pearson) 95% binomial interval.
pub fn monte_carlo(
    closed_loop: &ClosedLoop<'_>,
    spec: &Specification,
    trials: u64,
    seed: u64,
) -> Result<ProbabilityEstimate, VerifyError> {
    if trials == 0 {
        return Err(VerifyError::NoTrials);
    }
    let horizon = spec.horizon();
    let outcomes: Result<Vec<bool>, VerifyError> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, i);
            rollout_satisfies(closed_loop, spec, horizon, &mut rng)
        })
        .collect();
    let successes = outcomes?.into_iter().filter(|&ok| ok).count() as u64;
    let (ci_low, ci_high) = clopper_pearson(successes, trials, 0.05);
    Ok(ProbabilityEstimate {
        point: successes as f64 / trials as f64,
        ci_low,
        ci_high,
        trials,
        seed,
        method: Method::MonteCarlo,
    })
}

/// Exact binomial 95% interval via Beta quantiles.
fn clopper_pearson(successes: u64, trials: u64, alpha: f64) -> (f64, f64) {
    use statrs::distribution::{Beta, ContinuousCDF};
    let s = successes as f64;
    let n = trials as f64;
    let low = if successes == 0 {
        0.0
    } else {
        Beta::new(s, n - s + 1.0).expect("valid shapes").inverse_cdf(alpha / 2.0)
    };
    let high = if successes == trials {
        1.0
    } else {
        Beta::new(s + 1.0, n - s).expect("valid shapes").inverse_cdf(1.0 - alpha / 2.0)
    };
    (low, high)
}

/// Outcome of comparing the stacked output laws of two closed loops.
#[derive(Debug, Clone, Copy)]
pub struct EquivalenceReport {
    pub pass: bool,
    /// Scaled max-norm deviation of the stacked means.
    pub max_mean_deviation: f64,
    /// Relative Frobenius deviation of the stacked covariances.
    pub max_cov_deviation: f64,
    pub tolerance: f64,
}

/// Compares stacked means (absolute, scaled) and covariances (relative
/// Frobenius) of two closed loops over the horizon.
pub fn equivalence_report(
    a: &ClosedLoop<'_>,
    b: &ClosedLoop<'_>,
    horizon: usize,
    tolerance: f64,
) -> Result<EquivalenceReport, VerifyError> {
    let ga = stacked_output_moments(a, horizon)?;
    let gb = stacked_output_moments(b, horizon)?;
    if ga.mean.len() != gb.mean.len() {
        return Err(VerifyError::DimensionMismatch(format!(
            "stacked outputs have dimensions {} and {}",
            ga.mean.len(),
            gb.mean.len()
        )));
    }
    let mean_scale = 1.0 + linalg::max_abs_vec(&ga.mean).max(linalg::max_abs_vec(&gb.mean));
    let max_mean_deviation = linalg::max_abs_vec(&(&ga.mean - &gb.mean)) / mean_scale;
    let cov_scale = 1.0 + ga.covariance.norm();
    let max_cov_deviation = (&ga.covariance - &gb.covariance).norm() / cov_scale;
    Ok(EquivalenceReport {
        pass: max_mean_deviation <= tolerance && max_cov_deviation <= tolerance,
        max_mean_deviation,
        max_cov_deviation,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dare::{build_invariant_star, solve_dare};
    use crate::model::{Bounds, SpecBounds};
    use crate::testutil::{diag, observed_two_row};
    use nalgebra::{DMatrix, DVector};

    fn example_spec() -> Specification {
        Specification::new(
            (1, 100),
            SpecBounds::Constant(vec![Bounds::new(-1.0, 1.0).unwrap()]),
            0.95,
        )
        .unwrap()
    }

    fn star_loop_parts() -> (ObservedSystem, AbstractModel, AuxiliaryMeasurement, Policy) {
        let obs = observed_two_row(diag(&[5.0, 5.0, 5.0]));
        let sol = solve_dare(&obs.system.a, &obs.obs.c, &obs.system.qw).unwrap();
        let (model, aux) = build_invariant_star(&obs, &sol).unwrap();
        let policy = Policy::linear(DMatrix::from_row_slice(1, 3, &[0.0, -1.0, 0.0]));
        (obs, model, aux, policy)
    }

    #[test]
    fn stacked_moments_deterministic_system() {
        // Zero dynamics, zero noise: stacked mean repeats H mu0, covariance 0.
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 1);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let qw = DMatrix::zeros(2, 2);
        let mu0 = DVector::from_row_slice(&[2.0, 3.0]);
        let system = LinearStochasticSystem::new(
            a,
            b,
            h,
            qw,
            crate::gaussian::Gaussian::point(mu0),
        )
        .unwrap();
        let policy = Policy::zero(1, 2);
        let g = stacked_output_moments(&ClosedLoop::Concrete { system: &system, policy: &policy }, 3)
            .unwrap();
        assert_eq!(g.mean[0], 5.0);
        assert_eq!(g.mean[1], 0.0);
        assert!(linalg::max_abs(&g.covariance) < 1e-15);
    }

    #[test]
    fn abstract_closed_loop_marginals_match_paper_values() {
        let (_, model, _, policy) = star_loop_parts();
        let g = stacked_output_moments(&ClosedLoop::Abstract { model: &model, policy: &policy }, 100)
            .unwrap();
        // zbar(t) ~ N(0, 0.05) for t >= 1, independent across time.
        for t in 1..=100 {
            let (mean, var) = g.marginal(t, 0);
            assert!(mean.abs() < 1e-12);
            assert!((var - 0.05).abs() < 1e-12, "var at t = {t} is {var}");
        }
        for t in 1..100 {
            assert!(g.covariance[(t, t + 1)].abs() < 1e-14);
        }
    }

    #[test]
    fn affine_and_recursive_routes_agree() {
        let (obs, model, aux, policy) = star_loop_parts();
        let loops: Vec<ClosedLoop> = vec![
            ClosedLoop::Concrete { system: &obs.system, policy: &policy },
            ClosedLoop::Abstract { model: &model, policy: &policy },
            ClosedLoop::Refined { observed: &obs, model: &model, aux: Some(&aux), policy: &policy },
        ];
        for cl in &loops {
            let fast = stacked_output_moments(cl, 12).unwrap();
            let slow = stacked_output_moments_recursive(cl, 12).unwrap();
            assert!(linalg::max_abs_vec(&(&fast.mean - &slow.mean)) < 1e-10);
            assert!(linalg::max_abs(&(&fast.covariance - &slow.covariance)) < 1e-10);
        }
    }

    #[test]
    fn analytic_satisfaction_product_path() {
        let (_, model, _, policy) = star_loop_parts();
        let g = stacked_output_moments(&ClosedLoop::Abstract { model: &model, policy: &policy }, 100)
            .unwrap();
        let report = analytic_satisfaction(&g, &example_spec()).unwrap();
        assert_eq!(report.estimate.method, Method::AnalyticProduct);
        assert!(report.note.is_none());
        // Per-step violation 7.744e-6, trajectory violation 7.741e-4.
        for sp in &report.per_step {
            assert!((1.0 - sp.probability - 7.744e-6).abs() < 1e-9);
        }
        assert!((1.0 - report.estimate.point - 7.741e-4).abs() < 1e-7);
    }

    #[test]
    fn analytic_satisfaction_unconstrained_is_one() {
        let (_, model, _, policy) = star_loop_parts();
        let g = stacked_output_moments(&ClosedLoop::Abstract { model: &model, policy: &policy }, 10)
            .unwrap();
        let spec = Specification::new(
            (0, 10),
            SpecBounds::Constant(vec![Bounds::unbounded()]),
            0.5,
        )
        .unwrap();
        let report = analytic_satisfaction(&g, &spec).unwrap();
        assert_eq!(report.estimate.point, 1.0);
        assert!(report.per_step.is_empty());
    }

    #[test]
    fn analytic_satisfaction_correlated_falls_back_to_marginals() {
        // Scalar AR(1): consecutive outputs share most of their mass.
        let system = LinearStochasticSystem::new(
            DMatrix::from_element(1, 1, 0.9),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            crate::gaussian::Gaussian::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap(),
        )
        .unwrap();
        let policy = Policy::zero(1, 1);
        let g = stacked_output_moments(&ClosedLoop::Concrete { system: &system, policy: &policy }, 10)
            .unwrap();
        let spec = Specification::new(
            (1, 10),
            SpecBounds::Constant(vec![Bounds::new(-4.0, 4.0).unwrap()]),
            0.5,
        )
        .unwrap();
        let report = analytic_satisfaction(&g, &spec).unwrap();
        assert_eq!(report.estimate.method, Method::AnalyticMarginal);
        assert!(report.note.is_some());
        assert!(report.estimate.ci_low <= report.estimate.point);
        assert!(report.estimate.point <= report.estimate.ci_high);
    }

    #[test]
    fn analytic_satisfaction_rejects_predicates() {
        let (_, model, _, policy) = star_loop_parts();
        let g = stacked_output_moments(&ClosedLoop::Abstract { model: &model, policy: &policy }, 10)
            .unwrap();
        let spec = Specification::new(
            (1, 10),
            SpecBounds::Constant(vec![Bounds::new(-1.0, 1.0).unwrap()]),
            0.95,
        )
        .unwrap()
        .with_predicate(std::sync::Arc::new(|_: &[DVector<f64>]| true));
        assert!(matches!(analytic_satisfaction(&g, &spec), Err(VerifyError::NonBoxSpec)));
    }

    #[test]
    fn monte_carlo_zero_success_edge() {
        // Deterministic output 0 with box [1, 1]: estimate 0, CI consistent.
        let a = DMatrix::zeros(1, 1);
        let b = DMatrix::zeros(1, 1);
        let h = DMatrix::identity(1, 1);
        let qw = DMatrix::zeros(1, 1);
        let system = LinearStochasticSystem::new(
            a,
            b,
            h,
            qw,
            crate::gaussian::Gaussian::point(DVector::zeros(1)),
        )
        .unwrap();
        let policy = Policy::zero(1, 1);
        let spec = Specification::new(
            (0, 3),
            SpecBounds::Constant(vec![Bounds::new(1.0, 1.0).unwrap()]),
            0.5,
        )
        .unwrap();
        let est = monte_carlo(
            &ClosedLoop::Concrete { system: &system, policy: &policy },
            &spec,
            200,
            7,
        )
        .unwrap();
        assert_eq!(est.point, 0.0);
        assert_eq!(est.ci_low, 0.0);
        assert!(est.ci_high > 0.0 && est.ci_high < 0.05);
    }

    #[test]
    fn monte_carlo_rejects_zero_trials() {
        let (obs, model, aux, policy) = star_loop_parts();
        let cl = ClosedLoop::Refined { observed: &obs, model: &model, aux: Some(&aux), policy: &policy };
        assert!(matches!(
            monte_carlo(&cl, &example_spec(), 0, 1),
            Err(VerifyError::NoTrials)
        ));
    }

    #[test]
    fn monte_carlo_is_order_independent_and_seeded() {
        let (obs, model, aux, policy) = star_loop_parts();
        let cl = ClosedLoop::Refined { observed: &obs, model: &model, aux: Some(&aux), policy: &policy };
        let spec = example_spec();
        let e1 = monte_carlo(&cl, &spec, 500, 42).unwrap();
        let e2 = monte_carlo(&cl, &spec, 500, 42).unwrap();
        assert_eq!(e1.point, e2.point);
        assert_eq!(e1.ci_low, e2.ci_low);
        assert!(e1.ci_low <= e1.point && e1.point <= e1.ci_high);
    }

    #[test]
    fn monte_carlo_ci_shrinks_with_trials() {
        let (obs, model, aux, policy) = star_loop_parts();
        let cl = ClosedLoop::Refined { observed: &obs, model: &model, aux: Some(&aux), policy: &policy };
        let spec = example_spec();
        let e1 = monte_carlo(&cl, &spec, 1000, 3).unwrap();
        let e2 = monte_carlo(&cl, &spec, 2000, 3).unwrap();
        let w1 = e1.ci_high - e1.ci_low;
        let w2 = e2.ci_high - e2.ci_low;
        // Roughly 1/sqrt(2), generously bracketed (binomial noise).
        assert!(w2 < w1, "CI width did not shrink: {w1} -> {w2}");
    }

    #[test]
    fn equivalence_report_self_comparison() {
        let (obs, _, _, policy) = star_loop_parts();
        let cl = ClosedLoop::Concrete { system: &obs.system, policy: &policy };
        let report = equivalence_report(&cl, &cl, 10, 1e-12).unwrap();
        assert!(report.pass);
        assert_eq!(report.max_mean_deviation, 0.0);
        assert_eq!(report.max_cov_deviation, 0.0);
    }

    #[test]
    fn equivalence_report_detects_perturbation() {
        let (obs, model, aux, policy) = star_loop_parts();
        let mut perturbed_sys = obs.system.clone();
        perturbed_sys.qw[(0, 0)] += 0.1;
        let a = ClosedLoop::Concrete { system: &perturbed_sys, policy: &Policy::zero(1, 3) };
        let b = ClosedLoop::Refined {
            observed: &obs,
            model: &model,
            aux: Some(&aux),
            policy: &Policy::zero(1, 3),
        };
        let report = equivalence_report(&a, &b, 10, 1e-8).unwrap();
        assert!(!report.pass);
        assert!(report.max_cov_deviation > 1e-3);
        let _ = policy;
    }
}
