//! Shared generators for randomized integration tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use stochabs_core::gaussian::Gaussian;
use stochabs_core::linalg;
use stochabs_core::model::{attach_observation, LinearStochasticSystem, ObservedSystem, Policy};

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn random_vector<R: Rng>(rng: &mut R, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Random symmetric PD matrix `G G^T / n + ridge I`.
pub fn random_pd<R: Rng>(rng: &mut R, n: usize, ridge: f64) -> DMatrix<f64> {
    let g = random_matrix(rng, n, n);
    linalg::symmetrize(&(&g * g.transpose() / n as f64)) + DMatrix::identity(n, n) * ridge
}

/// Random system with `n <= 4`, `q < n`, stable-ish `A`, PD `Qw` and
/// `Sigma0` (the identity ridge keeps Assumption 1 satisfied for any
/// full-row-rank `C`), and `H = N C` by construction.
pub fn random_observed<R: Rng>(rng: &mut R) -> ObservedSystem {
    let n = rng.random_range(2..=4usize);
    let q = rng.random_range(1..n);
    let p = rng.random_range(1..=q);
    let m = rng.random_range(1..=2usize);

    let raw = random_matrix(rng, n, n);
    let rho = linalg::spectral_radius(&raw).max(0.1);
    let a = raw * (0.9 / rho);
    let b = random_matrix(rng, n, m);
    let c = random_matrix(rng, q, n);
    let n_map = random_matrix(rng, p, q);
    let h = &n_map * &c;
    let qw = random_pd(rng, n, 0.1);
    let sigma0 = random_pd(rng, n, 0.1);
    let mu0 = random_vector(rng, n);
    let system =
        LinearStochasticSystem::new(a, b, h, qw, Gaussian::new(mu0, sigma0).unwrap()).unwrap();
    attach_observation(system, c, n_map).unwrap()
}

/// Random time-varying linear policy (gains and offsets) over a
/// `state_dim`-dimensional state.
pub fn random_policy<R: Rng>(
    rng: &mut R,
    m: usize,
    state_dim: usize,
    horizon: usize,
) -> Policy {
    let schedule = (0..horizon)
        .map(|_| (random_matrix(rng, m, state_dim) * 0.3, random_vector(rng, m) * 0.5))
        .collect();
    Policy::TimeVaryingLinear { schedule }
}

/// Random deterministic input sequence (zero gains): the open-loop case
/// where output-law equivalence across realizations holds for all models.
pub fn random_open_loop<R: Rng>(
    rng: &mut R,
    m: usize,
    state_dim: usize,
    horizon: usize,
) -> Policy {
    let inputs = (0..horizon).map(|_| random_vector(rng, m)).collect();
    Policy::open_loop(state_dim, inputs)
}
