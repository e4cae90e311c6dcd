//! Multivariate Gaussian primitives: representation, conditioning,
//! sampling and scalar interval probabilities.
//!
//! Singular covariances are first class throughout: degenerate initial
//! laws such as `diag(0, 5, 5)` arise routinely from conditioning, so
//! sampling factorizes by eigendecomposition (clipping tiny negative
//! eigenvalues to zero) instead of insisting on a Cholesky factor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg;

/// Tolerance scale for the PSD eigenvalue check on covariances.
pub const PSD_TOL: f64 = 1e-9;
/// Relative symmetry tolerance for covariances.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Condition-number cap distinguishing "singular by modeling" from roundoff.
pub const CONDITION_CAP: f64 = 1e12;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("covariance is not symmetric PSD: {0}")]
    NotPsd(String),
    #[error("observed block is numerically singular (condition number {cond:.3e} exceeds {CONDITION_CAP:.0e})")]
    SingularObservationBlock { cond: f64 },
    #[error("invalid interval: lower {lower} exceeds upper {upper}")]
    InvalidInterval { lower: f64, upper: f64 },
}

/// A multivariate Gaussian `N(mean, covariance)` with symmetric PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl Gaussian {
    /// Validates symmetry and positive semidefiniteness (within tolerance)
    /// before accepting the pair.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, GaussianError> {
        if covariance.nrows() != covariance.ncols() {
            return Err(GaussianError::DimensionMismatch(format!(
                "covariance is {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if mean.len() != covariance.nrows() {
            return Err(GaussianError::DimensionMismatch(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let asym = linalg::asymmetry(&covariance);
        if asym > SYMMETRY_TOL * linalg::max_abs(&covariance) {
            return Err(GaussianError::NotPsd(format!(
                "max asymmetry {asym:.3e} exceeds tolerance"
            )));
        }
        if mean.len() > 0 {
            let ev = linalg::symmetric_eigenvalues(&covariance);
            let scale = ev.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if ev[0] < -PSD_TOL * (1.0 + scale) {
                return Err(GaussianError::NotPsd(format!(
                    "min eigenvalue {:.3e}",
                    ev[0]
                )));
            }
        }
        Ok(Self { mean, covariance })
    }

    /// Point mass at `mean` (zero covariance).
    pub fn point(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            covariance: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Draws one sample as `mean + L xi` with `L L^T = covariance`.
    ///
    /// Builds the factor on every call; use [`Gaussian::sampler`] in loops.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.sampler().draw(rng)
    }

    /// Precomputes the eigendecomposition factor for repeated sampling.
    pub fn sampler(&self) -> GaussianSampler {
        GaussianSampler::new(self)
    }
}

/// Reusable sampling factor `L` with `L L^T = covariance`.
///
/// Negative eigenvalues (roundoff on singular covariances) are clipped to
/// zero, so degenerate directions reproduce the mean exactly.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    fn new(g: &Gaussian) -> Self {
        let d = g.dim();
        if d == 0 || linalg::max_abs(&g.covariance) == 0.0 {
            return Self {
                mean: g.mean.clone(),
                factor: DMatrix::zeros(d, d),
            };
        }
        let eig = linalg::symmetrize(&g.covariance).symmetric_eigen();
        let mut factor = eig.eigenvectors;
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            let s = if lambda > 0.0 { lambda.sqrt() } else { 0.0 };
            factor.column_mut(j).scale_mut(s);
        }
        Self {
            mean: g.mean.clone(),
            factor,
        }
    }

    /// `mean + L xi` with `xi` a vector of `dim` independent standard normals.
    ///
    /// Always consumes exactly `dim` draws from the stream, so the stream
    /// position is independent of the covariance rank.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.mean.len();
        let xi = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
        &self.mean + &self.factor * xi
    }
}

/// A jointly Gaussian vector partitioned into named blocks.
#[derive(Debug, Clone)]
pub struct JointGaussian {
    blocks: Vec<(String, usize)>,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl JointGaussian {
    pub fn new(
        blocks: Vec<(String, usize)>,
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
    ) -> Result<Self, GaussianError> {
        let total: usize = blocks.iter().map(|(_, d)| d).sum();
        if total != mean.len() {
            return Err(GaussianError::DimensionMismatch(format!(
                "blocks sum to {total} but mean has length {}",
                mean.len()
            )));
        }
        // Reuse the covariance validation.
        let g = Gaussian::new(mean, covariance)?;
        Ok(Self {
            blocks,
            mean: g.mean,
            covariance: g.covariance,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    fn block_range(&self, name: &str) -> Option<(usize, usize)> {
        let mut offset = 0;
        for (n, d) in &self.blocks {
            if n == name {
                return Some((offset, *d));
            }
            offset += d;
        }
        None
    }

    /// Conditions on `observed_block = observation` and returns the Gaussian
    /// law of the remaining blocks (in their original order):
    /// mean `mu_x + S_xy S_yy^{-1} (y - mu_y)`,
    /// covariance `S_xx - S_xy S_yy^{-1} S_yx`, re-symmetrized.
    pub fn condition(
        &self,
        observed_block: &str,
        observation: &DVector<f64>,
    ) -> Result<Gaussian, GaussianError> {
        let (start, len) = self.block_range(observed_block).ok_or_else(|| {
            GaussianError::DimensionMismatch(format!("no block named '{observed_block}'"))
        })?;
        if observation.len() != len {
            return Err(GaussianError::DimensionMismatch(format!(
                "block '{observed_block}' has dimension {len} but observation has length {}",
                observation.len()
            )));
        }
        let rest: Vec<usize> = (0..self.dim()).filter(|i| *i < start || *i >= start + len).collect();
        let obs: Vec<usize> = (start..start + len).collect();

        let sigma_yy = self.covariance.select_rows(&obs).select_columns(&obs);
        let cond = linalg::symmetric_condition_number(&sigma_yy);
        if !(cond <= CONDITION_CAP) {
            return Err(GaussianError::SingularObservationBlock { cond });
        }
        let sigma_xy = self.covariance.select_rows(&rest).select_columns(&obs);
        let sigma_xx = self.covariance.select_rows(&rest).select_columns(&rest);
        let mu_x = self.mean.select_rows(&rest);
        let mu_y = self.mean.select_rows(&obs);

        // gain = S_xy S_yy^{-1}, via a PD solve of S_yy.
        let gain = linalg::right_divide_spd(&sigma_xy, &sigma_yy)
            .ok_or(GaussianError::SingularObservationBlock { cond })?;
        let mean = &mu_x + &gain * (observation - mu_y);
        let cov = linalg::symmetrize(&(&sigma_xx - &gain * sigma_xy.transpose()));
        Gaussian::new(mean, cov)
    }
}

/// `P(lower <= Z <= upper)` for scalar `Z ~ N(mean, variance)`.
///
/// Zero variance returns the indicator of `mean` lying in the closed
/// interval. Tail-sided intervals are evaluated through `erfc` so that
/// small probabilities keep their relative accuracy.
pub fn interval_probability(
    mean: f64,
    variance: f64,
    lower: f64,
    upper: f64,
) -> Result<f64, GaussianError> {
    if lower > upper || lower.is_nan() || upper.is_nan() {
        return Err(GaussianError::InvalidInterval { lower, upper });
    }
    if variance < 0.0 {
        return Err(GaussianError::NotPsd(format!("variance {variance}")));
    }
    if variance == 0.0 {
        return Ok(if lower <= mean && mean <= upper { 1.0 } else { 0.0 });
    }
    let sd = variance.sqrt();
    let sqrt2 = std::f64::consts::SQRT_2;
    // Standardized bounds scaled for erf/erfc.
    let a = (lower - mean) / (sd * sqrt2);
    let b = (upper - mean) / (sd * sqrt2);
    let p = if a >= 0.0 {
        0.5 * (libm::erfc(a) - libm::erfc(b))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b) - libm::erfc(-a))
    } else {
        0.5 * (libm::erf(b) - libm::erf(a))
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Symmetry/PSD test with caller-supplied tolerance (scaled internally).
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    linalg::is_psd(m, tol)
}
