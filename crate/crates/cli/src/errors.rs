//! Error classification: every failure exits nonzero with a distinct code
//! per error class and a single machine-parsable line on stderr.

use stochabs_core::dare::DareError;
use stochabs_core::format::FormatError;
use stochabs_core::gaussian::GaussianError;
use stochabs_core::kalman::KalmanError;
use stochabs_core::model::ModelError;
use stochabs_core::refine::RefineError;
use stochabs_core::verify::VerifyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Dare(#[from] DareError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("abstraction artifact was built for a different model: artifact records {artifact}, model file hashes to {model}")]
    HashMismatch { artifact: String, model: String },
    #[error("{0}")]
    MissingInput(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Distinct exit code per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Model(e) => match e {
                ModelError::FactorizationMismatch { .. } => 10,
                ModelError::NotAReduction { .. } => 11,
                ModelError::DimensionMismatch(_) => 20,
                ModelError::InvalidSpecification(_) => 21,
                ModelError::HorizonTooShort { .. } => 22,
                ModelError::OutOfSchedule { .. } => 23,
                ModelError::NoiseNotPsd => 21,
            },
            CliError::Gaussian(e) => match e {
                GaussianError::SingularObservationBlock { .. } => 19,
                GaussianError::InvalidInterval { .. } => 21,
                GaussianError::DimensionMismatch(_) => 20,
                GaussianError::NotPsd(_) => 21,
            },
            CliError::Kalman(e) => match e {
                KalmanError::Assumption1Violated(_) => 12,
                KalmanError::IllConditionedInnovation { .. } => 18,
                KalmanError::OutOfSchedule { .. } => 23,
                KalmanError::DimensionMismatch(_) => 20,
                KalmanError::Gaussian(_) => 21,
                KalmanError::Model(_) => 20,
            },
            CliError::Dare(e) => match e {
                DareError::NoConvergence { .. } => 15,
                DareError::NotStabilizing { .. } => 16,
                DareError::PremiseViolated { .. } => 14,
                DareError::Assumption2Violated { .. } => 13,
                DareError::SingularR { .. } => 17,
                DareError::IllConditionedInnovation { .. } => 18,
                DareError::NoisePremiseViolated { .. } => 12,
                DareError::WoodburyValidationFailed { .. } => 17,
                DareError::Gaussian(_) => 21,
            },
            CliError::Refine(e) => match e {
                RefineError::FlavorMismatch { .. } => 24,
                RefineError::MissingAuxiliary => 24,
                RefineError::InputNotRequested => 31,
                RefineError::Kalman(k) => CliError::classify_kalman(k),
                RefineError::Model(_) => 20,
                RefineError::Gaussian(_) => 21,
            },
            CliError::Verify(e) => match e {
                VerifyError::NonBoxSpec => 25,
                VerifyError::UnsupportedPolicy => 26,
                VerifyError::NoTrials => 30,
                VerifyError::HorizonTooShort { .. } => 22,
                VerifyError::DimensionMismatch(_) => 20,
                VerifyError::Model(_) => 20,
                VerifyError::Kalman(k) => CliError::classify_kalman(k),
                VerifyError::Refine(_) => 24,
                VerifyError::Gaussian(_) => 21,
            },
            CliError::Format(_) => 27,
            CliError::HashMismatch { .. } => 28,
            CliError::Io(_) => 29,
            CliError::MissingInput(_) => 30,
        }
    }

    fn classify_kalman(e: &KalmanError) -> i32 {
        match e {
            KalmanError::Assumption1Violated(_) => 12,
            KalmanError::IllConditionedInnovation { .. } => 18,
            KalmanError::OutOfSchedule { .. } => 23,
            _ => 20,
        }
    }
}
