//! Versioned structured-text (JSON) formats for model files and
//! abstraction artifacts.
//!
//! The schema is strict: unknown keys are rejected, matrices must be
//! rectangular, and exactly one of the constant/scheduled gain
//! representations may be present. Floats are written in shortest
//! round-trip decimal form, so serialize -> parse is the identity on every
//! numeric field.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dare::{AuxiliaryMeasurement, DareSolution};
use crate::gaussian::{Gaussian, GaussianError};
use crate::kalman::{AbstractModel, Flavor, MatrixSchedule};
use crate::model::{
    attach_observation, Bounds, LinearStochasticSystem, ModelError, ObservedSystem, Policy,
    SpecBounds, Specification,
};
use crate::verify::StateReduction;

/// Current format version written and accepted by this build.
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version '{got}' (expected '{FORMAT_VERSION}')")]
    UnsupportedVersion { got: String },
    #[error("matrix '{name}' is ragged or empty")]
    RaggedMatrix { name: String },
    #[error("invalid policy block: {0}")]
    InvalidPolicy(String),
    #[error("invalid artifact: {0}")]
    InvalidArtifact(String),
    #[error("unknown flavor '{0}'")]
    UnknownFlavor(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

pub type Rows = Vec<Vec<f64>>;

pub fn matrix_from_rows(name: &str, rows: &Rows) -> Result<DMatrix<f64>, FormatError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(FormatError::RaggedMatrix { name: name.to_string() });
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(FormatError::RaggedMatrix { name: name.to_string() });
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub a: Rows,
    pub b: Rows,
    pub h: Rows,
    pub qw: Rows,
    pub mu0: Vec<f64>,
    pub sigma0: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationBlock {
    pub c: Rows,
    pub n: Rows,
}

/// Bounds written as `[lower, upper]`, with `null` for an unbounded side.
pub type BoundsEntry = [Option<f64>; 2];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoxesBlock {
    Constant(Vec<BoundsEntry>),
    PerStep(Vec<Vec<BoundsEntry>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecBlock {
    pub interval: [usize; 2],
    pub boxes: BoxesBlock,
    pub target_probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBlock {
    /// `time-invariant-linear` or `time-varying-linear`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<Vec<Rows>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<Vec<f64>>>,
}

/// The on-disk model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: String,
    pub system: SystemBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<ObservationBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SpecBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyBlock>,
    pub seed: u64,
}

/// Parsed, validated contents of a model file.
pub struct ParsedModel {
    pub system: LinearStochasticSystem,
    pub observation: Option<(DMatrix<f64>, DMatrix<f64>)>,
    pub spec: Option<Specification>,
    pub policy: Option<Policy>,
    pub seed: u64,
}

impl ParsedModel {
    /// Attaches the observation structure (validating `N C = H`, `q < n`).
    pub fn observed(&self) -> Result<ObservedSystem, FormatError> {
        let (c, n) = self.observation.as_ref().ok_or_else(|| {
            FormatError::InvalidArtifact("model file has no observation block".into())
        })?;
        Ok(attach_observation(self.system.clone(), c.clone(), n.clone())?)
    }
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion { got: file.format_version });
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Hash of the system and observation blocks; abstraction artifacts
    /// record it so a stale artifact cannot be replayed against a
    /// different model.
    pub fn model_hash(&self) -> String {
        #[derive(Serialize)]
        struct HashInput<'a> {
            system: &'a SystemBlock,
            observation: &'a Option<ObservationBlock>,
        }
        let canonical = serde_json::to_string(&HashInput {
            system: &self.system,
            observation: &self.observation,
        })
        .expect("serializable");
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        format!("sha256:{hex}")
    }

    pub fn to_domain(&self) -> Result<ParsedModel, FormatError> {
        let a = matrix_from_rows("a", &self.system.a)?;
        let b = matrix_from_rows("b", &self.system.b)?;
        let h = matrix_from_rows("h", &self.system.h)?;
        let qw = matrix_from_rows("qw", &self.system.qw)?;
        let sigma0 = matrix_from_rows("sigma0", &self.system.sigma0)?;
        let mu0 = DVector::from_row_slice(&self.system.mu0);
        let init = Gaussian::new(mu0, sigma0)?;
        let system = LinearStochasticSystem::new(a, b, h, qw, init)?;

        let observation = match &self.observation {
            Some(blk) => Some((matrix_from_rows("c", &blk.c)?, matrix_from_rows("n", &blk.n)?)),
            None => None,
        };
        let spec = match &self.spec {
            Some(blk) => Some(spec_from_block(blk)?),
            None => None,
        };
        let policy = match &self.policy {
            Some(blk) => Some(policy_from_block(blk)?),
            None => None,
        };
        Ok(ParsedModel { system, observation, spec, policy, seed: self.seed })
    }
}

fn bounds_from_entry(entry: &BoundsEntry) -> Result<Bounds, FormatError> {
    let lower = entry[0].unwrap_or(f64::NEG_INFINITY);
    let upper = entry[1].unwrap_or(f64::INFINITY);
    Ok(Bounds::new(lower, upper)?)
}

fn bounds_to_entry(b: &Bounds) -> BoundsEntry {
    [
        (b.lower != f64::NEG_INFINITY).then_some(b.lower),
        (b.upper != f64::INFINITY).then_some(b.upper),
    ]
}

pub fn spec_from_block(blk: &SpecBlock) -> Result<Specification, FormatError> {
    let bounds = match &blk.boxes {
        BoxesBlock::Constant(row) => SpecBounds::Constant(
            row.iter().map(bounds_from_entry).collect::<Result<_, _>>()?,
        ),
        BoxesBlock::PerStep(rows) => SpecBounds::PerStep(
            rows.iter()
                .map(|r| r.iter().map(bounds_from_entry).collect::<Result<_, _>>())
                .collect::<Result<_, _>>()?,
        ),
    };
    Ok(Specification::new(
        (blk.interval[0], blk.interval[1]),
        bounds,
        blk.target_probability,
    )?)
}

pub fn spec_to_block(spec: &Specification) -> SpecBlock {
    let boxes = match &spec.bounds {
        SpecBounds::Constant(row) => {
            BoxesBlock::Constant(row.iter().map(bounds_to_entry).collect())
        }
        SpecBounds::PerStep(rows) => BoxesBlock::PerStep(
            rows.iter().map(|r| r.iter().map(bounds_to_entry).collect()).collect(),
        ),
    };
    SpecBlock {
        interval: [spec.interval.0, spec.interval.1],
        boxes,
        target_probability: spec.target_probability,
    }
}

pub fn policy_from_block(blk: &PolicyBlock) -> Result<Policy, FormatError> {
    match blk.kind.as_str() {
        "time-invariant-linear" => {
            let gain_rows = blk.gain.as_ref().ok_or_else(|| {
                FormatError::InvalidPolicy("time-invariant-linear requires 'gain'".into())
            })?;
            if blk.gains.is_some() || blk.offsets.is_some() {
                return Err(FormatError::InvalidPolicy(
                    "time-invariant-linear does not take 'gains'/'offsets'".into(),
                ));
            }
            let gain = matrix_from_rows("policy.gain", gain_rows)?;
            let offset = match &blk.offset {
                Some(o) => DVector::from_row_slice(o),
                None => DVector::zeros(gain.nrows()),
            };
            if offset.len() != gain.nrows() {
                return Err(FormatError::InvalidPolicy(format!(
                    "offset has length {} but gain has {} rows",
                    offset.len(),
                    gain.nrows()
                )));
            }
            Ok(Policy::TimeInvariantLinear { gain, offset })
        }
        "time-varying-linear" => {
            let gains = blk.gains.as_ref().ok_or_else(|| {
                FormatError::InvalidPolicy("time-varying-linear requires 'gains'".into())
            })?;
            if blk.gain.is_some() || blk.offset.is_some() {
                return Err(FormatError::InvalidPolicy(
                    "time-varying-linear does not take 'gain'/'offset'".into(),
                ));
            }
            let mut schedule = Vec::with_capacity(gains.len());
            for (t, rows) in gains.iter().enumerate() {
                let gain = matrix_from_rows(&format!("policy.gains[{t}]"), rows)?;
                let offset = match &blk.offsets {
                    Some(offsets) => {
                        let o = offsets.get(t).ok_or_else(|| {
                            FormatError::InvalidPolicy(format!("missing offsets[{t}]"))
                        })?;
                        DVector::from_row_slice(o)
                    }
                    None => DVector::zeros(gain.nrows()),
                };
                schedule.push((gain, offset));
            }
            Ok(Policy::TimeVaryingLinear { schedule })
        }
        other => Err(FormatError::InvalidPolicy(format!("unknown kind '{other}'"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DareBlock {
    pub x: Rows,
    pub residual: f64,
    pub spectral_radius: f64,
    pub k: Rows,
    pub sigma_v: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxBlock {
    pub r: Rows,
    pub l: Rows,
}

/// The on-disk abstraction artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactFile {
    pub format_version: String,
    pub flavor: String,
    pub a: Rows,
    pub b: Rows,
    pub h: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_schedule: Option<Vec<Rows>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub innovation_cov: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub innovation_cov_schedule: Option<Vec<Rows>>,
    pub init_mean: Vec<f64>,
    pub init_cov: Rows,
    pub model_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dare: Option<DareBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary: Option<AuxBlock>,
}

fn flavor_to_str(flavor: Flavor) -> &'static str {
    match flavor {
        Flavor::TimeVarying => "time-varying",
        Flavor::TimeInvariant => "time-invariant",
        Flavor::TimeInvariantStar => "time-invariant-star",
    }
}

fn flavor_from_str(s: &str) -> Result<Flavor, FormatError> {
    match s {
        "time-varying" => Ok(Flavor::TimeVarying),
        "time-invariant" => Ok(Flavor::TimeInvariant),
        "time-invariant-star" => Ok(Flavor::TimeInvariantStar),
        other => Err(FormatError::UnknownFlavor(other.to_string())),
    }
}

impl ArtifactFile {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let file: ArtifactFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion { got: file.format_version });
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_parts(
        model: &AbstractModel,
        dare: Option<&DareSolution>,
        aux: Option<&AuxiliaryMeasurement>,
        model_hash: String,
    ) -> Self {
        let (gain, gain_schedule) = match &model.gains {
            MatrixSchedule::Constant(k) => (Some(matrix_to_rows(k)), None),
            MatrixSchedule::Scheduled(ks) => {
                (None, Some(ks.iter().map(matrix_to_rows).collect()))
            }
        };
        let (innovation_cov, innovation_cov_schedule) = match &model.innovation_covs {
            MatrixSchedule::Constant(s) => (Some(matrix_to_rows(s)), None),
            MatrixSchedule::Scheduled(ss) => {
                (None, Some(ss.iter().map(matrix_to_rows).collect()))
            }
        };
        ArtifactFile {
            format_version: FORMAT_VERSION.to_string(),
            flavor: flavor_to_str(model.flavor).to_string(),
            a: matrix_to_rows(&model.a),
            b: matrix_to_rows(&model.b),
            h: matrix_to_rows(&model.h),
            gain,
            gain_schedule,
            innovation_cov,
            innovation_cov_schedule,
            init_mean: model.init.mean().iter().copied().collect(),
            init_cov: matrix_to_rows(model.init.covariance()),
            model_hash,
            dare: dare.map(|d| DareBlock {
                x: matrix_to_rows(&d.x),
                residual: d.residual,
                spectral_radius: d.spectral_radius,
                k: matrix_to_rows(&d.k),
                sigma_v: matrix_to_rows(&d.sigma_v),
            }),
            auxiliary: aux.map(|a| AuxBlock {
                r: matrix_to_rows(&a.r),
                l: matrix_to_rows(&a.l),
            }),
        }
    }

    pub fn to_model(&self) -> Result<(AbstractModel, Option<AuxiliaryMeasurement>), FormatError> {
        let gains = match (&self.gain, &self.gain_schedule) {
            (Some(rows), None) => MatrixSchedule::Constant(matrix_from_rows("gain", rows)?),
            (None, Some(list)) => MatrixSchedule::Scheduled(
                list.iter()
                    .enumerate()
                    .map(|(t, rows)| matrix_from_rows(&format!("gain_schedule[{t}]"), rows))
                    .collect::<Result<_, _>>()?,
            ),
            _ => {
                return Err(FormatError::InvalidArtifact(
                    "exactly one of 'gain' and 'gain_schedule' must be present".into(),
                ))
            }
        };
        let innovation_covs = match (&self.innovation_cov, &self.innovation_cov_schedule) {
            (Some(rows), None) => {
                MatrixSchedule::Constant(matrix_from_rows("innovation_cov", rows)?)
            }
            (None, Some(list)) => MatrixSchedule::Scheduled(
                list.iter()
                    .enumerate()
                    .map(|(t, rows)| {
                        matrix_from_rows(&format!("innovation_cov_schedule[{t}]"), rows)
                    })
                    .collect::<Result<_, _>>()?,
            ),
            _ => {
                return Err(FormatError::InvalidArtifact(
                    "exactly one of 'innovation_cov' and 'innovation_cov_schedule' must be \
                     present"
                        .into(),
                ))
            }
        };
        if let (MatrixSchedule::Scheduled(g), MatrixSchedule::Scheduled(s)) =
            (&gains, &innovation_covs)
        {
            if g.len() != s.len() {
                return Err(FormatError::InvalidArtifact(format!(
                    "gain schedule has {} entries but innovation covariance schedule has {}",
                    g.len(),
                    s.len()
                )));
            }
        }
        let init = Gaussian::new(
            DVector::from_row_slice(&self.init_mean),
            matrix_from_rows("init_cov", &self.init_cov)?,
        )?;
        let model = AbstractModel {
            a: matrix_from_rows("a", &self.a)?,
            b: matrix_from_rows("b", &self.b)?,
            h: matrix_from_rows("h", &self.h)?,
            gains,
            innovation_covs,
            init,
            flavor: flavor_from_str(&self.flavor)?,
        };
        let aux = match &self.auxiliary {
            Some(blk) => Some(AuxiliaryMeasurement {
                r: matrix_from_rows("auxiliary.r", &blk.r)?,
                l: matrix_from_rows("auxiliary.l", &blk.l)?,
            }),
            None => None,
        };
        Ok((model, aux))
    }
}

/// The index map emitted alongside a reduced artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionFile {
    pub format_version: String,
    pub original_dim: usize,
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
}

impl ReductionFile {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let file: ReductionFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion { got: file.format_version });
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_reduction(map: &StateReduction) -> Self {
        ReductionFile {
            format_version: FORMAT_VERSION.to_string(),
            original_dim: map.original_dim,
            kept: map.kept.clone(),
            removed: map.removed.clone(),
        }
    }

    pub fn to_reduction(&self) -> StateReduction {
        StateReduction {
            original_dim: self.original_dim,
            kept: self.kept.clone(),
            removed: self.removed.clone(),
        }
    }
}
