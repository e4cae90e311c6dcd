//! Structural state reduction of abstract models.
//!
//! A state index is removable when it is almost surely zero for all time:
//! zero initial mean and (co)variance, no input or noise feed, and every
//! state it depends on through `A` is itself removable. The greatest such
//! set is computed as a fixpoint and projected out.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

use crate::gaussian::Gaussian;
use crate::kalman::{AbstractModel, MatrixSchedule};
use crate::linalg;
use crate::model::{History, Policy};

/// Index map from a reduction: `kept[i]` is the original index of reduced
/// coordinate `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateReduction {
    pub original_dim: usize,
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
}

impl StateReduction {
    pub fn identity(dim: usize) -> Self {
        Self { original_dim: dim, kept: (0..dim).collect(), removed: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        self.removed.is_empty()
    }

    pub fn reduced_dim(&self) -> usize {
        self.kept.len()
    }

    /// Projects a full state onto the kept coordinates.
    pub fn project_state(&self, state: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.kept.len(), |i, _| state[self.kept[i]])
    }

    fn project_history(&self, history: &History) -> History {
        History {
            states: history.states.iter().map(|s| self.project_state(s)).collect(),
            inputs: history.inputs.clone(),
        }
    }

    /// Lifts a policy declared over the reduced state onto the full state
    /// (zero weight on removed coordinates).
    pub fn lift_policy(&self, policy: &Policy) -> Policy {
        let lift_gain = |gain: &DMatrix<f64>| {
            let mut full = DMatrix::zeros(gain.nrows(), self.original_dim);
            for (i, &orig) in self.kept.iter().enumerate() {
                full.set_column(orig, &gain.column(i));
            }
            full
        };
        match policy {
            Policy::TimeInvariantLinear { gain, offset } => Policy::TimeInvariantLinear {
                gain: lift_gain(gain),
                offset: offset.clone(),
            },
            Policy::TimeVaryingLinear { schedule } => Policy::TimeVaryingLinear {
                schedule: schedule.iter().map(|(g, o)| (lift_gain(g), o.clone())).collect(),
            },
            Policy::BlackBox(f) => {
                let f = Arc::clone(f);
                let map = self.clone();
                Policy::BlackBox(Arc::new(move |history: &History| {
                    f(&map.project_history(history))
                }))
            }
        }
    }
}

fn zero_tol(scale: f64) -> f64 {
    1e-12 * (1.0 + scale)
}

fn row_is_zero(m: &DMatrix<f64>, i: usize, tol: f64) -> bool {
    m.row(i).iter().all(|v| v.abs() <= tol)
}

/// Computes the greatest set of almost-surely-zero states and removes it,
/// projecting the model matrices and initial law. The innovation itself is
/// untouched; only its feed-in rows shrink. An empty set yields the
/// identity reduction; removing every state is allowed and produces a
/// zero-dimensional model with output identically zero.
pub fn reduce_states(model: &AbstractModel) -> (AbstractModel, StateReduction) {
    let n = model.state_dim();
    let mean_tol = zero_tol(linalg::max_abs_vec(model.init.mean()));
    let cov_tol = zero_tol(linalg::max_abs(model.init.covariance()));
    let b_tol = zero_tol(linalg::max_abs(&model.b));
    let a_tol = zero_tol(linalg::max_abs(&model.a));

    let gain_rows_zero = |i: usize| -> bool {
        match &model.gains {
            MatrixSchedule::Constant(k) => row_is_zero(k, i, zero_tol(linalg::max_abs(k))),
            MatrixSchedule::Scheduled(ks) => ks
                .iter()
                .all(|k| row_is_zero(k, i, zero_tol(linalg::max_abs(k)))),
        }
    };

    // Static candidates: no initial mass, no input feed, no noise feed.
    let mut in_set: Vec<bool> = (0..n)
        .map(|i| {
            model.init.mean()[i].abs() <= mean_tol
                && row_is_zero(model.init.covariance(), i, cov_tol)
                && model.init.covariance().column(i).iter().all(|v| v.abs() <= cov_tol)
                && row_is_zero(&model.b, i, b_tol)
                && gain_rows_zero(i)
        })
        .collect();

    // Greatest fixpoint: i stays only if every state feeding it stays.
    loop {
        let mut changed = false;
        for i in 0..n {
            if !in_set[i] {
                continue;
            }
            let depends_on_live =
                (0..n).any(|j| model.a[(i, j)].abs() > a_tol && !in_set[j]);
            if depends_on_live {
                in_set[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let removed: Vec<usize> = (0..n).filter(|&i| in_set[i]).collect();
    if removed.is_empty() {
        return (model.clone(), StateReduction::identity(n));
    }
    let kept: Vec<usize> = (0..n).filter(|&i| !in_set[i]).collect();

    let project_rows = |m: &DMatrix<f64>| m.select_rows(&kept);
    let gains = match &model.gains {
        MatrixSchedule::Constant(k) => MatrixSchedule::Constant(project_rows(k)),
        MatrixSchedule::Scheduled(ks) => {
            MatrixSchedule::Scheduled(ks.iter().map(project_rows).collect())
        }
    };
    let init = Gaussian::new(
        model.init.mean().select_rows(&kept),
        model.init.covariance().select_rows(&kept).select_columns(&kept),
    )
    .expect("projection of a PSD covariance is PSD");

    let reduced = AbstractModel {
        a: model.a.select_rows(&kept).select_columns(&kept),
        b: project_rows(&model.b),
        h: model.h.select_columns(&kept),
        gains,
        innovation_covs: model.innovation_covs.clone(),
        init,
        flavor: model.flavor,
    };
    let map = StateReduction { original_dim: n, kept, removed };
    (reduced, map)
}
