//! Representation and leakage metrics.

mod dci;
mod pca;
mod probe;

pub use dci::{
    alignment, completeness, dci, explicitness, fit_importance_matrix, lasso, minmax_normalize, AlignmentDetail,
    CompletenessDetail, DciReport, ImportanceFit, ImportanceMatrix, LassoFit, LASSO_MAX_SWEEPS, LASSO_TOLERANCE,
};
pub use pca::{pca2, Pca2};
pub use probe::{accuracy, linear_probe, LogisticProbe};

/// L1 penalty used for importance probes unless configured otherwise.
pub const DEFAULT_L1_PENALTY: f64 = 0.01;

/// `2·|acc − ½|` for a balanced two-class task.
pub fn leakage_score(accuracy: f64) -> f64 {
    2.0 * (accuracy - 0.5).abs()
}
