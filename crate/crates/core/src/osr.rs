//! Open-set rejection: a reconstruction check combined with a check that the
//! encoder mean lies inside some class ball `‖μ_y − z‖ ≤ η_y`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::GlanceNetModel;
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OsrThresholds {
    pub eta_r: f64,
    pub eta_y: BTreeMap<usize, f64>,
    pub quantile: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OsrDecision {
    pub passed_reconstruction: bool,
    pub passed_localization: bool,
    pub reconstruction_error: f64,
    pub nearest_class: usize,
    pub nearest_distance: f64,
}

impl OsrDecision {
    /// True when the input is judged closed-set.
    pub fn closed_set(&self) -> bool {
        self.passed_reconstruction && self.passed_localization
    }
}

/// Nearest-rank quantile: the `⌈q·n⌉`-th smallest value.
pub fn nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Calibration("quantile of an empty sample".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Contract(format!("quantile {q} outside (0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fits `η_r` over all examples and one `η_y` per conditioning class present
/// in `conditions`, each as the `quantile` of its own sample.
pub fn calibrate(
    model: &GlanceNetModel,
    images: &Tensor,
    conditions: &[usize],
    quantile: f64,
) -> Result<OsrThresholds> {
    if images.rank() != 2 || images.rows() == 0 || images.rows() != conditions.len() {
        return Err(Error::Calibration(format!(
            "need a nonempty image matrix with one condition per row, got {:?} and {}",
            images.shape(),
            conditions.len()
        )));
    }
    let errors = model.reconstruction_errors(images)?;
    let mu = model.encode_mean(images)?;
    calibrate_from(&errors, &mu, conditions, model.prior_means(), quantile)
}

/// [`calibrate`] on precomputed reconstruction errors and encoder means.
pub fn calibrate_from(
    errors: &[f64],
    mu: &Tensor,
    conditions: &[usize],
    prior_means: &Tensor,
    quantile: f64,
) -> Result<OsrThresholds> {
    let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, &c) in conditions.iter().enumerate() {
        if c >= prior_means.rows() {
            return Err(Error::Calibration(format!("condition {c} has no prior component")));
        }
        per_class.entry(c).or_default().push(distance(prior_means.row(c), mu.row(i)));
    }
    let mut eta_y = BTreeMap::new();
    for (c, d) in per_class {
        if d.len() < 2 {
            return Err(Error::Calibration(format!(
                "class {c} has {} training example(s); at least 2 are required",
                d.len()
            )));
        }
        eta_y.insert(c, nearest_rank(&d, quantile)?);
    }
    Ok(OsrThresholds { eta_r: nearest_rank(errors, quantile)?, eta_y, quantile })
}

impl OsrThresholds {
    /// Decision for one encoder mean and its reconstruction error. Thresholds
    /// are inclusive.
    pub fn decide(&self, reconstruction_error: f64, mu: &[f64], prior_means: &Tensor) -> OsrDecision {
        let mut nearest_class = 0;
        let mut nearest_distance = f64::INFINITY;
        let mut inside = false;
        for (&c, &eta) in &self.eta_y {
            let d = distance(prior_means.row(c), mu);
            if d <= eta {
                inside = true;
            }
            if d < nearest_distance {
                nearest_distance = d;
                nearest_class = c;
            }
        }
        OsrDecision {
            passed_reconstruction: reconstruction_error <= self.eta_r,
            passed_localization: inside,
            reconstruction_error,
            nearest_class,
            nearest_distance,
        }
    }
}

/// Open-set decisions for each row of `images`.
pub fn osr_check(model: &GlanceNetModel, thresholds: &OsrThresholds, images: &Tensor) -> Result<Vec<OsrDecision>> {
    if let Some(&c) = thresholds.eta_y.keys().find(|&&c| c >= model.num_conditions()) {
        return Err(Error::Contract(format!("threshold for class {c} exceeds the model's prior")));
    }
    let errors = model.reconstruction_errors(images)?;
    let mu = model.encode_mean(images)?;
    Ok(errors.iter().enumerate().map(|(i, &e)| thresholds.decide(e, mu.row(i), model.prior_means())).collect())
}

/// Keeps `predictions` for closed-set inputs and replaces the rest with a
/// uniform draw from `0..num_labels`.
pub fn predict_with_rejection(
    decisions: &[OsrDecision],
    predictions: &[usize],
    num_labels: usize,
    rng: &mut Rng64,
) -> Result<Vec<usize>> {
    if decisions.len() != predictions.len() || num_labels == 0 {
        return Err(Error::Contract(format!(
            "{} decisions, {} predictions, {num_labels} labels",
            decisions.len(),
            predictions.len()
        )));
    }
    Ok(decisions
        .iter()
        .zip(predictions)
        .map(|(d, &p)| if d.closed_set() { p } else { rng.random_range(0..num_labels) })
        .collect())
}

/// Fraction of decisions that reject the input.
pub fn rejection_rate(decisions: &[OsrDecision]) -> f64 {
    if decisions.is_empty() {
        return 0.0;
    }
    decisions.iter().filter(|d| !d.closed_set()).count() as f64 / decisions.len() as f64
}
