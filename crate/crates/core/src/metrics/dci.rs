use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lasso fit `min (1/2m)‖y − Xw − b‖² + α‖w‖₁` with unpenalized intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub sweeps: usize,
    /// Objective after each sweep.
    pub objective_trace: Vec<f64>,
}

pub const LASSO_TOLERANCE: f64 = 1e-8;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

/// Cyclic coordinate descent with soft-thresholding on centered data.
pub fn lasso(x: &Tensor, y: &[f64], alpha: f64) -> Result<LassoFit> {
    let (m, k) = (x.rows(), x.cols());
    if x.rank() != 2 || y.len() != m || m < 2 {
        return Err(Error::Metric(format!("lasso needs m ≥ 2 rows, got {:?} and {}", x.shape(), y.len())));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Contract(format!("negative L1 penalty {alpha}")));
    }
    let mf = m as f64;
    let x_mean: Vec<f64> = (0..k).map(|j| (0..m).map(|i| x.get(i, j)).sum::<f64>() / mf).collect();
    let y_mean = y.iter().sum::<f64>() / mf;
    // Column-major centered copy for cache-friendly coordinate updates.
    let cols: Vec<Vec<f64>> = (0..k).map(|j| (0..m).map(|i| x.get(i, j) - x_mean[j]).collect()).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / mf).collect();
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut w = vec![0.0; k];
    let objective = |resid: &[f64], w: &[f64]| {
        resid.iter().map(|r| r * r).sum::<f64>() / (2.0 * mf) + alpha * w.iter().map(|v| v.abs()).sum::<f64>()
    };
    let mut trace = Vec::new();
    let mut sweeps = 0;
    while sweeps < LASSO_MAX_SWEEPS {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..k {
            if norms[j] == 0.0 {
                continue;
            }
            let col = &cols[j];
            let rho = col.iter().zip(&resid).map(|(c, r)| c * r).sum::<f64>() / mf + norms[j] * w[j];
            let new = soft_threshold(rho, alpha) / norms[j];
            let delta = new - w[j];
            if delta != 0.0 {
                for (r, c) in resid.iter_mut().zip(col) {
                    *r -= delta * c;
                }
                w[j] = new;
            }
            max_change = max_change.max(delta.abs());
        }
        trace.push(objective(&resid, &w));
        if max_change < LASSO_TOLERANCE {
            break;
        }
    }
    let intercept = y_mean - w.iter().zip(&x_mean).map(|(a, b)| a * b).sum::<f64>();
    Ok(LassoFit { weights: w, intercept, sweeps, objective_trace: trace })
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Rescales each column to `[0, 1]`. Constant columns become all zeros and
/// are reported by index.
pub fn minmax_normalize(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 2 {
        return Err(Error::shape("minmax_normalize", format!("{:?}", x.shape())));
    }
    let (m, k) = (x.rows(), x.cols());
    let mut out = x.clone();
    let mut constant = Vec::new();
    for j in 0..k {
        let (lo, hi) =
            (0..m).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| (lo.min(x.get(i, j)), hi.max(x.get(i, j))));
        let span = hi - lo;
        if !span.is_finite() {
            return Err(Error::Metric(format!("column {j} is not finite")));
        }
        for i in 0..m {
            out.data_mut()[i * k + j] = if span > 0.0 { (x.get(i, j) - lo) / span } else { 0.0 };
        }
        if span == 0.0 {
            constant.push(j);
        }
    }
    Ok((out, constant))
}

/// Nonnegative importances `B[k×n_I]` of latents (rows) for factors (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMatrix {
    pub weights: Tensor,
    pub latent_names: Vec<String>,
    pub factor_names: Vec<String>,
}

impl ImportanceMatrix {
    pub fn new(weights: Tensor, latent_names: Vec<String>, factor_names: Vec<String>) -> Result<Self> {
        if weights.rank() != 2 || weights.rows() != latent_names.len() || weights.cols() != factor_names.len() {
            return Err(Error::shape(
                "importance_matrix",
                format!(
                    "{:?} with {} latent and {} factor names",
                    weights.shape(),
                    latent_names.len(),
                    factor_names.len()
                ),
            ));
        }
        if weights.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Metric("importance weights must be nonnegative".into()));
        }
        Ok(ImportanceMatrix { weights, latent_names, factor_names })
    }

    /// Default names `z0…`, `g0…`.
    pub fn unnamed(weights: Tensor) -> Result<Self> {
        let k = weights.rows();
        let n = weights.cols();
        Self::new(weights, (0..k).map(|j| format!("z{j}")).collect(), (0..n).map(|i| format!("g{i}")).collect())
    }
}

/// Per-factor lasso probes on min–max normalized latents and factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceFit {
    pub importance: ImportanceMatrix,
    pub mse: Vec<f64>,
    /// Factors that were constant on the fitting rows.
    pub constant_factors: Vec<usize>,
}

/// Fits and evaluates each factor probe on the same rows.
pub fn fit_importance_matrix(z: &Tensor, g: &Tensor, l1_penalty: f64) -> Result<ImportanceFit> {
    if z.rank() != 2 || g.rank() != 2 || z.rows() != g.rows() {
        return Err(Error::shape("fit_importance_matrix", format!("{:?} vs {:?}", z.shape(), g.shape())));
    }
    if z.rows() < 2 {
        return Err(Error::Metric("importance fitting needs at least 2 rows".into()));
    }
    let (zn, _) = minmax_normalize(z)?;
    let (gn, constant_factors) = minmax_normalize(g)?;
    let (m, k, n) = (z.rows(), z.cols(), g.cols());
    let mut b = Tensor::zeros(&[k, n]);
    let mut mse = Vec::with_capacity(n);
    for i in 0..n {
        let y: Vec<f64> = (0..m).map(|r| gn.get(r, i)).collect();
        if constant_factors.contains(&i) {
            mse.push(0.0);
            continue;
        }
        let fit = lasso(&zn, &y, l1_penalty)?;
        for (j, w) in fit.weights.iter().enumerate() {
            b.data_mut()[j * n + i] = w.abs();
        }
        let err = (0..m)
            .map(|r| {
                let pred = fit.intercept + (0..k).map(|j| fit.weights[j] * zn.get(r, j)).sum::<f64>();
                (y[r] - pred).powi(2)
            })
            .sum::<f64>()
            / m as f64;
        mse.push(err);
    }
    Ok(ImportanceFit { importance: ImportanceMatrix::unnamed(b)?, mse, constant_factors })
}

fn entropy(p: impl Iterator<Item = f64>, base: usize) -> f64 {
    if base <= 1 {
        return 0.0;
    }
    let ln_base = (base as f64).ln();
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / ln_base
}

/// Alignment with its per-latent weights and entropies.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentDetail {
    pub value: f64,
    pub weights: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// `1 − Σ_j ρ_j H_j` with row entropies in base `n_I`.
pub fn alignment(b: &Tensor) -> Result<AlignmentDetail> {
    let (k, n) = check_importance(b)?;
    let total: f64 = b.data().iter().sum();
    let mut weights = Vec::with_capacity(k);
    let mut entropies = Vec::with_capacity(k);
    for j in 0..k {
        let row = b.row(j);
        let mass: f64 = row.iter().sum();
        if mass == 0.0 {
            weights.push(0.0);
            entropies.push(0.0);
            continue;
        }
        weights.push(mass / total);
        entropies.push(entropy(row.iter().map(|v| v / mass), n));
    }
    let value = 1.0 - weights.iter().zip(&entropies).map(|(r, h)| r * h).sum::<f64>();
    Ok(AlignmentDetail { value, weights, entropies })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletenessDetail {
    pub value: f64,
    pub weights: Vec<f64>,
    pub entropies: Vec<f64>,
    /// Factors no latent explains.
    pub zero_columns: Vec<usize>,
}

/// `1 − Σ_i ρ̃_i H̃_i` with column entropies in base `k` and `ρ̃` proportional
/// to column mass.
pub fn completeness(b: &Tensor) -> Result<CompletenessDetail> {
    let (k, n) = check_importance(b)?;
    let total: f64 = b.data().iter().sum();
    let mut weights = Vec::with_capacity(n);
    let mut entropies = Vec::with_capacity(n);
    let mut zero_columns = Vec::new();
    for i in 0..n {
        let mass: f64 = (0..k).map(|j| b.get(j, i)).sum();
        if mass == 0.0 {
            zero_columns.push(i);
            weights.push(0.0);
            entropies.push(0.0);
            continue;
        }
        weights.push(mass / total);
        entropies.push(entropy((0..k).map(|j| b.get(j, i) / mass), k));
    }
    let value = 1.0 - weights.iter().zip(&entropies).map(|(r, h)| r * h).sum::<f64>();
    Ok(CompletenessDetail { value, weights, entropies, zero_columns })
}

fn check_importance(b: &Tensor) -> Result<(usize, usize)> {
    if b.rank() != 2 {
        return Err(Error::shape("importance", format!("{:?}", b.shape())));
    }
    if b.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Metric("importance weights must be finite and nonnegative".into()));
    }
    if b.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Metric("importance matrix is all zero".into()));
    }
    Ok((b.rows(), b.cols()))
}

/// `1 − 6·mean(MSE)`, unclipped.
pub fn explicitness(mse_per_factor: &[f64]) -> f64 {
    if mse_per_factor.is_empty() {
        return 1.0;
    }
    1.0 - 6.0 * mse_per_factor.iter().sum::<f64>() / mse_per_factor.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct DciReport {
    pub alignment: f64,
    pub completeness: f64,
    pub explicitness: f64,
    pub latent_weights: Vec<f64>,
    pub latent_entropies: Vec<f64>,
    pub mse: Vec<f64>,
    pub constant_factors: Vec<usize>,
    pub importance: ImportanceMatrix,
}

/// Fits the importance matrix and summarizes it.
pub fn dci(z: &Tensor, g: &Tensor, l1_penalty: f64) -> Result<DciReport> {
    let fit = fit_importance_matrix(z, g, l1_penalty)?;
    let a = alignment(&fit.importance.weights)?;
    let c = completeness(&fit.importance.weights)?;
    Ok(DciReport {
        alignment: a.value,
        completeness: c.value,
        explicitness: explicitness(&fit.mse),
        latent_weights: a.weights,
        latent_entropies: a.entropies,
        mse: fit.mse,
        constant_factors: fit.constant_factors,
        importance: fit.importance,
    })
}
