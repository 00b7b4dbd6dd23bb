use crate::error::{Error, Result};
use crate::model::argmax;
use crate::tensor::Tensor;

const PROBE_LR: f64 = 0.5;
const PROBE_MAX_ITERS: usize = 5000;
const PROBE_TOLERANCE: f64 = 1e-6;
const PROBE_L2: f64 = 1e-4;

/// Multinomial logistic regression on standardized features, fit by
/// full-batch gradient descent with a small L2 penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[c×d]`
    weights: Tensor,
    bias: Vec<f64>,
    iterations: usize,
}

impl LogisticProbe {
    pub fn fit(z: &Tensor, labels: &[usize]) -> Result<Self> {
        if z.rank() != 2 || z.rows() != labels.len() || labels.is_empty() {
            return Err(Error::shape("linear_probe", format!("{:?} with {} labels", z.shape(), labels.len())));
        }
        let first = labels[0];
        if labels.iter().all(|&y| y == first) {
            return Err(Error::Contract(format!("probe training labels are all {first}")));
        }
        let (m, d) = (z.rows(), z.cols());
        let c = labels.iter().max().expect("nonempty") + 1;
        let mean: Vec<f64> = (0..d).map(|j| (0..m).map(|i| z.get(i, j)).sum::<f64>() / m as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = (0..m).map(|i| (z.get(i, j) - mean[j]).powi(2)).sum::<f64>() / m as f64;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let x: Vec<f64> =
            (0..m).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| (z.get(i, j) - mean[j]) / scale[j]).collect();
        let mut w = vec![0.0; c * d];
        let mut b = vec![0.0; c];
        let mut iterations = 0;
        let mut probs = vec![0.0; c];
        while iterations < PROBE_MAX_ITERS {
            iterations += 1;
            let mut gw = vec![0.0; c * d];
            let mut gb = vec![0.0; c];
            for i in 0..m {
                let row = &x[i * d..(i + 1) * d];
                for k in 0..c {
                    probs[k] = b[k] + (0..d).map(|j| w[k * d + j] * row[j]).sum::<f64>();
                }
                softmax_in_place(&mut probs);
                for k in 0..c {
                    let err = probs[k] - f64::from(labels[i] == k);
                    gb[k] += err;
                    for j in 0..d {
                        gw[k * d + j] += err * row[j];
                    }
                }
            }
            let mut max_grad: f64 = 0.0;
            for (k, g) in gw.iter_mut().enumerate() {
                *g = *g / m as f64 + PROBE_L2 * w[k];
                max_grad = max_grad.max(g.abs());
            }
            for g in gb.iter_mut() {
                *g /= m as f64;
                max_grad = max_grad.max(g.abs());
            }
            for (wk, g) in w.iter_mut().zip(&gw) {
                *wk -= PROBE_LR * g;
            }
            for (bk, g) in b.iter_mut().zip(&gb) {
                *bk -= PROBE_LR * g;
            }
            if max_grad < PROBE_TOLERANCE {
                break;
            }
        }
        Ok(LogisticProbe { mean, scale, weights: Tensor::matrix(c, d, w)?, bias: b, iterations })
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn predict(&self, z: &Tensor) -> Result<Vec<usize>> {
        let d = self.mean.len();
        if z.rank() != 2 || z.cols() != d {
            return Err(Error::shape("probe_predict", format!("{:?} for {d} features", z.shape())));
        }
        let c = self.bias.len();
        Ok((0..z.rows())
            .map(|i| {
                let scores: Vec<f64> = (0..c)
                    .map(|k| {
                        self.bias[k]
                            + (0..d)
                                .map(|j| self.weights.get(k, j) * (z.get(i, j) - self.mean[j]) / self.scale[j])
                                .sum::<f64>()
                    })
                    .collect();
                argmax(&scores)
            })
            .collect())
    }

    pub fn accuracy(&self, z: &Tensor, labels: &[usize]) -> Result<f64> {
        accuracy(&self.predict(z)?, labels)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    Ok(predictions.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// Test accuracy of a logistic probe fit on the training split.
pub fn linear_probe(z_train: &Tensor, y_train: &[usize], z_test: &Tensor, y_test: &[usize]) -> Result<f64> {
    LogisticProbe::fit(z_train, y_train)?.accuracy(z_test, y_test)
}
