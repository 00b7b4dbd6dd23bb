use crate::error::{Error, Result};
use crate::rng::{derive, standard_normal};
use crate::tensor::Tensor;

const POWER_ITERS: usize = 10_000;
const POWER_TOLERANCE: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    /// `[m×2]` coordinates of the centered data.
    pub projected: Tensor,
    /// `[2×k]` orthonormal component rows.
    pub components: Tensor,
    pub eigenvalues: [f64; 2],
    /// Eigenvalues over total variance.
    pub explained: [f64; 2],
    pub mean: Vec<f64>,
}

/// Top two principal components by power iteration with deflation.
pub fn pca2(z: &Tensor) -> Result<Pca2> {
    if z.rank() != 2 || z.rows() < 2 || z.cols() < 2 {
        return Err(Error::Metric(format!("pca2 needs ≥ 2 rows and columns, got {:?}", z.shape())));
    }
    let (m, k) = (z.rows(), z.cols());
    let mean: Vec<f64> = (0..k).map(|j| (0..m).map(|i| z.get(i, j)).sum::<f64>() / m as f64).collect();
    let centered: Vec<f64> =
        (0..m).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| z.get(i, j) - mean[j]).collect();
    let mut cov = vec![0.0; k * k];
    for i in 0..m {
        let row = &centered[i * k..(i + 1) * k];
        for a in 0..k {
            for b in 0..k {
                cov[a * k + b] += row[a] * row[b];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (m - 1) as f64);
    let trace: f64 = (0..k).map(|a| cov[a * k + a]).sum();
    if !(trace > 0.0) {
        return Err(Error::Metric("data has zero variance".into()));
    }

    let mut rng = derive(0, "pca2");
    let v1 = power(&cov, k, &[], &mut rng);
    let l1 = rayleigh(&cov, k, &v1);
    for a in 0..k {
        for b in 0..k {
            cov[a * k + b] -= l1 * v1[a] * v1[b];
        }
    }
    let v2 = power(&cov, k, &v1, &mut rng);
    let l2 = rayleigh(&cov, k, &v2).max(0.0);

    let mut projected = Vec::with_capacity(2 * m);
    for i in 0..m {
        let row = &centered[i * k..(i + 1) * k];
        projected.push(dot(row, &v1));
        projected.push(dot(row, &v2));
    }
    let mut components = v1;
    components.extend(v2);
    Ok(Pca2 {
        projected: Tensor::matrix(m, 2, projected)?,
        components: Tensor::matrix(2, k, components)?,
        eigenvalues: [l1, l2],
        explained: [l1 / trace, l2 / trace],
        mean,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    if against.is_empty() {
        return;
    }
    let p = dot(v, against);
    v.iter_mut().zip(against).for_each(|(x, a)| *x -= p * a);
}

fn matvec(c: &[f64], k: usize, v: &[f64]) -> Vec<f64> {
    (0..k).map(|a| dot(&c[a * k..(a + 1) * k], v)).collect()
}

fn rayleigh(c: &[f64], k: usize, v: &[f64]) -> f64 {
    dot(v, &matvec(c, k, v))
}

fn power(c: &[f64], k: usize, against: &[f64], rng: &mut crate::rng::Rng64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| standard_normal(rng)).collect();
    orthogonalize(&mut v, against);
    normalize(&mut v);
    for _ in 0..POWER_ITERS {
        let mut next = matvec(c, k, &v);
        orthogonalize(&mut next, against);
        if normalize(&mut next) < 1e-300 {
            // Remaining spectrum is zero; any unit vector orthogonal to
            // `against` is an eigenvector.
            return v;
        }
        if dot(&next, &v) < 0.0 {
            next.iter_mut().for_each(|x| *x = -*x);
        }
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change < POWER_TOLERANCE {
            break;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};

    #[test]
    fn line_is_one_dimensional() {
        let z = Tensor::from_rows(&(0..50).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect::<Vec<_>>())
            .unwrap();
        let p = pca2(&z).unwrap();
        assert!(p.explained[0] >= 0.999);
        let c = &p.components;
        assert!((dot(c.row(0), c.row(0)) - 1.0).abs() < 1e-8);
        assert!((dot(c.row(1), c.row(1)) - 1.0).abs() < 1e-8);
        assert!(dot(c.row(0), c.row(1)).abs() < 1e-8);
    }

    #[test]
    fn isotropic_sample_has_similar_eigenvalues() {
        let z = normal_tensor(&[5000, 2], &mut seeded(4));
        let p = pca2(&z).unwrap();
        assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
        assert!((p.eigenvalues[0] - p.eigenvalues[1]) / p.eigenvalues[0] < 0.1);
    }

    #[test]
    fn basis_is_orthonormal_and_projection_consistent() {
        let z = normal_tensor(&[100, 5], &mut seeded(5));
        let p = pca2(&z).unwrap();
        let c = &p.components;
        assert!(dot(c.row(0), c.row(1)).abs() < 1e-8);
        for i in 0..100 {
            let centered: Vec<f64> = (0..5).map(|j| z.get(i, j) - p.mean[j]).collect();
            assert!((dot(&centered, c.row(0)) - p.projected.get(i, 0)).abs() < 1e-12);
        }
        assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
    }

    #[test]
    fn constant_data_is_error() {
        assert!(matches!(pca2(&Tensor::full(&[10, 3], 2.0)), Err(Error::Metric(_))));
    }
}
