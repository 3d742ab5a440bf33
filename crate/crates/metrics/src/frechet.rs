use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{check_pair, FeatureSet, MetricError, Result};

/// Eigenvalues below `-NEG_TOL * max(1, |lambda|_max)` are treated as a
/// failure rather than roundoff.
const NEG_TOL: f64 = 1e-8;

fn to_matrix(f: &FeatureSet) -> DMatrix<f64> {
    DMatrix::from_row_slice(f.len(), f.dim(), f.vectors.data())
}

pub(crate) fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mu: DVector<f64> = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < -NEG_TOL * scale {
            return Err(MetricError::NumericalInstability(format!("{what} has eigenvalue {v:e}")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(m, "matrix")?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `tr((A B)^½)` for PSD `A`, `B`, via the symmetric `A^½ B A^½`, which is
/// similar to `A B`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let sa = sqrtm_psd(a)?;
    let eig = clamped_eigen(&(&sa * b * &sa), "covariance product")?;
    Ok(eig.eigenvalues.iter().map(|v| v.sqrt()).sum())
}

/// `S = A^½ (A^½ B A^½)^½ A^-½`, a square root of `A B` (needs `A` invertible).
pub fn sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(a, "A")?;
    if eig.eigenvalues.iter().any(|v| *v <= 0.0) {
        return Err(MetricError::NumericalInstability("A is singular".into()));
    }
    let v = &eig.eigenvectors;
    let sa = v * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * v.transpose();
    let sa_inv = v * DMatrix::from_diagonal(&eig.eigenvalues.map(|x| 1.0 / x.sqrt())) * v.transpose();
    let mid = sqrtm_psd(&(&sa * b * &sa))?;
    Ok(&sa * mid * sa_inv)
}

/// Fréchet distance between Gaussians fitted to the two feature sets.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b, 2)?;
    let (mu_a, cov_a) = mean_cov(&to_matrix(a));
    let (mu_b, cov_b) = mean_cov(&to_matrix(b));
    let diff = (&mu_a - &mu_b).norm_squared();
    let value = diff + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(&cov_a, &cov_b)?;
    if !value.is_finite() {
        return Err(MetricError::NumericalInstability(format!("fid evaluated to {value}")));
    }
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sesa_core::Seed;

    /// `n` rows of `mu + L z`, `z` standard normal.
    fn gaussian_rows(n: usize, mu: [f64; 2], l: [[f64; 2]; 2], seed: u64) -> Vec<Vec<f64>> {
        let z = sesa_core::Tensor::randn(&[n, 2], &mut Seed(seed).rng());
        z.data()
            .chunks(2)
            .map(|z| vec![mu[0] + l[0][0] * z[0] + l[0][1] * z[1], mu[1] + l[1][0] * z[0] + l[1][1] * z[1]])
            .collect()
    }

    fn fs(rows: &[Vec<f64>]) -> FeatureSet {
        FeatureSet::from_rows(rows, "t").unwrap()
    }

    #[test]
    fn identical_sets_give_zero() {
        let mut rng = Seed(1).rng();
        let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..6).map(|_| rand::Rng::random::<f64>(&mut rng) * 3.0).collect()).collect();
        let a = fs(&rows);
        assert!(fid(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = fs(&[vec![-1.0], vec![1.0]]);
        let b = fs(&[vec![0.0], vec![2.0]]);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    /// `tr(P^½)` for a 2×2 matrix with real non-negative spectrum.
    fn trace_sqrt_2x2(p: [[f64; 2]; 2]) -> f64 {
        let tr = p[0][0] + p[1][1];
        let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
        (tr + 2.0 * det.sqrt()).sqrt()
    }

    #[test]
    fn gaussian_matches_closed_form() {
        let (mu1, l1): ([f64; 2], _) = ([0.0, 0.0], [[1.0, 0.0], [0.5, 1.0]]);
        let (mu2, l2): ([f64; 2], _) = ([1.0, -2.0], [[2.0, 0.0], [-0.3, 0.7]]);
        let cov = |l: [[f64; 2]; 2]| {
            let mut c = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] = l[i][0] * l[j][0] + l[i][1] * l[j][1];
                }
            }
            c
        };
        let (c1, c2) = (cov(l1), cov(l2));
        let mut prod = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                prod[i][j] = c1[i][0] * c2[0][j] + c1[i][1] * c2[1][j];
            }
        }
        let mean_term = (mu1[0] - mu2[0]).powi(2) + (mu1[1] - mu2[1]).powi(2);
        let want = mean_term + c1[0][0] + c1[1][1] + c2[0][0] + c2[1][1] - 2.0 * trace_sqrt_2x2(prod);
        let a = fs(&gaussian_rows(10_000, mu1, l1, 3));
        let b = fs(&gaussian_rows(10_000, mu2, l2, 4));
        let got = fid(&a, &b).unwrap();
        assert!((got - want).abs() / want < 0.05, "{got} vs {want}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let a = fs(&gaussian_rows(200, [0.0, 1.0], [[1.0, 0.0], [0.2, 0.5]], 5));
        let b = fs(&gaussian_rows(300, [0.5, 0.0], [[0.7, 0.0], [0.1, 1.5]], 6));
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9 && ab >= 0.0);
    }

    #[test]
    fn sqrt_product_residual() {
        let mut rng = Seed(7).rng();
        for d in [2, 5, 12] {
            let x = DMatrix::from_fn(d, d, |_, _| rand::Rng::random::<f64>(&mut rng) - 0.5);
            let y = DMatrix::from_fn(d, d, |_, _| rand::Rng::random::<f64>(&mut rng) - 0.5);
            let a = &x * x.transpose() + DMatrix::identity(d, d) * 0.5;
            let b = &y * y.transpose() + DMatrix::identity(d, d) * 0.5;
            let s = sqrt_product(&a, &b).unwrap();
            let ab = &a * &b;
            let res = (&s * &s - &ab).norm() / ab.norm();
            assert!(res < 1e-8, "d={d}: {res}");
            assert!((s.trace() - trace_sqrt_product(&a, &b).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        let a = fs(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        let b = fs(&[vec![1.0], vec![2.0]]);
        assert_eq!(fid(&a, &b), Err(MetricError::DimMismatch { a: 2, b: 1 }));
        let one = fs(&[vec![1.0, 2.0]]);
        assert_eq!(fid(&one, &a), Err(MetricError::TooFewSamples { got: 1, need: 2 }));
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(sqrtm_psd(&neg), Err(MetricError::NumericalInstability(_))));
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        assert!(sqrtm_psd(&tiny).is_ok());
    }
}
