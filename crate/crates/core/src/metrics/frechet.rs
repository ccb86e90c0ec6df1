//! Gaussian fits, Fréchet distance and diversity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues down to this (negative) value are treated as rounding noise.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Shape(format!("mean of length {d} with {}x{} covariance", cov.nrows(), cov.ncols())));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite Gaussian statistics".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > PSD_TOLERANCE {
                    return Err(Error::Numerical("covariance is not symmetric".into()));
                }
            }
        }
        let s = Self { mean, cov };
        s.clamped_eigen()?;
        Ok(s)
    }

    /// Sample mean and unbiased covariance of `samples` (rows).
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Invalid(format!("need at least 2 samples, got {}", samples.len())));
        }
        let d = samples[0].len();
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::Shape("samples must share a positive dimension".into()));
        }
        let n = samples.len();
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let mut centered = x;
        for j in 0..d {
            let m = mean[j];
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        // Exact symmetry for the eigen solver.
        let t = cov.transpose();
        cov = (&cov + t) * 0.5;
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Eigen-decomposition with eigenvalues in `[-tol, 0)` clamped to zero.
    fn clamped_eigen(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let eig = SymmetricEigen::new(self.cov.clone());
        let scale = self.cov.amax().max(1.0);
        let mut vals = eig.eigenvalues.clone();
        for v in vals.iter_mut() {
            if *v < -PSD_TOLERANCE * scale {
                return Err(Error::Numerical(format!("covariance has negative eigenvalue {v}")));
            }
            *v = v.max(0.0);
        }
        Ok((vals, eig.eigenvectors))
    }

    fn sqrt_cov(&self) -> Result<DMatrix<f64>> {
        let (vals, vecs) = self.clamped_eigen()?;
        let d = DMatrix::from_diagonal(&vals.map(f64::sqrt));
        Ok(&vecs * d * vecs.transpose())
    }
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// The trace of the cross term is computed as `tr((A S2 A)^(1/2))` with
/// `A = S1^(1/2)`, which has the same eigenvalues as `S1 S2` and stays
/// symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dimensions {} and {} differ", a.dim(), b.dim())));
    }
    let diff = &a.mean - &b.mean;
    let root = a.sqrt_cov()?;
    let mut m = &root * &b.cov * &root;
    let t = m.transpose();
    m = (&m + t) * 0.5;
    let eig = SymmetricEigen::new(m);
    let cross: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fgd(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    frechet_distance(&GaussianStats::fit(real)?, &GaussianStats::fit(generated)?)
}

/// Mean pairwise Euclidean distance over all unordered pairs.
pub fn diversity(feats: &[Vec<f64>]) -> Result<f64> {
    if feats.len() < 2 {
        return Err(Error::Invalid(format!("diversity needs at least 2 vectors, got {}", feats.len())));
    }
    let d = feats[0].len();
    if feats.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            sum += feats[i]
                .iter()
                .zip(&feats[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}
