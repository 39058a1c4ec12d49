//! PCA rank of captured activations: the fewest principal components that
//! reach a cumulative variance threshold, and the variance left over.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaRank {
    pub k95: usize,
    pub spill: f64,
    /// Explained-variance ratios, descending.
    pub spectrum: Vec<f64>,
}

/// `(k, spill)` from a variance spectrum (any scale, any order). Searches
/// `k ≤ min(cap, len)`; if the threshold is never reached, `k = cap`.
pub fn k95_from_spectrum(spectrum: &[f64], cap: usize, threshold: f64) -> (usize, f64) {
    let mut vals: Vec<f64> = spectrum.iter().map(|v| v.max(0.0)).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = vals.iter().sum();
    if total <= 0.0 || vals.is_empty() {
        return (1, 0.0);
    }
    let limit = cap.min(vals.len()).max(1);
    let mut cum = 0.0;
    for (i, v) in vals.iter().take(limit).enumerate() {
        cum += v / total;
        if cum >= threshold - 1e-12 {
            return (i + 1, (1.0 - cum).max(0.0));
        }
    }
    (limit, (1.0 - cum).max(0.0))
}

/// Column-centred sample covariance (divisor `N − 1`).
pub fn covariance(a: &Matrix) -> Matrix {
    let (n, d) = a.shape();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(a.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = Matrix::from_fn(n, d, |r, c| a.get(r, c) - mean[c]);
    let mut cov = centred.gram();
    let denom = (n.max(2) - 1) as f64;
    cov.as_mut_slice().iter_mut().for_each(|v| *v /= denom);
    cov
}

/// Rank from an exact eigendecomposition of a covariance matrix.
pub fn rank_from_covariance(cov: &Matrix, cap: usize, threshold: f64) -> PcaRank {
    let d = cov.rows();
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let scale = (0..d).map(|i| cov.get(i, i).abs()).fold(0.0, f64::max);
    // Rows that are all identical leave only rounding noise behind.
    if d == 0 || trace <= 1e-24 * scale.max(1.0) {
        return PcaRank {
            k95: 1,
            spill: 0.0,
            spectrum: vec![0.0; d],
        };
    }
    let m = DMatrix::from_fn(d, d, |r, c| 0.5 * (cov.get(r, c) + cov.get(c, r)));
    let eig = SymmetricEigen::new(m);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = vals.iter().sum();
    let (k95, spill) = k95_from_spectrum(&vals, cap, threshold);
    PcaRank {
        k95,
        spill,
        spectrum: vals.iter().map(|v| v / total).collect(),
    }
}

/// PCA rank of an `N×d` sample matrix.
pub fn pca_rank(a: &Matrix, cap: usize, threshold: f64) -> Result<PcaRank> {
    if a.rows() < 2 {
        return Err(Error::invalid(format!(
            "PCA needs at least 2 rows, got {}",
            a.rows()
        )));
    }
    Ok(rank_from_covariance(&covariance(a), cap, threshold))
}

/// Single-pass covariance (Welford / Chan updates) for inputs too large to
/// hold as a sample matrix. Yields the same [`PcaRank`] as [`pca_rank`] up
/// to rounding.
#[derive(Debug, Clone)]
pub struct StreamingCovariance {
    n: u64,
    mean: Vec<f64>,
    /// Co-moment `Σ (x − mean)(x − mean)ᵀ`, row-major.
    m2: Vec<f64>,
}

impl StreamingCovariance {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn push(&mut self, row: &[f64]) {
        let d = self.dim();
        assert_eq!(row.len(), d, "row width mismatch");
        self.n += 1;
        let n = self.n as f64;
        let delta: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            let after_i = row[i] - self.mean[i];
            for j in 0..d {
                self.m2[i * d + j] += after_i * delta[j];
            }
        }
    }

    pub fn merge(&mut self, other: &StreamingCovariance) {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let d = self.dim();
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..d {
            for j in 0..d {
                self.m2[i * d + j] += other.m2[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.n += other.n;
    }

    pub fn covariance(&self) -> Matrix {
        let d = self.dim();
        let denom = (self.n.max(2) - 1) as f64;
        Matrix::from_fn(d, d, |i, j| self.m2[i * d + j] / denom)
    }

    pub fn pca_rank(&self, cap: usize, threshold: f64) -> Result<PcaRank> {
        if self.n < 2 {
            return Err(Error::invalid("PCA needs at least 2 rows"));
        }
        Ok(rank_from_covariance(&self.covariance(), cap, threshold))
    }
}
