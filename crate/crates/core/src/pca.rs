//! Principal component analysis via symmetric eigen-decomposition of the
//! sample covariance.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::linalg::symmetric_eigen;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PcaError {
    #[error("PCA needs at least 2 rows, got {0}")]
    DegenerateData(usize),
    #[error("input has {found} columns, basis expects {expected}")]
    DimMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// d × k, unit columns ordered by descending explained variance.
    pub components: Array2<f64>,
    pub explained_variance: Array1<f64>,
}

impl Pca {
    /// Fit on rows of `x`, keeping `min(n_components, d)` components. Each
    /// component's largest-magnitude entry is made positive.
    pub fn fit(x: ArrayView2<'_, f64>, n_components: usize) -> Result<Pca, PcaError> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(PcaError::DegenerateData(n));
        }
        let k = n_components.min(d);
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let centered = &x - &mean;
        let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        let (values, vectors) = symmetric_eigen(cov.view());
        let mut components = vectors.slice(ndarray::s![.., ..k]).to_owned();
        for mut col in components.columns_mut() {
            let mut pivot = 0;
            for i in 1..col.len() {
                if col[i].abs() > col[pivot].abs() {
                    pivot = i;
                }
            }
            if col[pivot] < 0.0 {
                col.mapv_inplace(|v| -v);
            }
        }
        let explained_variance = values.slice(ndarray::s![..k]).mapv(|v| v.max(0.0));
        Ok(Pca { mean, components, explained_variance })
    }

    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    /// Scores of `x` on the components; zero-variance directions give zero.
    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, PcaError> {
        if x.ncols() != self.mean.len() {
            return Err(PcaError::DimMismatch { expected: self.mean.len(), found: x.ncols() });
        }
        Ok((&x - &self.mean).dot(&self.components))
    }

    pub fn inverse_transform(&self, scores: ArrayView2<'_, f64>) -> Array2<f64> {
        scores.dot(&self.components.t()) + &self.mean
    }
}

/// Fit and project in one step.
pub fn pca_reduce(x: ArrayView2<'_, f64>, n_components: usize) -> Result<(Array2<f64>, Pca), PcaError> {
    let pca = Pca::fit(x, n_components)?;
    let scores = pca.transform(x)?;
    Ok((scores, pca))
}
