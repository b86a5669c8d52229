//! Principal component analysis by symmetric eigendecomposition.
//!
//! When there are at least as many rows as columns the width x width sample
//! covariance is decomposed; otherwise the rows x rows Gram matrix is, and
//! components are recovered from its eigenvectors. Either way the output
//! axes are sorted by descending variance and each component is signed so
//! that its largest-magnitude loading is positive.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use super::{DivergenceError, EmbeddingMatrix};

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// `target_dim` rows, each a unit-length principal axis in input space.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Number of axes with non-negligible variance.
    pub rank: usize,
}

impl PcaFit {
    pub fn transform(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.components.len();
        let mut out = DMatrix::zeros(data.nrows(), k);
        for i in 0..data.nrows() {
            for (c, axis) in self.components.iter().enumerate() {
                out[(i, c)] = axis.iter().enumerate().map(|(j, a)| (data[(i, j)] - self.mean[j]) * a).sum();
            }
        }
        out
    }
}

fn center(data: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = data.nrows() as f64;
    let mean: Vec<f64> = (0..data.ncols()).map(|j| data.column(j).sum() / n).collect();
    let mut centered = data.clone();
    for j in 0..data.ncols() {
        for i in 0..data.nrows() {
            centered[(i, j)] -= mean[j];
        }
    }
    (centered, mean)
}

fn sorted_eigen(sym: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    (values, vectors)
}

/// Near-ties in magnitude go to the lowest index so that rounding noise
/// cannot flip the sign between equivalent fits.
fn fix_sign(axis: &mut DVector<f64>) {
    let peak = axis.amax();
    if let Some(lead) = axis.iter().find(|x| x.abs() >= peak * (1.0 - 1e-9)) {
        if *lead < 0.0 {
            axis.neg_mut();
        }
    }
}

fn fit_inner(data: &DMatrix<f64>, target_dim: usize, allow_deficient: bool) -> Result<PcaFit, DivergenceError> {
    let (n, d) = (data.nrows(), data.ncols());
    if target_dim == 0 || n < 2 || target_dim > (n - 1).min(d) {
        return Err(DivergenceError::InvalidDimension { target_dim, rows: n, width: d });
    }
    let (centered, mean) = center(data);
    let dof = (n - 1) as f64;

    let (variances, axes): (Vec<f64>, Vec<DVector<f64>>) = if d <= n {
        let cov = centered.transpose() * &centered / dof;
        let (values, vectors) = sorted_eigen(cov);
        let axes = (0..d).map(|c| vectors.column(c).into_owned()).collect();
        (values, axes)
    } else {
        let gram = &centered * centered.transpose() / dof;
        let (values, vectors) = sorted_eigen(gram);
        let axes = values
            .iter()
            .enumerate()
            .map(|(c, &lambda)| {
                let v = centered.transpose() * vectors.column(c);
                let norm = v.norm();
                if lambda > 0.0 && norm > 0.0 {
                    v / norm
                } else {
                    DVector::zeros(d)
                }
            })
            .collect();
        (values, axes)
    };

    let top = variances.first().copied().unwrap_or(0.0);
    let rank = if top <= 0.0 { 0 } else { variances.iter().filter(|&&v| v > top * RANK_TOLERANCE).count() };
    if rank < target_dim && !allow_deficient {
        return Err(DivergenceError::RankDeficient { requested: target_dim, achievable: rank });
    }
    let total: f64 = variances.iter().sum();

    let mut components = Vec::with_capacity(target_dim);
    let mut explained_variance = Vec::with_capacity(target_dim);
    for (c, mut axis) in axes.into_iter().take(target_dim).enumerate() {
        if c >= rank {
            // Axes beyond the data's rank carry no signal; project to zero.
            axis.fill(0.0);
            explained_variance.push(0.0);
        } else {
            fix_sign(&mut axis);
            explained_variance.push(variances[c]);
        }
        components.push(axis.iter().copied().collect());
    }
    let explained_variance_ratio =
        explained_variance.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    Ok(PcaFit { mean, components, explained_variance, explained_variance_ratio, rank })
}

/// Fits PCA, rejecting targets above the data's numerical rank.
pub fn fit_pca(data: &DMatrix<f64>, target_dim: usize) -> Result<PcaFit, DivergenceError> {
    fit_inner(data, target_dim, false)
}

/// Like [`fit_pca`] but zero-fills axes past the numerical rank.
pub fn fit_pca_lenient(data: &DMatrix<f64>, target_dim: usize) -> Result<PcaFit, DivergenceError> {
    fit_inner(data, target_dim, true)
}

/// Projects `m` onto its top `target_dim` principal axes.
pub fn reduce_pca(m: &EmbeddingMatrix, target_dim: usize) -> Result<(EmbeddingMatrix, PcaFit), DivergenceError> {
    let data = m.to_dmatrix();
    let fit = fit_pca(&data, target_dim)?;
    let projected = fit.transform(&data);
    let mut flat = Vec::with_capacity(projected.len());
    for i in 0..projected.nrows() {
        flat.extend(projected.row(i).iter().copied());
    }
    Ok((m.with_data(target_dim, flat)?, fit))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_rank_two_explains_everything() {
        // Points in the plane spanned by two orthogonal directions of R^4.
        let coords = [(1.0, 0.0), (-1.0, 2.0), (0.5, -1.5), (3.0, 1.0), (-2.0, -0.5)];
        let mut rows = Vec::new();
        for (a, b) in coords {
            rows.extend([a, b, a, -b]);
        }
        let data = DMatrix::from_row_slice(5, 4, &rows);
        let fit = fit_pca(&data, 2).unwrap();
        assert_eq!(fit.rank, 2);
        assert!((fit.explained_variance_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(fit_pca(&data, 3), Err(DivergenceError::RankDeficient { requested: 3, achievable: 2 })));
        let lenient = fit_pca_lenient(&data, 3).unwrap();
        assert!(lenient.components[2].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn dimension_bounds() {
        let data = DMatrix::from_row_slice(3, 4, &[1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 0.0, 2.0, 5.0, 1.0, 1.0, 0.0]);
        assert!(matches!(fit_pca(&data, 3), Err(DivergenceError::InvalidDimension { .. })));
        assert!(matches!(fit_pca(&data, 0), Err(DivergenceError::InvalidDimension { .. })));
        assert!(fit_pca(&data, 2).is_ok());
    }

    #[test]
    fn signs_follow_largest_loading() {
        let data = DMatrix::from_row_slice(4, 2, &[-3.0, 0.1, 3.0, -0.1, -1.0, 0.0, 1.0, 0.2]);
        let fit = fit_pca(&data, 2).unwrap();
        for axis in &fit.components {
            let max = axis.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        // 4 rows, 6 columns forces the Gram route; compare against the
        // covariance route on the transposed problem's equivalent data by
        // padding rows with duplicates of the centroid (variance unchanged
        // in direction, scaled by dof).
        let rows = [
            [1.0, 0.0, 2.0, -1.0, 0.5, 3.0],
            [0.0, 1.0, -1.0, 2.0, 1.5, -2.0],
            [2.0, -1.0, 0.0, 1.0, -0.5, 1.0],
            [-1.0, 2.0, 1.0, 0.0, 2.0, 0.0],
        ];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let wide = DMatrix::from_row_slice(4, 6, &flat);
        let fit = fit_pca(&wide, 3).unwrap();

        let mean: Vec<f64> = (0..6).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 4.0).collect();
        let mut padded = flat.clone();
        for _ in 0..4 {
            padded.extend(&mean);
        }
        let tall = DMatrix::from_row_slice(8, 6, &padded);
        let tall_fit = fit_pca(&tall, 3).unwrap();
        for c in 0..3 {
            for j in 0..6 {
                assert!((fit.components[c][j] - tall_fit.components[c][j]).abs() < 1e-9);
            }
            assert!((fit.explained_variance[c] * 3.0 - tall_fit.explained_variance[c] * 7.0).abs() < 1e-9);
        }
    }
}
