use super::{DivergenceError, EmbeddingMatrix};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Other rows ordered by Euclidean distance to row `i`, ties by row index.
fn neighbour_order(m: &EmbeddingMatrix, i: usize) -> Vec<usize> {
    let anchor = m.row(i);
    let mut others: Vec<(f64, usize)> =
        (0..m.len()).filter(|&j| j != i).map(|j| (sq_dist(anchor, m.row(j)), j)).collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().map(|(_, j)| j).collect()
}

/// Neighbourhood preservation of a reduction, in [0, 1].
///
/// Penalises every row that enters a point's reduced-space k-neighbourhood
/// without being among its original k nearest, weighted by how far down
/// the original ranking it sits.
pub fn trustworthiness(original: &EmbeddingMatrix, reduced: &EmbeddingMatrix, k: usize) -> Result<f64, DivergenceError> {
    let n = original.len();
    if reduced.len() != n {
        return Err(DivergenceError::Format(format!("row counts differ: {n} vs {}", reduced.len())));
    }
    if k == 0 || 2 * k >= n {
        return Err(DivergenceError::InvalidK { k, n });
    }
    let mut penalty = 0usize;
    let mut rank = vec![0usize; n];
    for i in 0..n {
        for (r, j) in neighbour_order(original, i).into_iter().enumerate() {
            rank[j] = r + 1;
        }
        let original_knn = &rank;
        for &j in neighbour_order(reduced, i).iter().take(k) {
            if original_knn[j] > k {
                penalty += original_knn[j] - k;
            }
        }
    }
    let (n, k) = (n as f64, k as f64);
    Ok(1.0 - 2.0 / (n * k * (2.0 * n - 3.0 * k - 1.0)) * penalty as f64)
}
