use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::distance::cos_dist;
use super::DivergenceError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohesionMode {
    /// Per row: mean distance to `k` other rows drawn without replacement.
    #[default]
    PerRow,
    /// Draw `k` rows once; each scores its mean distance to the other `k - 1`.
    SampledPairwise,
}

/// Fixed-`k` cohesion scores for one group of response vectors.
///
/// Sampling uses a ChaCha8 stream seeded with `seed`, so equal inputs give
/// bit-identical output.
pub fn cohesion_scores(rows: &[&[f64]], k: usize, seed: u64, mode: CohesionMode) -> Result<Vec<f64>, DivergenceError> {
    let n = rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        CohesionMode::PerRow => {
            if k == 0 || n <= k {
                return Err(DivergenceError::GroupTooSmall { size: n, k });
            }
            let mut scores = Vec::with_capacity(n);
            for i in 0..n {
                let mut sum = 0.0;
                for j in sample(&mut rng, n - 1, k).iter() {
                    let j = if j >= i { j + 1 } else { j };
                    sum += cos_dist(rows[i], rows[j])?;
                }
                scores.push(sum / k as f64);
            }
            Ok(scores)
        }
        CohesionMode::SampledPairwise => {
            if k < 2 || n < k {
                return Err(DivergenceError::GroupTooSmall { size: n, k });
            }
            let mut picked = sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            let mut scores = Vec::with_capacity(k);
            for &i in &picked {
                let mut sum = 0.0;
                for &j in picked.iter().filter(|&&j| j != i) {
                    sum += cos_dist(rows[i], rows[j])?;
                }
                scores.push(sum / (k - 1) as f64);
            }
            Ok(scores)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_score_zero() {
        let row = [0.3, -1.0, 2.0];
        let rows = vec![&row[..]; 6];
        assert!(cohesion_scores(&rows, 3, 1, CohesionMode::PerRow).unwrap().iter().all(|s| *s == 0.0));
        assert!(cohesion_scores(&rows, 3, 1, CohesionMode::SampledPairwise).unwrap().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn group_of_three_k_two_is_forced() {
        let (a, b, c) = ([1.0, 0.0], [0.0, 1.0], [1.0, 1.0]);
        let rows: Vec<&[f64]> = vec![&a, &b, &c];
        let s = cohesion_scores(&rows, 2, 99, CohesionMode::PerRow).unwrap();
        let ab = 0.5;
        let ac = (1.0 - 1.0 / 2f64.sqrt()) / 2.0;
        let bc = ac;
        assert!((s[0] - (ab + ac) / 2.0).abs() < 1e-15);
        assert!((s[1] - (ab + bc) / 2.0).abs() < 1e-15);
        assert!((s[2] - (ac + bc) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn group_must_exceed_k() {
        let r = [1.0];
        let rows: Vec<&[f64]> = vec![&r, &r];
        assert!(matches!(cohesion_scores(&rows, 2, 0, CohesionMode::PerRow), Err(DivergenceError::GroupTooSmall { size: 2, k: 2 })));
        assert!(cohesion_scores(&rows, 2, 0, CohesionMode::SampledPairwise).is_ok());
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), 1.0]).collect();
        let rows: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let a = cohesion_scores(&rows, 10, 5, CohesionMode::PerRow).unwrap();
        let b = cohesion_scores(&rows, 10, 5, CohesionMode::PerRow).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_ne!(a, cohesion_scores(&rows, 10, 6, CohesionMode::PerRow).unwrap());
    }
}
