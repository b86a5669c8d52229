//! Slow, obviously-correct reference implementations used by the oracle tests.
//! Nothing here calls into the crate's analytics.

use std::collections::HashMap;

use nalgebra::DMatrix;

/// (tp, fp, tn, fn) by direct recount; `true` is the positive class.
pub fn confusion(pairs: &[(bool, bool)]) -> (usize, usize, usize, usize) {
    let tp = pairs.iter().filter(|(p, g)| *p && *g).count();
    let fp = pairs.iter().filter(|(p, g)| *p && !*g).count();
    let tn = pairs.iter().filter(|(p, g)| !*p && !*g).count();
    let fn_ = pairs.iter().filter(|(p, g)| !*p && *g).count();
    (tp, fp, tn, fn_)
}

/// (precision, recall, f1) with zero for undefined ratios.
pub fn prf(pairs: &[(bool, bool)]) -> (f64, f64, f64) {
    let (tp, fp, _, fn_) = confusion(pairs);
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Hand-count vote: `Some(true)` = yes. Returns (label, tie).
pub fn vote(runs: &[Option<bool>]) -> (Option<bool>, bool) {
    let yes = runs.iter().filter(|r| **r == Some(true)).count();
    let no = runs.iter().filter(|r| **r == Some(false)).count();
    if yes + no == 0 {
        (None, false)
    } else if yes > no {
        (Some(true), false)
    } else if no > yes {
        (Some(false), false)
    } else {
        (Some(false), true)
    }
}

pub fn cos_dist(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    (1.0 - (dot / (nu * nv)).clamp(-1.0, 1.0)) / 2.0
}

pub fn sorted_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-model post vectors: model -> post -> row.
pub type Roster = Vec<(String, HashMap<String, Vec<f64>>)>;

/// Medians of matched-post distances from `owner` to each other model, in roster order.
pub fn sdv(owner: &str, roster: &Roster) -> Vec<f64> {
    let rows_a = &roster.iter().find(|(m, _)| m == owner).unwrap().1;
    roster
        .iter()
        .filter(|(m, _)| m != owner)
        .map(|(_, rows_b)| {
            let d: Vec<f64> =
                rows_a.iter().filter_map(|(post, a)| rows_b.get(post).map(|b| cos_dist(a, b))).collect();
            sorted_median(&d)
        })
        .collect()
}

/// ECDF of `sample` at `t`: fraction of values `<= t`.
pub fn ecdf(sample: &[f64], t: f64) -> f64 {
    sample.iter().filter(|x| **x <= t).count() as f64 / sample.len() as f64
}

/// (two-sided, greater, less) statistics by evaluating both ECDFs at every
/// observed point.
pub fn ks_statistics(pos: &[f64], neg: &[f64]) -> (f64, f64, f64) {
    let (mut up, mut down) = (0.0f64, 0.0f64);
    for &t in pos.iter().chain(neg) {
        let d = ecdf(pos, t) - ecdf(neg, t);
        if d > up {
            up = d;
        }
        if -d > down {
            down = -d;
        }
    }
    (up.max(down), up, down)
}

/// Applies the declared sign convention: the largest-magnitude loading is
/// positive, near-ties resolved to the lowest index.
pub fn sign_convention(axis: &mut [f64]) {
    let peak = axis.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(lead) = axis.iter().find(|x| x.abs() >= peak * (1.0 - 1e-9)).copied() {
        if lead < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// PCA scores through a thin SVD of the centred data.
pub fn svd_projection(data: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = data.nrows();
    let mut centered = data.clone();
    for j in 0..data.ncols() {
        let mean = data.column(j).sum() / n as f64;
        centered.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let mut out = DMatrix::zeros(n, k);
    for (c, &i) in order.iter().take(k).enumerate() {
        let mut axis: Vec<f64> = v_t.row(i).iter().copied().collect();
        sign_convention(&mut axis);
        for r in 0..n {
            out[(r, c)] = centered.row(r).iter().zip(&axis).map(|(x, a)| x * a).sum();
        }
    }
    out
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Rank of `j` among the neighbours of `i`: one plus the number of points
/// strictly closer, or equally close with a smaller index.
fn rank(points: &[Vec<f64>], i: usize, j: usize) -> usize {
    let dij = euclid(&points[i], &points[j]);
    1 + (0..points.len())
        .filter(|&l| l != i && l != j)
        .filter(|&l| {
            let dil = euclid(&points[i], &points[l]);
            dil < dij || (dil == dij && l < j)
        })
        .count()
}

/// Trustworthiness by exhaustive pairwise rank computation.
pub fn trustworthiness(original: &[Vec<f64>], reduced: &[Vec<f64>], k: usize) -> f64 {
    let n = original.len();
    let mut penalty = 0usize;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let r_orig = rank(original, i, j);
            if rank(reduced, i, j) <= k && r_orig > k {
                penalty += r_orig - k;
            }
        }
    }
    let (n, k) = (n as f64, k as f64);
    1.0 - 2.0 / (n * k * (2.0 * n - 3.0 * k - 1.0)) * penalty as f64
}
