//! Cross-model and intra-model distances over response embeddings.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pca::fit_pca_lenient;
use super::{DivergenceError, EmbeddingMatrix};
use crate::corpus::Label;

/// Cosine distance rescaled to [0, 1]: 0 for parallel, 1 for opposite.
pub fn cos_dist(u: &[f64], v: &[f64]) -> Result<f64, DivergenceError> {
    let nu = u.iter().map(|x| x * x).sum::<f64>();
    let nv = v.iter().map(|x| x * x).sum::<f64>();
    if nu == 0.0 || nv == 0.0 {
        return Err(DivergenceError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    // sqrt of a product keeps u == v at exactly zero
    let cos = (dot / (nu * nv).sqrt()).clamp(-1.0, 1.0);
    Ok((1.0 - cos) / 2.0)
}

/// Unit rows plus the rescaled distance between two of them.
struct UnitRows {
    width: usize,
    data: Vec<f64>,
}

impl UnitRows {
    fn new<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Result<Self, DivergenceError> {
        let mut data = Vec::new();
        for r in rows {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(DivergenceError::ZeroVector);
            }
            data.extend(r.iter().map(|x| x / norm));
        }
        Ok(UnitRows { width, data })
    }

    fn len(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    fn dist(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let a = &self.data[i * self.width..(i + 1) * self.width];
        let b = &self.data[j * self.width..(j + 1) * self.width];
        let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0);
        (1.0 - cos) / 2.0
    }
}

/// One distance per post shared by models `a` and `b`, in `a`'s row order.
pub fn cross_model_distribution(a: &str, b: &str, m: &EmbeddingMatrix) -> Result<Vec<f64>, DivergenceError> {
    let rows_b: HashMap<&str, &[f64]> = m.model_rows(b)?.into_iter().collect();
    let mut out = Vec::new();
    for (post, row_a) in m.model_rows(a)? {
        if let Some(row_b) = rows_b.get(post) {
            out.push(cos_dist(row_a, row_b)?);
        }
    }
    if out.is_empty() {
        return Err(DivergenceError::EmptySharedSet { a: a.into(), b: b.into() });
    }
    Ok(out)
}

/// Median by sorting; even lengths average the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDistanceVector {
    pub owner_model: String,
    /// `(other_model, median distance)` in roster order, owner skipped.
    pub entries: Vec<(String, f64)>,
}

impl SemanticDistanceVector {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, d)| *d).collect()
    }
}

/// Median distance from `a` to every other roster model.
pub fn sdv(a: &str, roster: &[String], m: &EmbeddingMatrix) -> Result<SemanticDistanceVector, DivergenceError> {
    if roster.len() < 2 {
        return Err(DivergenceError::RosterTooSmall { needed: 2, got: roster.len() });
    }
    if !roster.iter().any(|r| r == a) {
        return Err(DivergenceError::UnknownModel(a.into()));
    }
    let entries = roster
        .iter()
        .filter(|other| other.as_str() != a)
        .map(|other| {
            let d = cross_model_distribution(a, other, m)?;
            Ok((other.clone(), median(&d).expect("distribution is non-empty")))
        })
        .collect::<Result<_, DivergenceError>>()?;
    Ok(SemanticDistanceVector { owner_model: a.into(), entries })
}

/// Mean of an SDV's entries.
pub fn scmd(v: &SemanticDistanceVector) -> Result<f64, DivergenceError> {
    if v.entries.is_empty() {
        return Err(DivergenceError::EmptySample);
    }
    Ok(v.entries.iter().map(|(_, d)| d).sum::<f64>() / v.entries.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub model: String,
    pub x: f64,
    pub y: f64,
}

/// Projects stacked SDVs onto their first two principal components.
/// Components beyond the rank of the stack come out as zero.
pub fn pca_cluster_models(sdvs: &[SemanticDistanceVector]) -> Result<Vec<ModelPoint>, DivergenceError> {
    if sdvs.len() < 3 {
        return Err(DivergenceError::RosterTooSmall { needed: 3, got: sdvs.len() });
    }
    let width = sdvs[0].entries.len();
    if let Some(bad) = sdvs.iter().position(|s| s.entries.len() != width) {
        return Err(DivergenceError::RaggedRow { row: bad, expected: width, got: sdvs[bad].entries.len() });
    }
    let flat: Vec<f64> = sdvs.iter().flat_map(|s| s.values()).collect();
    let data = DMatrix::from_row_slice(sdvs.len(), width, &flat);
    let fit = fit_pca_lenient(&data, 2)?;
    let proj = fit.transform(&data);
    Ok(sdvs
        .iter()
        .enumerate()
        .map(|(i, s)| ModelPoint { model: s.owner_model.clone(), x: proj[(i, 0)], y: proj[(i, 1)] })
        .collect())
}

/// Mean distances within the positive group, within the negative group and
/// across the two. `None` where a group has no pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n_pos: usize,
    pub n_neg: usize,
    pub pos_pos: Option<f64>,
    pub neg_neg: Option<f64>,
    pub pos_neg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntraModelMatrix {
    /// Post ids in matrix order: predicted positives first.
    pub order: Vec<String>,
    pub labels: Vec<Label>,
    /// Row-major `order.len()` squared distances.
    pub distances: Vec<f64>,
    pub summary: GroupSummary,
}

impl IntraModelMatrix {
    pub fn size(&self) -> usize {
        self.order.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.order.len() + j]
    }
}

/// Model `a`'s rows ordered positives first (stable within each group).
type LabelledRow<'m> = (&'m str, Label, &'m [f64]);

fn grouped_rows<'m>(
    a: &str,
    m: &'m EmbeddingMatrix,
    preds: &HashMap<String, Label>,
) -> Result<Vec<LabelledRow<'m>>, DivergenceError> {
    let mut rows: Vec<LabelledRow> = m
        .model_rows(a)?
        .into_iter()
        .map(|(post, row)| {
            let label = preds.get(post).ok_or_else(|| DivergenceError::MissingPrediction(post.to_owned()))?;
            Ok((post, *label, row))
        })
        .collect::<Result<_, DivergenceError>>()?;
    if rows.is_empty() {
        return Err(DivergenceError::UnknownModel(a.into()));
    }
    rows.sort_by_key(|(_, l, _)| !l.is_positive());
    Ok(rows)
}

fn summarize(unit: &UnitRows, n_pos: usize) -> GroupSummary {
    let n = unit.len();
    // (pos-pos sum, neg-neg sum, cross sum) over i < j.
    let sums = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = [0.0f64; 3];
            for j in i + 1..n {
                let d = unit.dist(i, j);
                match (i < n_pos, j < n_pos) {
                    (true, true) => acc[0] += d,
                    (false, false) => acc[1] += d,
                    _ => acc[2] += d,
                }
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold([0.0; 3], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
    let n_neg = n - n_pos;
    let pairs = |k: usize| k * k.saturating_sub(1) / 2;
    let mean = |sum: f64, count: usize| (count > 0).then(|| sum / count as f64);
    GroupSummary {
        n_pos,
        n_neg,
        pos_pos: mean(sums[0], pairs(n_pos)),
        neg_neg: mean(sums[1], pairs(n_neg)),
        pos_neg: mean(sums[2], n_pos * n_neg),
    }
}

/// Group means only, without materialising the N x N matrix.
pub fn intra_model_summary(
    a: &str,
    m: &EmbeddingMatrix,
    preds: &HashMap<String, Label>,
) -> Result<GroupSummary, DivergenceError> {
    let rows = grouped_rows(a, m, preds)?;
    let n_pos = rows.iter().filter(|(_, l, _)| l.is_positive()).count();
    let unit = UnitRows::new(rows.iter().map(|(_, _, r)| *r), m.width())?;
    Ok(summarize(&unit, n_pos))
}

/// Full pairwise distance matrix of model `a`'s responses, reordered by
/// predicted label, with group summary.
pub fn intra_model_matrix(
    a: &str,
    m: &EmbeddingMatrix,
    preds: &HashMap<String, Label>,
) -> Result<IntraModelMatrix, DivergenceError> {
    let rows = grouped_rows(a, m, preds)?;
    let n = rows.len();
    let n_pos = rows.iter().filter(|(_, l, _)| l.is_positive()).count();
    let unit = UnitRows::new(rows.iter().map(|(_, _, r)| *r), m.width())?;
    let mut distances = vec![0.0; n * n];
    distances.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        for (j, slot) in out.iter_mut().enumerate() {
            // Symmetric by construction: the (min, max) pair is always evaluated.
            *slot = unit.dist(i.min(j), i.max(j));
        }
    });
    Ok(IntraModelMatrix {
        order: rows.iter().map(|(p, _, _)| p.to_string()).collect(),
        labels: rows.iter().map(|(_, l, _)| *l).collect(),
        distances,
        summary: summarize(&unit, n_pos),
    })
}
