//! Two-sample Kolmogorov-Smirnov tests with asymptotic p-values.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::DivergenceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// `F_pos(x) > F_neg(x)` somewhere: the positive sample sits lower.
    Greater,
    /// `F_pos(x) < F_neg(x)` somewhere: the positive sample sits higher.
    Less,
}

impl fmt::Display for Alternative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alternative::TwoSided => "two_sided",
            Alternative::Greater => "greater",
            Alternative::Less => "less",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub alternative: Alternative,
    pub m: usize,
    pub n: usize,
}

impl KsResult {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }

    pub fn stars(&self) -> &'static str {
        significance_stars(self.p_value)
    }
}

/// `***` below 0.001, `**` below 0.01, `*` below 0.05.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Largest positive and negative excursions of `F_pos - F_neg`, both >= 0.
fn signed_suprema(pos: &[f64], neg: &[f64]) -> (f64, f64) {
    let (m, n) = (pos.len(), neg.len());
    let (mut i, mut j) = (0, 0);
    let (mut up, mut down) = (0.0f64, 0.0f64);
    while i < m || j < n {
        let x = match (pos.get(i), neg.get(j)) {
            (Some(a), Some(b)) => a.min(*b),
            (Some(a), None) => *a,
            (None, Some(b)) => *b,
            (None, None) => unreachable!(),
        };
        while i < m && pos[i] <= x {
            i += 1;
        }
        while j < n && neg[j] <= x {
            j += 1;
        }
        let d = i as f64 / m as f64 - j as f64 / n as f64;
        // strict comparisons keep a zero supremum at +0.0
        if d > up {
            up = d;
        }
        if -d > down {
            down = -d;
        }
    }
    (up, down)
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.18 {
        // Jacobi-theta form converges fast for small arguments.
        let mut cdf = 0.0;
        for j in 1..=50 {
            let k = (2 * j - 1) as f64;
            let term = (-(k * k) * PI * PI / (8.0 * lambda * lambda)).exp();
            cdf += term;
            if term < 1e-300 {
                break;
            }
        }
        1.0 - (2.0 * PI).sqrt() / lambda * cdf
    } else {
        let mut sum = 0.0;
        for j in 1..=100 {
            let jf = j as f64;
            let term = (-2.0 * jf * jf * lambda * lambda).exp();
            sum += if j % 2 == 1 { term } else { -term };
            if term < 1e-300 {
                break;
            }
        }
        2.0 * sum
    };
    q.clamp(0.0, 1.0)
}

pub fn ks_two_sample(pos: &[f64], neg: &[f64], alternative: Alternative) -> Result<KsResult, DivergenceError> {
    if pos.is_empty() || neg.is_empty() {
        return Err(DivergenceError::EmptySample);
    }
    if pos.iter().chain(neg).any(|x| x.is_nan()) {
        return Err(DivergenceError::NonFinite { row: 0 });
    }
    let mut a = pos.to_vec();
    let mut b = neg.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (up, down) = signed_suprema(&a, &b);
    let (m, n) = (a.len(), b.len());
    let en = (m * n) as f64 / (m + n) as f64;
    let statistic = match alternative {
        Alternative::TwoSided => up.max(down),
        Alternative::Greater => up,
        Alternative::Less => down,
    };
    let p_value = match alternative {
        Alternative::TwoSided => kolmogorov_sf(statistic * en.sqrt()),
        _ => (-2.0 * statistic * statistic * en).exp().min(1.0),
    };
    Ok(KsResult { statistic, p_value, alternative, m, n })
}

/// The three tests on the same sample pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTriple {
    pub two_sided: KsResult,
    pub greater: KsResult,
    pub less: KsResult,
}

pub fn ks_all(pos: &[f64], neg: &[f64]) -> Result<KsTriple, DivergenceError> {
    Ok(KsTriple {
        two_sided: ks_two_sample(pos, neg, Alternative::TwoSided)?,
        greater: ks_two_sample(pos, neg, Alternative::Greater)?,
        less: ks_two_sample(pos, neg, Alternative::Less)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingVerdict {
    NoDifference,
    PositiveMoreCohesive,
    PositiveLessCohesive,
    Crossing,
}

impl fmt::Display for CrossingVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrossingVerdict::NoDifference => "no_difference",
            CrossingVerdict::PositiveMoreCohesive => "positive_more_cohesive",
            CrossingVerdict::PositiveLessCohesive => "positive_less_cohesive",
            CrossingVerdict::Crossing => "crossing",
        })
    }
}

/// Combines the three tests. Cohesion scores are distances, so a
/// significant "greater" (positive ECDF above) means positives are tighter.
pub fn crossing_verdict(two: &KsResult, greater: &KsResult, less: &KsResult, alpha: f64) -> CrossingVerdict {
    if !two.significant(alpha) {
        return CrossingVerdict::NoDifference;
    }
    match (greater.significant(alpha), less.significant(alpha)) {
        (true, true) => CrossingVerdict::Crossing,
        (true, false) => CrossingVerdict::PositiveMoreCohesive,
        (false, true) => CrossingVerdict::PositiveLessCohesive,
        // Unreachable for asymptotic p-values; fall back to the larger excursion.
        (false, false) if greater.statistic >= less.statistic => CrossingVerdict::PositiveMoreCohesive,
        (false, false) => CrossingVerdict::PositiveLessCohesive,
    }
}
