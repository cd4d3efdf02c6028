//! Summary statistics and hypothesis tests used for cohort evaluation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Linear-interpolation quantile of already sorted data (`q` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianIqr {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub n: usize,
}

impl MedianIqr {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            median: quantile_sorted(&v, 0.5),
            q1: quantile_sorted(&v, 0.25),
            q3: quantile_sorted(&v, 0.75),
            n: v.len(),
        })
    }

    /// `0.559 [0.428–0.719]` style.
    pub fn display(&self, decimals: usize) -> String {
        format!(
            "{:.d$} [{:.d$}--{:.d$}]",
            self.median,
            self.q1,
            self.q3,
            d = decimals
        )
    }
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Two-sided critical value for a confidence level, e.g. 1.959964 for 0.95.
pub fn z_for_confidence(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!("confidence must be in (0,1), got {confidence}")));
    }
    Ok(std_normal().inverse_cdf(1.0 - (1.0 - confidence) / 2.0))
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_ci(successes: u64, n: u64, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 || successes > n {
        return Err(Error::invalid(format!(
            "wilson_ci needs 0 <= successes <= n and n >= 1, got {successes}/{n}"
        )));
    }
    let z = z_for_confidence(confidence)?;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * ((p * (1.0 - p) / nf) + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (centre + half).min(1.0) };
    Ok((lo, hi))
}

/// Ranks starting at 1 with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties and a two-sided
/// p-value from the t approximation. `None` when undefined (fewer than 3
/// pairs, or a constant variable).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<Correlation> {
    if x.len() != y.len() || x.len() < 3 {
        return None;
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))?;
    let n = x.len();
    let df = (n - 2) as f64;
    let p_value = if (1.0 - rho.abs()) < 1e-15 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid t");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Some(Correlation { rho, p_value, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
    ChiSquare,
    Degenerate,
}

pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after discarding zero differences.
    pub n_used: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub method: TestMethod,
    /// Every difference was zero; `p_value` is 1.
    pub all_zero: bool,
}

/// Exact null distribution of W+ for the given ranks: `counts[s]` is the
/// number of sign assignments whose doubled positive-rank sum equals `s`.
fn signed_rank_distribution(doubled_ranks: &[u64]) -> Vec<f64> {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Wilcoxon signed-rank test on paired differences. Zero differences are
/// discarded, ties get average ranks; exact null distribution for
/// `n <= 25`, else normal approximation with tie and continuity correction.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.is_empty() {
        return Err(Error::invalid("wilcoxon needs at least one pair"));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("wilcoxon differences must be finite"));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nz.is_empty() {
        return Ok(WilcoxonResult {
            n_used: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            method: TestMethod::Degenerate,
            all_zero: true,
        });
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let n = nz.len();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let (p_value, method) = if n <= WILCOXON_EXACT_MAX_N {
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let counts = signed_rank_distribution(&doubled);
        let denom = 2f64.powi(n as i32);
        let w2 = (2.0 * w_plus).round() as usize;
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / denom;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / denom;
        ((2.0 * lower.min(upper)).min(1.0), TestMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let dev = ((w_plus - mean).abs() - 0.5).max(0.0);
        let z = dev / var.sqrt();
        ((2.0 * (1.0 - std_normal().cdf(z))).min(1.0), TestMethod::NormalApprox)
    };
    Ok(WilcoxonResult {
        n_used: n,
        w_plus,
        w_minus,
        p_value,
        method,
        all_zero: false,
    })
}

pub const MCNEMAR_EXACT_MAX_DISCORDANT: u64 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// A positive, B negative.
    pub b: u64,
    /// A negative, B positive.
    pub c: u64,
    pub p_value: f64,
    pub method: TestMethod,
}

fn ln_choose(n: u64, k: u64) -> f64 {
    statrs::function::factorial::ln_binomial(n, k)
}

/// McNemar test on paired binary outcomes: exact binomial when fewer than
/// 25 discordant pairs, else chi-square with continuity correction.
pub fn mcnemar(a: &[bool], b: &[bool]) -> Result<McNemarResult> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid("mcnemar needs two equally long, non-empty vectors"));
    }
    let bc = a.iter().zip(b).filter(|(x, y)| **x && !**y).count() as u64;
    let cb = a.iter().zip(b).filter(|(x, y)| !**x && **y).count() as u64;
    let n = bc + cb;
    if n == 0 {
        return Ok(McNemarResult {
            b: bc,
            c: cb,
            p_value: 1.0,
            method: TestMethod::Degenerate,
        });
    }
    if n < MCNEMAR_EXACT_MAX_DISCORDANT {
        let k = bc.min(cb);
        let tail: f64 = (0..=k)
            .map(|i| (ln_choose(n, i) - n as f64 * std::f64::consts::LN_2).exp())
            .sum();
        Ok(McNemarResult {
            b: bc,
            c: cb,
            p_value: (2.0 * tail).min(1.0),
            method: TestMethod::Exact,
        })
    } else {
        let diff = (bc as f64 - cb as f64).abs() - 1.0;
        let stat = diff.max(0.0).powi(2) / n as f64;
        let chi = ChiSquared::new(1.0).expect("df 1");
        Ok(McNemarResult {
            b: bc,
            c: cb,
            p_value: (1.0 - chi.cdf(stat)).clamp(0.0, 1.0),
            method: TestMethod::ChiSquare,
        })
    }
}

/// Bonferroni adjustment: `min(1, m * p)`.
pub fn bonferroni(p: f64, m: usize) -> f64 {
    (p * m.max(1) as f64).min(1.0)
}
