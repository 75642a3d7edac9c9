//! Distributional alignment between synthetic and real rows.

use super::SynthError;
use crate::features::{Column, FeatureRow};
use crate::head::ColumnKind;
use crate::value::FeatureValue;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Per-marginal significance level.
    pub alpha: f64,
    /// Largest accepted sliced Wasserstein distance.
    pub tau: f64,
    pub projections: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            alpha: 0.01,
            tau: 0.25,
            projections: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalTest {
    Ks,
    ChiSquare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalResult {
    pub column: String,
    pub test: MarginalTest,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub marginals: Vec<MarginalResult>,
    pub sliced_wasserstein: f64,
    pub pass: bool,
    /// Columns left out, with the reason.
    pub skipped: Vec<String>,
    pub n_synthetic: usize,
    pub n_real: usize,
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let sq = ne.sqrt();
    (d, kolmogorov_q((sq + 0.12 + 0.11 / sq) * d))
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (-1)^(k-1) exp(-2 k² λ²)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let a2 = -2.0 * lambda * lambda;
    let mut sign = 2.0;
    let mut sum = 0.0;
    let mut prev = 0.0;
    for k in 1..=100 {
        let term = sign * (a2 * (k * k) as f64).exp();
        sum += term;
        if term.abs() <= 1e-3 * prev || term.abs() <= 1e-8 * sum.abs() {
            return sum.clamp(0.0, 1.0);
        }
        sign = -sign;
        prev = term.abs();
    }
    1.0
}

/// Chi-square test of homogeneity on two category samples.
pub fn chi_square_homogeneity(a: &[String], b: &[String]) -> (f64, f64) {
    let mut counts: BTreeMap<&str, [f64; 2]> = BTreeMap::new();
    for s in a {
        counts.entry(s).or_default()[0] += 1.0;
    }
    for s in b {
        counts.entry(s).or_default()[1] += 1.0;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let mut stat = 0.0;
    for c in counts.values() {
        let total = c[0] + c[1];
        for (obs, size) in [(c[0], na), (c[1], nb)] {
            let exp = total * size / n;
            if exp > 0.0 {
                stat += (obs - exp).powi(2) / exp;
            }
        }
    }
    let df = counts.len().saturating_sub(1);
    if df == 0 {
        return (0.0, 1.0);
    }
    let p = ChiSquared::new(df as f64)
        .map(|d| 1.0 - d.cdf(stat))
        .unwrap_or(1.0);
    (stat, p.clamp(0.0, 1.0))
}

/// Wasserstein-1 distance between two empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return 0.0;
    }
    // Integrate |Fa^-1(u) - Fb^-1(u)| over the merged quantile breakpoints.
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let ua = (i + 1) as f64 / n as f64;
        let ub = (j + 1) as f64 / m as f64;
        let next = ua.min(ub);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    total
}

fn numeric_cells(rows: &[&FeatureRow], j: usize) -> Vec<f64> {
    rows.iter()
        .filter_map(|r| r.design_values()[j].as_ref().and_then(FeatureValue::as_f64))
        .collect()
}

/// Compares synthetic rows with real rows column by column (KS for numeric,
/// chi-square for categorical; free text is not tested) and jointly through
/// random projections of the standardized numeric columns.
pub fn check_alignment(
    synthetic: &[FeatureRow],
    real: &[FeatureRow],
    feature_columns: &[Column],
    config: &AlignConfig,
) -> Result<AlignmentReport, SynthError> {
    if synthetic.is_empty() || real.is_empty() {
        return Err(SynthError::EmptyAlignment);
    }
    let syn: Vec<&FeatureRow> = synthetic.iter().collect();
    let rea: Vec<&FeatureRow> = real.iter().collect();
    let table = crate::features::FeatureTable {
        columns: feature_columns.to_vec(),
        rows: Vec::new(),
    };
    let design = table.design_columns();
    let syn_vals: Vec<_> = syn.iter().map(|r| r.design_values()).collect();
    let rea_vals: Vec<_> = rea.iter().map(|r| r.design_values()).collect();
    let mut marginals = Vec::new();
    let mut skipped = Vec::new();
    let mut numeric_cols: Vec<(usize, f64, f64)> = Vec::new();
    for (j, c) in design.iter().enumerate() {
        let is_key_category = j >= 2 && j < 6;
        match c.kind {
            ColumnKind::Numeric => {
                let s = numeric_cells(&syn, j);
                let r = numeric_cells(&rea, j);
                if s.is_empty() || r.is_empty() {
                    skipped.push(format!("{}: no values on one side", c.name));
                    continue;
                }
                let all = s.iter().chain(&r);
                let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                    (lo.min(x), hi.max(x))
                });
                if lo == hi {
                    skipped.push(format!("{}: zero variance in both samples", c.name));
                    continue;
                }
                let (d, p) = ks_two_sample(&s, &r);
                marginals.push(MarginalResult {
                    column: c.name.clone(),
                    test: MarginalTest::Ks,
                    statistic: d,
                    p_value: p,
                });
                let mean = r.iter().sum::<f64>() / r.len() as f64;
                let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r.len() as f64;
                numeric_cols.push((j, mean, if var > 0.0 { var.sqrt() } else { 1.0 }));
            }
            ColumnKind::Categorical if !is_key_category => {
                let cats = |vals: &[Vec<Option<FeatureValue>>]| -> Vec<String> {
                    vals.iter()
                        .map(|v| {
                            v[j].as_ref()
                                .map(FeatureValue::category)
                                .unwrap_or_else(|| crate::head::MISSING.to_string())
                        })
                        .collect()
                };
                let s = cats(&syn_vals);
                let r = cats(&rea_vals);
                let (stat, p) = chi_square_homogeneity(&s, &r);
                if stat == 0.0 && s.iter().chain(&r).all(|x| *x == s[0]) {
                    skipped.push(format!("{}: single category in both samples", c.name));
                    continue;
                }
                marginals.push(MarginalResult {
                    column: c.name.clone(),
                    test: MarginalTest::ChiSquare,
                    statistic: stat,
                    p_value: p,
                });
            }
            _ => {}
        }
    }
    let sw = sliced_wasserstein(&syn_vals, &rea_vals, &numeric_cols, config);
    let pass = marginals.iter().all(|m| m.p_value >= config.alpha) && sw <= config.tau;
    Ok(AlignmentReport {
        marginals,
        sliced_wasserstein: sw,
        pass,
        skipped,
        n_synthetic: synthetic.len(),
        n_real: real.len(),
    })
}

fn sliced_wasserstein(
    syn: &[Vec<Option<FeatureValue>>],
    real: &[Vec<Option<FeatureValue>>],
    cols: &[(usize, f64, f64)],
    config: &AlignConfig,
) -> f64 {
    if cols.is_empty() || config.projections == 0 {
        return 0.0;
    }
    let standardize = |v: &Vec<Option<FeatureValue>>| -> Vec<f64> {
        cols.iter()
            .map(|&(j, mean, sd)| {
                v[j].as_ref()
                    .and_then(FeatureValue::as_f64)
                    .map(|x| (x - mean) / sd)
                    .unwrap_or(0.0)
            })
            .collect()
    };
    let s: Vec<Vec<f64>> = syn.iter().map(standardize).collect();
    let r: Vec<Vec<f64>> = real.iter().map(standardize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut total = 0.0;
    for _ in 0..config.projections {
        let mut dir: Vec<f64> = (0..cols.len())
            .map(|_| {
                // Box-Muller keeps directions uniform on the sphere.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        dir.iter_mut().for_each(|x| *x /= n);
        let proj = |rows: &[Vec<f64>]| -> Vec<f64> {
            rows.iter()
                .map(|v| v.iter().zip(&dir).map(|(a, b)| a * b).sum())
                .collect()
        };
        total += wasserstein_1d(&proj(&s), &proj(&r));
    }
    total / config.projections as f64
}
