use super::EvalError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    /// Two-sided level; the interval has coverage `1 - alpha`.
    pub alpha: f64,
    pub seed: u64,
    /// Independent random stream, e.g. one per contrast.
    pub stream: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_boot: 10_000,
            alpha: 0.05,
            seed: 0,
            stream: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    /// Mean of `a - b` over tasks.
    pub mean_diff: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Two-sided p-value from inverting the BCa interval at zero.
    pub p_value: f64,
    pub z0: f64,
    pub acceleration: f64,
    pub n_tasks: usize,
    /// All differences equal up to rounding; the interval is the point itself.
    pub degenerate: bool,
}

impl ContrastResult {
    pub fn excludes_zero(&self) -> bool {
        self.ci_lo > 0.0 || self.ci_hi < 0.0
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Share of `sorted` below `x`, counting ties as one half.
fn share_below(sorted: &[f64], x: f64) -> f64 {
    let below = sorted.partition_point(|v| *v < x);
    let upto = sorted.partition_point(|v| *v <= x);
    (below as f64 + 0.5 * (upto - below) as f64) / sorted.len() as f64
}

/// Paired bootstrap over tasks of the mean difference `a - b`, with a
/// bias-corrected and accelerated interval.
pub fn paired_bootstrap_bca(a: &[f64], b: &[f64], config: &BootstrapConfig) -> Result<ContrastResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewTasks { tasks: n, folds: 2 });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    // Differences equal up to rounding (e.g. `a = b + 0.2` in floating point)
    // make the jackknife acceleration numerically meaningless.
    let (lo, hi) = d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(*x), h.max(*x)));
    if hi - lo <= 1e-12 * mean.abs().max(1.0) {
        let point = if mean.abs() <= 1e-12 { 0.0 } else { mean };
        return Ok(ContrastResult {
            mean_diff: point,
            ci_lo: point,
            ci_hi: point,
            p_value: if point == 0.0 { 1.0 } else { 0.0 },
            z0: 0.0,
            acceleration: 0.0,
            n_tasks: n,
            degenerate: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(config.stream);
    let nb = config.n_boot.max(1);
    let mut boots: Vec<f64> = (0..nb)
        .map(|_| (0..n).map(|_| d[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    boots.sort_by(f64::total_cmp);

    let normal = std_normal();
    let clamp = |p: f64| p.clamp(0.5 / nb as f64, 1.0 - 0.5 / nb as f64);
    let z0 = normal.inverse_cdf(clamp(share_below(&boots, mean)));
    let total: f64 = d.iter().sum();
    let jack: Vec<f64> = d.iter().map(|x| (total - x) / (n - 1) as f64).collect();
    let jbar = jack.iter().sum::<f64>() / n as f64;
    let num: f64 = jack.iter().map(|j| (jbar - j).powi(3)).sum();
    let den: f64 = jack.iter().map(|j| (jbar - j).powi(2)).sum();
    let acc = if den > 0.0 { num / (6.0 * den.powf(1.5)) } else { 0.0 };

    let adjust = |z: f64| normal.cdf(z0 + (z0 + z) / (1.0 - acc * (z0 + z)));
    let lo_q = adjust(normal.inverse_cdf(config.alpha / 2.0));
    let hi_q = adjust(normal.inverse_cdf(1.0 - config.alpha / 2.0));
    let ci_lo = quantile(&boots, lo_q).min(mean);
    let ci_hi = quantile(&boots, hi_q).max(mean);

    // Invert the BCa map at zero: find the nominal level whose adjusted
    // quantile lands on the bootstrap share below zero.
    let w = normal.inverse_cdf(clamp(share_below(&boots, 0.0)));
    let u = (w - z0) / (1.0 + acc * (w - z0));
    let tail = normal.cdf(u - z0);
    let p_value = (2.0 * tail.min(1.0 - tail)).clamp(0.0, 1.0);
    Ok(ContrastResult {
        mean_diff: mean,
        ci_lo,
        ci_hi,
        p_value,
        z0,
        acceleration: acc,
        n_tasks: n,
        degenerate: false,
    })
}

/// Step-down Holm–Bonferroni. Flags are returned in input order.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<bool>, EvalError> {
    if let Some(&p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(EvalError::PValue(p));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]).then(i.cmp(&j)));
    let mut reject = vec![false; m];
    for (rank, &i) in order.iter().enumerate() {
        if p_values[i] <= alpha / (m - rank) as f64 {
            reject[i] = true;
        } else {
            break;
        }
    }
    Ok(reject)
}

/// Both macro means at or above `threshold`.
pub fn mark_ceiling(mean_a: f64, mean_b: f64, threshold: f64) -> bool {
    mean_a >= threshold && mean_b >= threshold
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holm_hand_example() {
        assert_eq!(holm_bonferroni(&[0.01, 0.04, 0.03], 0.05).unwrap(), vec![true, false, false]);
        assert_eq!(holm_bonferroni(&[1.0, 1.0], 0.05).unwrap(), vec![false, false]);
        assert_eq!(holm_bonferroni(&[0.04], 0.05).unwrap(), vec![true]);
        assert!(holm_bonferroni(&[1.5], 0.05).is_err());
    }

    #[test]
    fn identical_methods_are_a_point_at_zero() {
        let a = [0.1, 0.5, 0.9];
        let r = paired_bootstrap_bca(&a, &a, &BootstrapConfig::default()).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.mean_diff, r.ci_lo, r.ci_hi, r.p_value), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn constant_shift_excludes_zero() {
        let b: Vec<f64> = (0..20).map(|i| i as f64 / 40.0).collect();
        let a: Vec<f64> = b.iter().map(|x| x + 0.2).collect();
        let r = paired_bootstrap_bca(&a, &b, &BootstrapConfig::default()).unwrap();
        assert!(r.excludes_zero());
        assert!((r.mean_diff - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ceiling() {
        assert!(mark_ceiling(1.0, 1.0, 0.995));
        assert!(!mark_ceiling(0.95, 1.0, 0.995));
        assert!(!mark_ceiling(0.0, 0.0, 0.995));
    }
}
