use super::EvalError;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapConfig {
    /// Coalition evaluations; all coalitions are enumerated when `2^d - 2`
    /// fits in this budget.
    pub n_evals: usize,
    pub seed: u64,
    /// Fresh coalition draws after a singular system.
    pub max_retries: usize,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig {
            n_evals: 200,
            seed: 0,
            max_retries: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapResult {
    pub base_value: f64,
    pub attributions: Vec<f64>,
    /// Score of the explained instance.
    pub value: f64,
    pub exact: bool,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Mean score over the background with features in `mask` taken from the
/// instance.
fn coalition_value<V: Clone, F: Fn(&[V]) -> f64>(f: &F, background: &[Vec<V>], instance: &[V], mask: &[bool]) -> f64 {
    let mut row = instance.to_vec();
    let mut total = 0.0;
    for b in background {
        for (j, m) in mask.iter().enumerate() {
            row[j] = if *m { instance[j].clone() } else { b[j].clone() };
        }
        total += f(&row);
    }
    total / background.len() as f64
}

/// KernelSHAP attributions of `f` at `instance` against `background` rows.
/// Replaced features take background values, so perturbations stay within
/// the observed support. Attributions plus the base value sum to `f(instance)`.
pub fn kernel_shap<V: Clone, F: Fn(&[V]) -> f64>(
    f: F,
    background: &[Vec<V>],
    instance: &[V],
    config: &ShapConfig,
) -> Result<ShapResult, EvalError> {
    if background.is_empty() {
        return Err(EvalError::Empty);
    }
    let d = instance.len();
    let value = f(instance);
    let base = coalition_value(&f, background, instance, &vec![false; d]);
    if d == 0 {
        return Ok(ShapResult { base_value: base, attributions: vec![], value, exact: true });
    }
    if d == 1 {
        return Ok(ShapResult { base_value: base, attributions: vec![value - base], value, exact: true });
    }
    let exact = d < 63 && (1u64 << d) - 2 <= config.n_evals as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _attempt in 0..=config.max_retries {
        let coalitions: Vec<(Vec<bool>, f64)> = if exact {
            (1..(1u64 << d) - 1)
                .map(|bits| {
                    let mask: Vec<bool> = (0..d).map(|j| bits >> j & 1 == 1).collect();
                    let s = mask.iter().filter(|m| **m).count();
                    (mask, (d - 1) as f64 / (binomial(d, s) * (s * (d - s)) as f64))
                })
                .collect()
        } else {
            // Sizes drawn proportionally to the Shapley kernel mass; each
            // draw then carries equal weight.
            let mass: Vec<f64> = (1..d).map(|s| (d - 1) as f64 / (s * (d - s)) as f64).collect();
            let total: f64 = mass.iter().sum();
            let mut idx: Vec<usize> = (0..d).collect();
            (0..config.n_evals.max(d))
                .map(|_| {
                    let mut u = rng.gen::<f64>() * total;
                    let mut s = d - 1;
                    for (i, m) in mass.iter().enumerate() {
                        if u < *m {
                            s = i + 1;
                            break;
                        }
                        u -= m;
                    }
                    idx.shuffle(&mut rng);
                    let mut mask = vec![false; d];
                    for &j in &idx[..s] {
                        mask[j] = true;
                    }
                    (mask, 1.0)
                })
                .collect()
        };
        // Eliminate the last attribution through the sum constraint.
        let total = value - base;
        let k = d - 1;
        let mut xtwx = DMatrix::<f64>::zeros(k, k);
        let mut xtwy = DVector::<f64>::zeros(k);
        for (mask, w) in &coalitions {
            let v = coalition_value(&f, background, instance, mask);
            let zl = if mask[k] { 1.0 } else { 0.0 };
            let y = v - base - zl * total;
            let x: Vec<f64> = (0..k).map(|j| (if mask[j] { 1.0 } else { 0.0 }) - zl).collect();
            for a in 0..k {
                if x[a] == 0.0 {
                    continue;
                }
                xtwy[a] += w * x[a] * y;
                for b in 0..k {
                    xtwx[(a, b)] += w * x[a] * x[b];
                }
            }
        }
        let eig = xtwx.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), e| (lo.min(*e), hi.max(e.abs())));
        let well_posed = hi > 0.0 && lo > 1e-10 * hi;
        if let Some(phi) = xtwx.lu().solve(&xtwy).filter(|_| well_posed) {
            if phi.iter().all(|p| p.is_finite()) {
                let mut attributions: Vec<f64> = phi.iter().copied().collect();
                attributions.push(total - attributions.iter().sum::<f64>());
                return Ok(ShapResult { base_value: base, attributions, value, exact });
            }
        }
        if exact {
            break;
        }
        log::debug!("singular coalition system; redrawing coalitions");
    }
    Err(EvalError::SingularShap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_scorer_has_zero_attributions() {
        let bg = vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 3.0]];
        let r = kernel_shap(|_: &[f64]| 4.0, &bg, &[5.0, 5.0, 5.0], &ShapConfig::default()).unwrap();
        assert!(r.attributions.iter().all(|a| a.abs() < 1e-12));
    }
}
