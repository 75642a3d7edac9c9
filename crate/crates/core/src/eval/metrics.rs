use super::EvalError;
use crate::ranking::Ranking;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// `|S_k ∩ G| / |G|` with `S_k` the length-`k` prefix of the ranking.
pub fn recall_at_k(relevant: &BTreeSet<String>, ranking: &Ranking, k: usize) -> Result<f64, EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevant);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let hits = ranking.prefix(k).filter(|id| relevant.contains(*id)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Recall at the adaptive cutoff `k = |G|`.
pub fn p_at_r(relevant: &BTreeSet<String>, ranking: &Ranking) -> Result<f64, EvalError> {
    recall_at_k(relevant, ranking, relevant.len().max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultilabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Share of tasks whose predicted set equals the true set.
    pub exact_accuracy: f64,
    /// Share of (task, label) decisions that are correct.
    pub label_accuracy: f64,
}

pub fn multilabel_metrics(
    truth: &[BTreeSet<String>],
    predicted: &[BTreeSet<String>],
    labels: &[String],
) -> Result<MultilabelMetrics, EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            left: truth.len(),
            right: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = truth.len() as f64;
    let (mut p, mut r, mut exact, mut correct) = (0.0, 0.0, 0.0, 0usize);
    for (y, yh) in truth.iter().zip(predicted) {
        let inter = y.intersection(yh).count() as f64;
        p += inter / yh.len().max(1) as f64;
        r += inter / y.len().max(1) as f64;
        if y == yh {
            exact += 1.0;
        }
        correct += labels
            .iter()
            .filter(|l| y.contains(*l) == yh.contains(*l))
            .count();
    }
    let (precision, recall) = (p / n, r / n);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MultilabelMetrics {
        precision,
        recall,
        f1,
        exact_accuracy: exact / n,
        label_accuracy: if labels.is_empty() {
            0.0
        } else {
            correct as f64 / (n * labels.len() as f64)
        },
    })
}

pub fn accuracy<T: PartialEq>(truth: &[T], predicted: &[T]) -> Result<f64, EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            left: truth.len(),
            right: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Area under the ROC curve (Mann–Whitney, ties count one half). `None` when
/// one class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|p| !*p.1).map(|p| *p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Unweighted mean of per-label one-vs-rest AUCs over labels where both
/// classes occur. `scores[i][j]` is task `i`'s score for label `j`.
pub fn macro_auc(scores: &[Vec<f64>], truth: &[BTreeSet<String>], labels: &[String]) -> Option<f64> {
    let per: Vec<f64> = labels
        .iter()
        .enumerate()
        .filter_map(|(j, l)| {
            let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
            let y: Vec<bool> = truth.iter().map(|t| t.contains(l)).collect();
            auc(&s, &y)
        })
        .collect();
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn ranking(ids: &[&str]) -> Ranking {
        let n = ids.len() as f64;
        Ranking::from_scores(ids.iter().enumerate().map(|(i, id)| (id.to_string(), n - i as f64)))
    }

    #[test]
    fn recall_examples() {
        let r = ranking(&["a", "x", "b", "c"]);
        assert_eq!(recall_at_k(&set(&["a", "b", "c"]), &r, 2).unwrap(), 1.0 / 3.0);
        assert_eq!(p_at_r(&set(&["a", "b"]), &ranking(&["b", "x", "a"])).unwrap(), 0.5);
        assert!(recall_at_k(&set(&[]), &r, 1).is_err());
    }

    #[test]
    fn multilabel_examples() {
        let m = multilabel_metrics(&[set(&["a", "c"])], &[set(&["a", "b"])], &[]).unwrap();
        assert_eq!((m.precision, m.recall), (0.5, 0.5));
        let m = multilabel_metrics(&[set(&["a"])], &[set(&[])], &[]).unwrap();
        assert_eq!(m.precision, 0.0);
    }

    #[test]
    fn auc_with_ties() {
        assert_eq!(auc(&[0.9, 0.5, 0.5], &[true, true, false]), Some(0.75));
        assert_eq!(auc(&[0.1], &[true]), None);
    }
}
