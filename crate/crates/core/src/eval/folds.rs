use super::EvalError;
use crate::strata::size_bins;
use crate::trace::LabeledTask;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub fold_of: BTreeMap<String, usize>,
    /// `(app, |G| bin)` per task.
    pub strata: BTreeMap<String, (String, usize)>,
}

impl FoldAssignment {
    pub fn fold(&self, task_id: &str) -> Option<usize> {
        self.fold_of.get(task_id).copied()
    }

    pub fn test_tasks(&self, fold: usize) -> Vec<&str> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(t, _)| t.as_str())
            .collect()
    }
}

/// Task-level folds stratified by `(app, |G| decile)`. Tasks of a stratum are
/// shuffled with `seed` and dealt round-robin, continuing the deal across
/// strata so that global fold sizes stay balanced too.
pub fn make_folds(tasks: &[LabeledTask], n_folds: usize, seed: u64) -> Result<FoldAssignment, EvalError> {
    if n_folds == 0 || tasks.len() < n_folds {
        return Err(EvalError::TooFewTasks {
            tasks: tasks.len(),
            folds: n_folds,
        });
    }
    let bins = size_bins(&tasks.iter().map(LabeledTask::r).collect::<Vec<_>>());
    let mut groups: BTreeMap<(String, usize), Vec<String>> = BTreeMap::new();
    let mut strata = BTreeMap::new();
    for (t, &b) in tasks.iter().zip(&bins) {
        let key = (t.app.clone(), b);
        groups.entry(key.clone()).or_default().push(t.task_id.clone());
        strata.insert(t.task_id.clone(), key);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = BTreeMap::new();
    let mut offset = 0;
    for ids in groups.values_mut() {
        ids.sort();
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            fold_of.insert(id.clone(), (offset + i) % n_folds);
        }
        offset += ids.len();
    }
    Ok(FoldAssignment {
        n_folds,
        fold_of,
        strata,
    })
}
