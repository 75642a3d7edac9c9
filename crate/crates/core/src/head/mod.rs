//! The decision head: a hashed text + tabular featurizer feeding a linear
//! logistic (or softmax) scorer, and the three decision reductions built on
//! it: top-K ranking, single-class prediction and multi-label prediction.

mod featurize;
mod model;

pub use featurize::{
    normalize, ColumnKind, DesignColumn, Featurizer, FeaturizerConfig, SparseVec, MISSING,
};
pub use model::{
    fit, loss_and_gradient, softmax, train_binary, train_softmax, Dataset, HeadModel, Objective,
    Optimizer, TrainConfig,
};

use crate::features::FeatureTable;
use crate::ranking::Ranking;
use crate::trace::ToolIndex;
use crate::value::FeatureValue;
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum HeadError {
    #[error("training table is empty")]
    EmptyTable,
    #[error("table has no feature columns")]
    NoFeatureColumns,
    #[error("row has {got} values, expected {expected}")]
    Arity { expected: usize, got: usize },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("model has {expected} classes, got {got}")]
    ClassCount { expected: usize, got: usize },
    #[error("label set is empty")]
    EmptyLabels,
    #[error("candidate `{0}` is not in the catalog")]
    UnknownCandidate(String),
    #[error("operation needs a {0} model")]
    WrongObjective(&'static str),
    #[error("unsupported model file version: {0}")]
    Version(String),
    #[error("featurizer dimension {featurizer} does not match model dimension {model}")]
    Dimension { featurizer: usize, model: usize },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fits the featurizer and a binary relevance head on a feature table's
/// design columns and labels.
pub fn train_on_table(
    table: &FeatureTable,
    featurizer_config: FeaturizerConfig,
    config: &TrainConfig,
) -> Result<(Featurizer, HeadModel), HeadError> {
    let rows: Vec<_> = table.rows.iter().map(|r| r.design_values()).collect();
    let labels: Vec<u8> = table.rows.iter().map(|r| r.label).collect();
    let featurizer = Featurizer::fit(table.design_columns(), &rows, featurizer_config)?;
    let model = train_binary(&featurizer, &rows, &labels, config)?;
    Ok((featurizer, model))
}

/// Scores `(candidate_id, design row)` pairs, one model pass per candidate.
pub fn score_rows<'a>(
    model: &HeadModel,
    featurizer: &Featurizer,
    rows: impl IntoIterator<Item = (&'a str, &'a [Option<FeatureValue>])>,
) -> Result<Ranking, HeadError> {
    let mut scores = Vec::new();
    for (id, values) in rows {
        let x = featurizer.transform(values)?;
        scores.push((id.to_string(), model.probability(&x)?));
    }
    Ok(Ranking::from_scores(scores))
}

/// Scores every candidate of one decision. `row_for` builds the design row of
/// a candidate; every candidate must be a known tool.
pub fn score_candidates<F>(
    model: &HeadModel,
    featurizer: &Featurizer,
    candidates: &[&str],
    tools: &ToolIndex,
    mut row_for: F,
) -> Result<Ranking, HeadError>
where
    F: FnMut(&str) -> Vec<Option<FeatureValue>>,
{
    let mut scores = Vec::with_capacity(candidates.len());
    for &id in candidates {
        if !tools.contains(id) {
            return Err(HeadError::UnknownCandidate(id.to_string()));
        }
        let x = featurizer.transform(&row_for(id))?;
        scores.push((id.to_string(), model.probability(&x)?));
    }
    Ok(Ranking::from_scores(scores))
}

/// Argmax class (lowest index on ties) and the full probability vector.
pub fn predict_single_class(
    model: &HeadModel,
    featurizer: &Featurizer,
    row: &[Option<FeatureValue>],
    classes: &[String],
) -> Result<(String, Vec<f64>), HeadError> {
    let Objective::Softmax { classes: own } = &model.objective else {
        return Err(HeadError::WrongObjective("softmax"));
    };
    if own.len() != classes.len() {
        return Err(HeadError::ClassCount {
            expected: own.len(),
            got: classes.len(),
        });
    }
    if classes.is_empty() {
        return Err(HeadError::EmptyLabels);
    }
    let probs = if classes.len() == 1 {
        vec![1.0]
    } else {
        model.class_probabilities(&featurizer.transform(row)?)?
    };
    Ok((classes[argmax(&probs)].clone(), probs))
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Labels scoring at least `threshold`; when none does, the single best one.
/// Ties for the best go to the earliest label in `scores`.
pub fn multilabel_decision(
    scores: &[(String, f64)],
    threshold: f64,
) -> Result<BTreeSet<String>, HeadError> {
    if scores.is_empty() {
        return Err(HeadError::EmptyLabels);
    }
    let chosen: BTreeSet<String> = scores
        .iter()
        .filter(|(_, p)| *p >= threshold)
        .map(|(a, _)| a.clone())
        .collect();
    if !chosen.is_empty() {
        return Ok(chosen);
    }
    let ps: Vec<f64> = scores.iter().map(|s| s.1).collect();
    Ok(BTreeSet::from([scores[argmax(&ps)].0.clone()]))
}

/// Binary-relevance multi-label prediction over `(label, design row)` pairs.
pub fn predict_multilabel(
    model: &HeadModel,
    featurizer: &Featurizer,
    rows: &[(String, Vec<Option<FeatureValue>>)],
    threshold: f64,
) -> Result<BTreeSet<String>, HeadError> {
    let mut scores = Vec::with_capacity(rows.len());
    for (label, row) in rows {
        scores.push((label.clone(), model.probability(&featurizer.transform(row)?)?));
    }
    multilabel_decision(&scores, threshold)
}

const MAGIC: &[u8; 8] = b"TABHEAD1";

#[derive(serde::Serialize, serde::Deserialize)]
struct Meta {
    featurizer: Featurizer,
    objective: Objective,
    config: TrainConfig,
    platt: Option<(f64, f64)>,
    loss_history: Vec<f64>,
    n_weights: usize,
    n_bias: usize,
}

/// File layout: magic, little-endian u64 length of a JSON metadata block
/// (featurizer, objective, config), the block, then the weights and biases as
/// little-endian f64.
pub fn save_model(path: &Path, model: &HeadModel, featurizer: &Featurizer) -> Result<(), HeadError> {
    if featurizer.dim() != model.dim() {
        return Err(HeadError::Dimension {
            featurizer: featurizer.dim(),
            model: model.dim(),
        });
    }
    let meta = Meta {
        featurizer: featurizer.clone(),
        objective: model.objective.clone(),
        config: model.config.clone(),
        platt: model.platt,
        loss_history: model.loss_history.clone(),
        n_weights: model.weights.len(),
        n_bias: model.bias.len(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| HeadError::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * (meta.n_weights + meta.n_bias));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.weights.iter().chain(&model.bias) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(HeadModel, Featurizer), HeadError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(HeadError::Corrupt("file too short".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(HeadError::Version(
            String::from_utf8_lossy(&bytes[..8]).into_owned(),
        ));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| HeadError::Corrupt("truncated metadata".into()))?;
    let meta: Meta = serde_json::from_slice(body).map_err(|e| HeadError::Corrupt(e.to_string()))?;
    let rest = &bytes[16 + len..];
    let n = meta.n_weights + meta.n_bias;
    if rest.len() != 8 * n {
        return Err(HeadError::Corrupt(format!(
            "expected {} weight bytes, found {}",
            8 * n,
            rest.len()
        )));
    }
    let vals: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let outputs = meta.objective.outputs().max(1);
    if meta.n_bias != outputs || meta.n_weights != outputs * meta.featurizer.dim() {
        return Err(HeadError::Dimension {
            featurizer: meta.featurizer.dim(),
            model: meta.n_weights / outputs,
        });
    }
    let model = HeadModel {
        objective: meta.objective,
        config: meta.config,
        weights: vals[..meta.n_weights].to_vec(),
        bias: vals[meta.n_weights..].to_vec(),
        platt: meta.platt,
        loss_history: meta.loss_history,
    };
    Ok((model, meta.featurizer))
}

/// `task_id,candidate_id,score,rank` with 1-based ranks.
pub fn write_scores_csv(path: &Path, rankings: &[(String, Ranking)]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task_id", "candidate_id", "score", "rank"])?;
    for (task, ranking) in rankings {
        for (i, e) in ranking.entries().iter().enumerate() {
            w.write_record([
                task.as_str(),
                e.candidate_id.as_str(),
                &format!("{:.17e}", e.score),
                &(i + 1).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `scores.csv` back into per-task rankings, in file order of tasks.
pub fn read_scores_csv(path: &Path) -> Result<Vec<(String, Ranking)>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut by_task: std::collections::HashMap<String, Vec<(String, f64)>> = Default::default();
    for rec in r.records() {
        let rec = rec?;
        let task = rec.get(0).unwrap_or_default().to_string();
        let id = rec.get(1).unwrap_or_default().to_string();
        let score: f64 = rec.get(2).unwrap_or_default().parse().unwrap_or(f64::NAN);
        if !by_task.contains_key(&task) {
            order.push(task.clone());
        }
        by_task.entry(task).or_default().push((id, score));
    }
    Ok(order
        .into_iter()
        .map(|t| {
            let s = by_task.remove(&t).unwrap_or_default();
            (t, Ranking::from_scores(s))
        })
        .collect())
}

/// Expected calibration error over equal-width probability bins.
pub fn expected_calibration_error(probs: &[f64], labels: &[u8], bins: usize) -> f64 {
    let bins = bins.max(1);
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut acc = vec![0.0; bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        acc[b] += f64::from(y);
    }
    let n = probs.len().max(1) as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (count[b] as f64 / n) * ((acc[b] - conf[b]) / count[b] as f64).abs())
        .sum()
}
