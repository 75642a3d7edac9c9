use super::featurize::{dot, Featurizer, SparseVec};
use super::HeadError;
use crate::value::FeatureValue;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    BinaryLogistic,
    Softmax { classes: Vec<String> },
}

impl Objective {
    /// Number of score outputs: 1 for binary, K for softmax.
    pub fn outputs(&self) -> usize {
        match self {
            Objective::BinaryLogistic => 1,
            Objective::Softmax { classes } => classes.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Limited-memory BFGS with a backtracking Armijo line search.
    #[default]
    Lbfgs,
    /// Plain full-batch gradient descent with step `lr`.
    GradientDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    /// Step size for [`Optimizer::GradientDescent`].
    pub lr: f64,
    /// Optimizer iterations (one full pass over the data each).
    pub max_epochs: usize,
    /// L2 penalty on weights; the bias is not penalized.
    pub l2: f64,
    /// Cap on the negative/positive up-weighting of positive rows.
    pub positive_weight_cap: f64,
    pub platt: bool,
    pub seed: u64,
    /// Accepted and ignored; the head has no low-rank adapters.
    pub lora_r: Option<u32>,
    /// Gradient-norm stopping tolerance.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Lbfgs,
            lr: 0.001,
            max_epochs: 50,
            l2: 1e-4,
            positive_weight_cap: 25.0,
            platt: false,
            seed: 0,
            lora_r: None,
            tolerance: 1e-7,
        }
    }
}

/// Featurized training data. For a binary objective `y` is 0/1; for softmax
/// it is the class index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Vec<SparseVec>,
    pub y: Vec<usize>,
    pub sample_weight: Vec<f64>,
    pub dim: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Weighted mean loss plus `l2/2 * |W|^2` and its gradient. `params` holds
/// `outputs` weight rows of length `dim` followed by `outputs` biases.
pub fn loss_and_gradient(data: &Dataset, outputs: usize, l2: f64, params: &[f64]) -> (f64, Vec<f64>) {
    let dim = data.dim;
    let nw = outputs * dim;
    debug_assert_eq!(params.len(), nw + outputs);
    let mut grad = vec![0.0; params.len()];
    let total_w: f64 = data.sample_weight.iter().sum();
    let norm = if total_w > 0.0 { 1.0 / total_w } else { 0.0 };
    let mut loss = 0.0;
    let mut logits = vec![0.0; outputs];
    for ((x, &y), &sw) in data.x.iter().zip(&data.y).zip(&data.sample_weight) {
        let w = sw * norm;
        if outputs == 1 {
            let z = dot(&params[..dim], x) + params[nw];
            let t = y as f64;
            loss += w * (softplus(z) - t * z);
            let r = w * (sigmoid(z) - t);
            for &(i, v) in x {
                grad[i] += r * v;
            }
            grad[nw] += r;
        } else {
            for (k, l) in logits.iter_mut().enumerate() {
                *l = dot(&params[k * dim..(k + 1) * dim], x) + params[nw + k];
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            loss += w * (lse - logits[y]);
            for k in 0..outputs {
                let p = (logits[k] - lse).exp();
                let r = w * (p - if k == y { 1.0 } else { 0.0 });
                for &(i, v) in x {
                    grad[k * dim + i] += r * v;
                }
                grad[nw + k] += r;
            }
        }
    }
    if l2 > 0.0 {
        for i in 0..nw {
            loss += 0.5 * l2 * params[i] * params[i];
            grad[i] += l2 * params[i];
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadModel {
    pub objective: Objective,
    pub config: TrainConfig,
    /// `outputs` rows of length `dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// `(a, b)` in `sigmoid(a * z + b)` when Platt scaling was fitted.
    pub platt: Option<(f64, f64)>,
    /// Training loss after each iteration, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

impl HeadModel {
    /// All-zero model.
    pub fn zeros(objective: Objective, dim: usize, config: TrainConfig) -> Self {
        let k = objective.outputs();
        HeadModel {
            objective,
            config,
            weights: vec![0.0; k * dim],
            bias: vec![0.0; k],
            platt: None,
            loss_history: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        let k = self.objective.outputs().max(1);
        self.weights.len() / k
    }

    pub fn logits(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let dim = self.dim();
        (0..self.bias.len())
            .map(|k| dot(&self.weights[k * dim..(k + 1) * dim], x) + self.bias[k])
            .collect()
    }

    /// `p(y = 1 | x)` for a binary model.
    pub fn probability(&self, x: &[(usize, f64)]) -> Result<f64, HeadError> {
        if self.objective != Objective::BinaryLogistic {
            return Err(HeadError::WrongObjective("binary_logistic"));
        }
        let z = self.logits(x)[0];
        Ok(match self.platt {
            Some((a, b)) => sigmoid(a * z + b),
            None => sigmoid(z),
        })
    }

    /// Class probabilities for a softmax model.
    pub fn class_probabilities(&self, x: &[(usize, f64)]) -> Result<Vec<f64>, HeadError> {
        if !matches!(self.objective, Objective::Softmax { .. }) {
            return Err(HeadError::WrongObjective("softmax"));
        }
        Ok(softmax(&self.logits(x)))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn featurize(
    featurizer: &Featurizer,
    rows: &[Vec<Option<FeatureValue>>],
) -> Result<Vec<SparseVec>, HeadError> {
    rows.iter().map(|r| featurizer.transform(r)).collect()
}

/// Trains a pointwise relevance model on `(row, label)` pairs.
pub fn train_binary(
    featurizer: &Featurizer,
    rows: &[Vec<Option<FeatureValue>>],
    labels: &[u8],
    config: &TrainConfig,
) -> Result<HeadModel, HeadError> {
    if rows.is_empty() {
        return Err(HeadError::EmptyTable);
    }
    if rows.len() != labels.len() {
        return Err(HeadError::Arity {
            expected: rows.len(),
            got: labels.len(),
        });
    }
    let x = featurize(featurizer, rows)?;
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    let wpos = if pos == 0 || neg == 0 {
        1.0
    } else {
        (neg as f64 / pos as f64).clamp(1.0, config.positive_weight_cap.max(1.0))
    };
    let data = Dataset {
        x,
        y: labels.iter().map(|&l| usize::from(l != 0)).collect(),
        sample_weight: labels
            .iter()
            .map(|&l| if l != 0 { wpos } else { 1.0 })
            .collect(),
        dim: featurizer.dim(),
    };
    let mut model = fit(Objective::BinaryLogistic, &data, config)?;
    if config.platt {
        model.platt = Some(fit_platt(&model, &data));
    }
    Ok(model)
}

/// Trains a softmax over `classes`; `labels[i]` indexes into `classes`.
pub fn train_softmax(
    featurizer: &Featurizer,
    rows: &[Vec<Option<FeatureValue>>],
    labels: &[usize],
    classes: Vec<String>,
    config: &TrainConfig,
) -> Result<HeadModel, HeadError> {
    if rows.is_empty() {
        return Err(HeadError::EmptyTable);
    }
    if classes.is_empty() {
        return Err(HeadError::EmptyLabels);
    }
    if rows.len() != labels.len() {
        return Err(HeadError::Arity {
            expected: rows.len(),
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
        return Err(HeadError::ClassCount {
            expected: classes.len(),
            got: bad + 1,
        });
    }
    let data = Dataset {
        x: featurize(featurizer, rows)?,
        y: labels.to_vec(),
        sample_weight: vec![1.0; rows.len()],
        dim: featurizer.dim(),
    };
    fit(Objective::Softmax { classes }, &data, config)
}

/// Minimizes [`loss_and_gradient`] from zero weights.
pub fn fit(objective: Objective, data: &Dataset, config: &TrainConfig) -> Result<HeadModel, HeadError> {
    let k = objective.outputs();
    let mut model = HeadModel::zeros(objective, data.dim, config.clone());
    if k <= 1 && matches!(model.objective, Objective::Softmax { .. }) {
        return Ok(model);
    }
    let n = k * data.dim + k;
    let mut params = vec![0.0; n];
    let eval = |p: &[f64], epoch: usize| -> Result<(f64, Vec<f64>), HeadError> {
        let (l, g) = loss_and_gradient(data, k, config.l2, p);
        if !l.is_finite() {
            return Err(HeadError::NonFinite { epoch, batch: 0 });
        }
        Ok((l, g))
    };
    let (mut loss, mut grad) = eval(&params, 0)?;
    let mut history = vec![loss];
    match config.optimizer {
        Optimizer::GradientDescent => {
            for epoch in 1..=config.max_epochs {
                if norm(&grad) < config.tolerance {
                    break;
                }
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= config.lr * g;
                }
                (loss, grad) = eval(&params, epoch)?;
                history.push(loss);
            }
        }
        Optimizer::Lbfgs => {
            const MEMORY: usize = 10;
            let mut s_hist: Vec<Vec<f64>> = Vec::new();
            let mut y_hist: Vec<Vec<f64>> = Vec::new();
            for epoch in 1..=config.max_epochs {
                if norm(&grad) < config.tolerance {
                    break;
                }
                let mut dir = two_loop(&grad, &s_hist, &y_hist);
                let mut slope = dotd(&grad, &dir);
                if slope >= 0.0 {
                    dir = grad.iter().map(|g| -g).collect();
                    slope = -dotd(&grad, &grad);
                    s_hist.clear();
                    y_hist.clear();
                }
                let mut step = if s_hist.is_empty() {
                    (1.0 / norm(&grad)).min(1.0)
                } else {
                    1.0
                };
                let mut accepted = None;
                for _ in 0..40 {
                    let trial: Vec<f64> = params.iter().zip(&dir).map(|(p, d)| p + step * d).collect();
                    let (l, g) = eval(&trial, epoch)?;
                    if l <= loss + 1e-4 * step * slope {
                        accepted = Some((trial, l, g));
                        break;
                    }
                    step *= 0.5;
                }
                let Some((trial, l, g)) = accepted else {
                    break;
                };
                let s: Vec<f64> = trial.iter().zip(&params).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g.iter().zip(&grad).map(|(a, b)| a - b).collect();
                if dotd(&s, &y) > 1e-12 {
                    if s_hist.len() == MEMORY {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                    s_hist.push(s);
                    y_hist.push(y);
                }
                let improvement = loss - l;
                params = trial;
                loss = l;
                grad = g;
                history.push(loss);
                if improvement <= 1e-12 * loss.abs().max(1e-12) {
                    break;
                }
            }
        }
    }
    let nw = k * data.dim;
    model.weights = params[..nw].to_vec();
    model.bias = params[nw..].to_vec();
    model.loss_history = history;
    Ok(model)
}

fn dotd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dotd(a, a).sqrt()
}

fn two_loop(grad: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>]) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let m = s_hist.len();
    let mut alpha = vec![0.0; m];
    for i in (0..m).rev() {
        let rho = 1.0 / dotd(&y_hist[i], &s_hist[i]);
        alpha[i] = rho * dotd(&s_hist[i], &q);
        for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
            *qj -= alpha[i] * yj;
        }
    }
    if m > 0 {
        let gamma = dotd(&s_hist[m - 1], &y_hist[m - 1]) / dotd(&y_hist[m - 1], &y_hist[m - 1]);
        for v in q.iter_mut() {
            *v *= gamma;
        }
    }
    for i in 0..m {
        let rho = 1.0 / dotd(&y_hist[i], &s_hist[i]);
        let beta = rho * dotd(&y_hist[i], &q);
        for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
            *qj += (alpha[i] - beta) * sj;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// One-dimensional logistic fit of the labels on the training logits.
fn fit_platt(model: &HeadModel, data: &Dataset) -> (f64, f64) {
    let z: Vec<f64> = data.x.iter().map(|x| model.logits(x)[0]).collect();
    let (mut a, mut b) = (1.0, 0.0);
    for _ in 0..50 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 1e-9, 0.0, 1e-9);
        for (zi, &yi) in z.iter().zip(&data.y) {
            let p = sigmoid(a * zi + b);
            let r = p - yi as f64;
            let h = p * (1.0 - p);
            ga += r * zi;
            gb += r;
            haa += h * zi * zi;
            hab += h * zi;
            hbb += h;
        }
        let det = haa * hbb - hab * hab;
        if det.abs() < 1e-18 {
            break;
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        a -= da;
        b -= db;
        if da.abs() + db.abs() < 1e-10 {
            break;
        }
    }
    (a, b)
}
