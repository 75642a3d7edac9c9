//! Batch stages over a run directory: ingest, extract, synth, train, eval and
//! cost. Each stage reads its inputs from the configured paths and the
//! artifacts of earlier stages, and writes its own artifacts into the output
//! directory.
//!
//! | stage   | writes |
//! |---------|--------|
//! | ingest  | `labels.csv`, `parse_report.json` |
//! | extract | `feature_card.json`, `feature_table.csv`, `calls_extract.jsonl` |
//! | synth   | `synth_rows.jsonl`, `alignment_report.json`, `augmented_table.csv`, `calls_synth.jsonl` |
//! | train   | `folds.json`, `cv/fold_<k>.bin`, `scores.csv`, `model.bin`, `train_report.json`, `timings.json` |
//! | eval    | `scores_bm25.csv`, `scores_dense.csv`, `report.json`, `report.md`, `frontier.csv`, `shap.csv` |
//!
//! With a scripted provider every artifact except `timings.json` and the
//! runtime-derived parts of the eval outputs is byte-identical across reruns.

pub mod planted;

use crate::baselines::{BaselineError, Bm25Index, DenseScorer, HashingEmbedder};
use crate::eval::{
    self, check_invariants, kernel_shap, make_folds, run_evaluation, summarize_shap, EvalConfig,
    EvalError, EvalReport, FoldAssignment, MethodRun, ShapConfig, ShapSummary,
};
use crate::features::{
    build_feature_table, run_tabschema, FeatureCard, FeatureRow, FeatureTable, Origin,
    SchemaConfig, SchemaError, TableError,
};
use crate::head::{
    load_model, save_model, score_rows, train_on_table, write_scores_csv, FeaturizerConfig,
    HeadError, TrainConfig,
};
use crate::provider::{LlmProvider, ProviderError};
use crate::ranking::Ranking;
use crate::synth::{run_tabsynth, SynthConfig, SynthError};
use crate::trace::{
    derive_labels, difficulty_shares, load_catalogs, parse_trajectories, write_labels_csv,
    Catalogs, Difficulty, LabeledTask, SkippedRecord, ToolSpec, TraceError, Trajectory,
};
use crate::value::FeatureValue;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const TABHEAD: &str = "TabHead";
pub const BM25: &str = "BM25";
pub const DENSE: &str = "Dense";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{} is missing; run `{producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("no feature was accepted into the card; nothing to train on")]
    NoAcceptedFeatures,
    #[error("{0}; run `extract` first")]
    EmptyTable(String),
    #[error("report invariants violated: {}", .0.join("; "))]
    Invariants(Vec<String>),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Json { path: PathBuf, message: String },
}

/// Coarse failure class, used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Provider,
    Acceptance,
}

impl PipelineError {
    pub fn class(&self) -> ErrorClass {
        match self {
            PipelineError::Provider(_)
            | PipelineError::Schema(SchemaError::Provider(_))
            | PipelineError::Synth(SynthError::Provider(_)) => ErrorClass::Provider,
            PipelineError::Baseline(BaselineError::Provider(_)) => ErrorClass::Provider,
            PipelineError::Invariants(_) => ErrorClass::Acceptance,
            _ => ErrorClass::Input,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockConfig {
    /// JSONL script; see [`crate::provider`].
    pub script: PathBuf,
}

/// An OpenAI-compatible chat-completions endpoint. The API key is read from
/// the environment variable named by `api_key_env`; config files never hold
/// secrets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    #[serde(default)]
    pub temperature: f64,
}

fn default_concurrency() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}
fn default_attempts() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteConfig>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub featurizer: FeaturizerConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStageConfig {
    pub n_folds: usize,
    /// Sampling seeds for stochastic methods; deterministic methods run once.
    pub n_seeds: usize,
    pub report: EvalConfig,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub dense_dim: usize,
    pub shap: ShapConfig,
    pub shap_background: usize,
    pub shap_instances: usize,
}

impl Default for EvalStageConfig {
    fn default() -> Self {
        EvalStageConfig {
            n_folds: 5,
            n_seeds: 5,
            report: EvalConfig::default(),
            bm25_k1: 1.2,
            bm25_b: 0.75,
            dense_dim: 256,
            shap: ShapConfig::default(),
            shap_background: 100,
            shap_instances: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub trajectories: PathBuf,
    /// A catalog file or a directory of catalog files.
    pub catalogs: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_target")]
    pub target: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub schema: SchemaConfig,
    /// Run synthesis; when off the augmented table is the real table.
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub eval: EvalStageConfig,
}

fn default_target() -> String {
    planted::TARGET.to_string()
}
fn yes() -> bool {
    true
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), PipelineError> {
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Config(msg()))
    }
}

fn unit_open(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl PipelineConfig {
    /// A config with defaults for everything but the paths and the script.
    pub fn new(trajectories: PathBuf, catalogs: PathBuf, output_dir: PathBuf, script: PathBuf) -> Self {
        PipelineConfig {
            trajectories,
            catalogs,
            output_dir,
            target: default_target(),
            seed: 0,
            strict: false,
            provider: ProviderConfig {
                kind: ProviderKind::Mock,
                mock: Some(MockConfig { script }),
                remote: None,
            },
            schema: SchemaConfig::default(),
            augment: true,
            synth: SynthConfig::default(),
            head: HeadConfig::default(),
            eval: EvalStageConfig::default(),
        }
    }

    /// Reads a JSON config; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Json {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.trajectories);
        resolve(&mut cfg.catalogs);
        resolve(&mut cfg.output_dir);
        if let Some(m) = &mut cfg.provider.mock {
            resolve(&mut m.script);
        }
        Ok(cfg)
    }

    /// Checks paths and numeric ranges.
    pub fn validate(&self) -> Result<(), PipelineError> {
        check(self.trajectories.exists(), || {
            format!("trajectories path {} does not exist", self.trajectories.display())
        })?;
        check(self.catalogs.exists(), || {
            format!("catalogs path {} does not exist", self.catalogs.display())
        })?;
        check(!self.target.trim().is_empty(), || "target is empty".into())?;
        match self.provider.kind {
            ProviderKind::Mock => {
                let m = self.provider.mock.as_ref().ok_or_else(|| {
                    PipelineError::Config("provider.mock.script is required for the mock provider".into())
                })?;
                check(m.script.exists(), || {
                    format!("mock script {} does not exist", m.script.display())
                })?;
            }
            ProviderKind::Remote => {
                let r = self.provider.remote.as_ref().ok_or_else(|| {
                    PipelineError::Config("provider.remote is required for the remote provider".into())
                })?;
                check(r.endpoint.starts_with("http://") || r.endpoint.starts_with("https://"), || {
                    format!("provider.remote.endpoint `{}` is not an http(s) URL", r.endpoint)
                })?;
                check(!r.model.is_empty(), || "provider.remote.model is empty".into())?;
                check(
                    !r.api_key_env.is_empty()
                        && r.api_key_env.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'),
                    || format!("provider.remote.api_key_env `{}` is not a variable name", r.api_key_env),
                )?;
                check(r.concurrency >= 1, || "provider.remote.concurrency must be >= 1".into())?;
                check(r.max_attempts >= 1, || "provider.remote.max_attempts must be >= 1".into())?;
                check(r.timeout_secs >= 1, || "provider.remote.timeout_secs must be >= 1".into())?;
            }
        }
        let s = &self.schema;
        check(s.max_batch >= 1, || "schema.max_batch must be >= 1".into())?;
        check(s.max_repairs <= 3, || "schema.max_repairs must be at most 3".into())?;
        check(s.parse_attempts >= 1, || "schema.parse_attempts must be >= 1".into())?;
        check((0.0..=1.0).contains(&s.hallucination_threshold), || {
            "schema.hallucination_threshold must be in [0, 1]".into()
        })?;
        let y = &self.synth;
        check(y.budget >= 1, || "synth.budget must be >= 1".into())?;
        check(y.max_rounds >= 1, || "synth.max_rounds must be >= 1".into())?;
        check(y.parse_attempts >= 1, || "synth.parse_attempts must be >= 1".into())?;
        check(y.cosine_threshold > 0.0 && y.cosine_threshold <= 1.0, || {
            "synth.cosine_threshold must be in (0, 1]".into()
        })?;
        check(unit_open(y.align.alpha), || "synth.align.alpha must be in (0, 1)".into())?;
        check(y.align.tau > 0.0, || "synth.align.tau must be positive".into())?;
        check(y.align.projections >= 1, || "synth.align.projections must be >= 1".into())?;
        let f = &self.head.featurizer;
        check(f.d_text >= 1 && f.d_cat >= 1, || "head.featurizer dimensions must be >= 1".into())?;
        check(f.max_ngram >= 1, || "head.featurizer.max_ngram must be >= 1".into())?;
        let t = &self.head.train;
        check(t.lr > 0.0, || "head.train.lr must be positive".into())?;
        check(t.max_epochs >= 1, || "head.train.max_epochs must be >= 1".into())?;
        check(t.l2 >= 0.0, || "head.train.l2 must be non-negative".into())?;
        check(t.positive_weight_cap >= 1.0, || "head.train.positive_weight_cap must be >= 1".into())?;
        let e = &self.eval;
        check(e.n_folds >= 2, || "eval.n_folds must be >= 2".into())?;
        check(e.n_seeds >= 1, || "eval.n_seeds must be >= 1".into())?;
        check(!e.report.ks.is_empty() && e.report.ks.iter().all(|k| *k >= 1), || {
            "eval.report.ks must be non-empty and >= 1".into()
        })?;
        check(e.report.bootstrap.n_boot >= 100, || "eval.report.bootstrap.n_boot must be >= 100".into())?;
        check(unit_open(e.report.bootstrap.alpha), || "eval.report.bootstrap.alpha must be in (0, 1)".into())?;
        check(unit_open(e.report.holm_alpha), || "eval.report.holm_alpha must be in (0, 1)".into())?;
        check((0.0..=1.0).contains(&e.report.ceiling), || "eval.report.ceiling must be in [0, 1]".into())?;
        e.report.cost.validate().map_err(|err| PipelineError::Config(err.to_string()))?;
        check(e.bm25_k1 >= 0.0 && (0.0..=1.0).contains(&e.bm25_b), || {
            "eval.bm25_k1 must be >= 0 and eval.bm25_b in [0, 1]".into()
        })?;
        check(e.dense_dim >= 1, || "eval.dense_dim must be >= 1".into())?;
        check(e.shap.n_evals >= 2, || "eval.shap.n_evals must be >= 2".into())?;
        check(e.shap_background >= 1, || "eval.shap_background must be >= 1".into())?;
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn upstream(&self, name: &str, producer: &'static str) -> Result<PathBuf, PipelineError> {
        let p = self.artifact(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::MissingArtifact { path: p, producer })
        }
    }

    fn ensure_output(&self) -> Result<(), PipelineError> {
        std::fs::create_dir_all(&self.output_dir).map_err(io_err(&self.output_dir))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Parsed trajectories, catalogs and derived labels.
pub struct Inputs {
    pub trajectories: Vec<Trajectory>,
    pub skipped: Vec<SkippedRecord>,
    pub catalogs: Catalogs,
    pub labels: Vec<LabeledTask>,
}

pub fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs, PipelineError> {
    let parsed = parse_trajectories(&cfg.trajectories, cfg.strict)?;
    let catalogs = load_catalogs(&cfg.catalogs)?;
    let labels = derive_labels(&parsed.trajectories, &catalogs)?;
    Ok(Inputs {
        trajectories: parsed.trajectories,
        skipped: parsed.skipped,
        catalogs,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub n_parsed: usize,
    pub n_skipped: usize,
    pub skipped: Vec<SkippedRecord>,
    pub n_successful: usize,
    pub n_labeled: usize,
    /// Task count per difficulty.
    pub difficulty_counts: BTreeMap<String, usize>,
    pub difficulty_shares: BTreeMap<String, f64>,
}

/// Parses trajectories, derives labels, writes `labels.csv` and
/// `parse_report.json`.
pub fn ingest(cfg: &PipelineConfig) -> Result<ParseReport, PipelineError> {
    cfg.ensure_output()?;
    let inputs = load_inputs(cfg)?;
    if inputs.trajectories.is_empty() {
        return Err(PipelineError::Config(format!(
            "{} holds no trajectories",
            cfg.trajectories.display()
        )));
    }
    write_labels_csv(&cfg.artifact("labels.csv"), &inputs.labels)?;
    let shares = difficulty_shares(&inputs.labels);
    let mut counts = BTreeMap::new();
    let mut share_map = BTreeMap::new();
    for (d, s) in Difficulty::ALL.iter().zip(shares) {
        counts.insert(
            d.to_string(),
            inputs.labels.iter().filter(|t| t.difficulty == *d).count(),
        );
        share_map.insert(d.to_string(), s);
    }
    let report = ParseReport {
        n_parsed: inputs.trajectories.len(),
        n_skipped: inputs.skipped.len(),
        skipped: inputs.skipped,
        n_successful: inputs.trajectories.iter().filter(|t| t.is_successful()).count(),
        n_labeled: inputs.labels.len(),
        difficulty_counts: counts,
        difficulty_shares: share_map,
    };
    write_json(&cfg.artifact("parse_report.json"), &report)?;
    Ok(report)
}

/// Runs feature discovery and builds the real feature table.
pub fn extract(cfg: &PipelineConfig, provider: &dyn LlmProvider) -> Result<FeatureCard, PipelineError> {
    cfg.upstream("labels.csv", "ingest")?;
    let inputs = load_inputs(cfg)?;
    let run = run_tabschema(
        &inputs.trajectories,
        &inputs.catalogs,
        &cfg.target,
        provider,
        &cfg.schema,
        cfg.seed,
    )?;
    let card = run.card;
    std::fs::write(cfg.artifact("feature_card.json"), card.to_json_pretty())
        .map_err(io_err(&cfg.artifact("feature_card.json")))?;
    let path = cfg.artifact("calls_extract.jsonl");
    write_calls(&path, provider, |s| s != crate::synth::STAGE)?;
    if card.columns().next().is_none() {
        return Err(PipelineError::NoAcceptedFeatures);
    }
    let table = build_feature_table(
        &card,
        &inputs.trajectories,
        &inputs.labels,
        &inputs.catalogs,
        &cfg.target,
    )?;
    table.write_csv(&cfg.artifact("feature_table.csv"))?;
    Ok(card)
}

fn write_calls(
    path: &Path,
    provider: &dyn LlmProvider,
    keep: impl Fn(&str) -> bool,
) -> Result<(), PipelineError> {
    let mut out = String::new();
    for r in provider.log().snapshot() {
        if keep(&r.stage) {
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(io_err(path))
}

fn load_card(cfg: &PipelineConfig) -> Result<FeatureCard, PipelineError> {
    read_json(&cfg.upstream("feature_card.json", "extract")?)
}

fn load_table(cfg: &PipelineConfig, name: &str, producer: &'static str) -> Result<FeatureTable, PipelineError> {
    let card = load_card(cfg)?;
    let columns = FeatureTable::from_card(&card)?.columns;
    Ok(FeatureTable::read_csv(&cfg.upstream(name, producer)?, columns)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub n_real: usize,
    pub n_synthetic: usize,
    pub rounds: usize,
    pub final_budget: usize,
    pub warnings: Vec<String>,
}

/// Augments the real table with validated synthetic positives.
pub fn synth(cfg: &PipelineConfig, provider: &dyn LlmProvider) -> Result<SynthSummary, PipelineError> {
    let real = load_table(cfg, "feature_table.csv", "extract")?;
    if !cfg.augment {
        real.write_csv(&cfg.artifact("augmented_table.csv"))?;
        return Ok(SynthSummary {
            n_real: real.rows.len(),
            n_synthetic: 0,
            rounds: 0,
            final_budget: 0,
            warnings: vec!["augmentation disabled".into()],
        });
    }
    let card = load_card(cfg)?;
    let inputs = load_inputs(cfg)?;
    let run = run_tabsynth(
        &real,
        &card,
        &inputs.trajectories,
        &inputs.labels,
        &inputs.catalogs,
        provider,
        &cfg.synth,
    )?;
    let path = cfg.artifact("synth_rows.jsonl");
    std::fs::write(&path, run.to_jsonl()).map_err(io_err(&path))?;
    let report = serde_json::json!({
        "rounds": run.rounds,
        "final_budget": run.final_budget,
        "stage_log": run.stage_log,
        "rejections": run.rejections,
        "warnings": run.warnings,
    });
    write_json(&cfg.artifact("alignment_report.json"), &report)?;
    run.table.write_csv(&cfg.artifact("augmented_table.csv"))?;
    write_calls(&cfg.artifact("calls_synth.jsonl"), provider, |s| s == crate::synth::STAGE)?;
    Ok(SynthSummary {
        n_real: real.rows.len(),
        n_synthetic: run.synthetic.len(),
        rounds: run.rounds.len(),
        final_budget: run.final_budget,
        warnings: run.warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n_train_rows: usize,
    pub n_train_synthetic: usize,
    pub n_test_tasks: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub n_rows: usize,
    pub n_synthetic: usize,
    pub n_tasks: usize,
    pub folds: Vec<FoldSummary>,
    /// Expected calibration error of the out-of-fold scores, 10 bins.
    pub oof_ece: f64,
}

/// Wall-clock measurements; excluded from reproducibility checks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds_per_fold: Vec<f64>,
    pub train_seconds_full: f64,
    /// Mean time to score all candidates of one decision.
    pub score_seconds_per_task: f64,
    pub mean_candidates: f64,
}

fn sub_table(table: &FeatureTable, keep: impl Fn(&FeatureRow) -> bool) -> FeatureTable {
    FeatureTable {
        columns: table.columns.clone(),
        rows: table.rows.iter().filter(|r| keep(r)).cloned().collect(),
    }
}

/// Task-level cross-validation plus a final model on all rows.
pub fn train(cfg: &PipelineConfig) -> Result<TrainReport, PipelineError> {
    let table = match cfg.upstream("augmented_table.csv", "synth") {
        Ok(_) => load_table(cfg, "augmented_table.csv", "synth")?,
        Err(_) => load_table(cfg, "feature_table.csv", "extract")?,
    };
    if table.rows.is_empty() {
        return Err(PipelineError::EmptyTable("feature table has no rows".into()));
    }
    let inputs = load_inputs(cfg)?;
    let in_table: BTreeSet<&str> = table
        .rows
        .iter()
        .filter(|r| r.origin == Origin::Real)
        .map(|r| r.task_id.as_str())
        .collect();
    let tasks: Vec<LabeledTask> = inputs
        .labels
        .iter()
        .filter(|t| in_table.contains(t.task_id.as_str()))
        .cloned()
        .collect();
    let folds = make_folds(&tasks, cfg.eval.n_folds, cfg.seed)?;
    write_json(&cfg.artifact("folds.json"), &folds)?;
    let cv_dir = cfg.artifact("cv");
    std::fs::create_dir_all(&cv_dir).map_err(io_err(&cv_dir))?;

    let mut train_cfg = cfg.head.train.clone();
    train_cfg.seed = cfg.seed;
    let mut summaries = Vec::new();
    let mut timings = Timings::default();
    let mut oof: Vec<(String, Ranking)> = Vec::new();
    let mut probs = Vec::new();
    let mut ys = Vec::new();
    let mut score_time = 0.0;
    let mut n_candidates = 0usize;
    for k in 0..folds.n_folds {
        let train_rows = sub_table(&table, |r| folds.fold(&r.task_id).is_some_and(|f| f != k));
        let started = Instant::now();
        let (featurizer, model) = train_on_table(&train_rows, cfg.head.featurizer.clone(), &train_cfg)?;
        timings.train_seconds_per_fold.push(started.elapsed().as_secs_f64());
        save_model(&cv_dir.join(format!("fold_{k}.bin")), &model, &featurizer)?;
        let test = sub_table(&table, |r| r.origin == Origin::Real && folds.fold(&r.task_id) == Some(k));
        let groups = test.task_groups();
        for (task, idx) in &groups {
            let designs: Vec<(String, Vec<Option<FeatureValue>>)> = idx
                .iter()
                .map(|&i| (test.rows[i].candidate_id.clone(), test.rows[i].design_values()))
                .collect();
            let started = Instant::now();
            let ranking = score_rows(
                &model,
                &featurizer,
                designs.iter().map(|(id, v)| (id.as_str(), v.as_slice())),
            )?;
            score_time += started.elapsed().as_secs_f64();
            n_candidates += idx.len();
            for &i in idx {
                let r = &test.rows[i];
                probs.push(ranking.score_of(&r.candidate_id).unwrap_or(0.0));
                ys.push(r.label);
            }
            oof.push((task.clone(), ranking));
        }
        summaries.push(FoldSummary {
            fold: k,
            n_train_rows: train_rows.rows.len(),
            n_train_synthetic: train_rows.rows.iter().filter(|r| r.origin == Origin::Synthetic).count(),
            n_test_tasks: groups.len(),
            final_loss: model.loss_history.last().copied().unwrap_or(f64::NAN),
        });
    }
    oof.sort_by(|a, b| a.0.cmp(&b.0));
    write_scores_csv(&cfg.artifact("scores.csv"), &oof).map_err(|e| PipelineError::Eval(e.into()))?;

    let started = Instant::now();
    let (featurizer, model) = train_on_table(&table, cfg.head.featurizer.clone(), &train_cfg)?;
    timings.train_seconds_full = started.elapsed().as_secs_f64();
    save_model(&cfg.artifact("model.bin"), &model, &featurizer)?;
    let n_tasks = oof.len().max(1) as f64;
    timings.score_seconds_per_task = score_time / n_tasks;
    timings.mean_candidates = n_candidates as f64 / n_tasks;
    write_json(&cfg.artifact("timings.json"), &timings)?;

    let report = TrainReport {
        n_rows: table.rows.len(),
        n_synthetic: table.rows.iter().filter(|r| r.origin == Origin::Synthetic).count(),
        n_tasks: tasks.len(),
        folds: summaries,
        oof_ece: crate::head::expected_calibration_error(&probs, &ys, 10),
    };
    write_json(&cfg.artifact("train_report.json"), &report)?;
    Ok(report)
}

/// Tools a decision chooses from: the catalogs of the task's apps.
pub fn candidate_tools<'a>(task: &LabeledTask, catalogs: &'a Catalogs) -> Vec<&'a ToolSpec> {
    task.app_set
        .iter()
        .filter_map(|a| catalogs.get(a))
        .flat_map(|c| c.tools.iter())
        .collect()
}

fn read_scores(path: &Path) -> Result<BTreeMap<String, Ranking>, PipelineError> {
    Ok(crate::head::read_scores_csv(path)
        .map_err(|e| PipelineError::Eval(e.into()))?
        .into_iter()
        .collect())
}

/// Baseline rankings for every task in the folds, with mean seconds per
/// decision.
pub fn baseline_rankings(
    tasks: &[&LabeledTask],
    catalogs: &Catalogs,
    cfg: &EvalStageConfig,
) -> Result<[(BTreeMap<String, Ranking>, f64); 2], PipelineError> {
    let mut bm25_indexes: BTreeMap<Vec<String>, Bm25Index> = BTreeMap::new();
    for t in tasks {
        let key: Vec<String> = t.app_set.iter().cloned().collect();
        if !bm25_indexes.contains_key(&key) {
            let tools = candidate_tools(t, catalogs);
            bm25_indexes.insert(key, Bm25Index::from_tools(&tools, cfg.bm25_k1, cfg.bm25_b)?);
        }
    }
    let mut bm25 = BTreeMap::new();
    let started = Instant::now();
    for t in tasks {
        let key: Vec<String> = t.app_set.iter().cloned().collect();
        bm25.insert(t.task_id.clone(), bm25_indexes[&key].rank(&t.intent));
    }
    let bm25_time = started.elapsed().as_secs_f64() / tasks.len().max(1) as f64;

    let dense = DenseScorer::new(HashingEmbedder { dim: cfg.dense_dim });
    let mut dense_out = BTreeMap::new();
    let started = Instant::now();
    for t in tasks {
        let tools = candidate_tools(t, catalogs);
        dense_out.insert(t.task_id.clone(), dense.rank(&t.intent, &tools)?);
    }
    let dense_time = started.elapsed().as_secs_f64() / tasks.len().max(1) as f64;
    Ok([(bm25, bm25_time), (dense_out, dense_time)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    #[serde(flatten)]
    pub report: EvalReport,
    pub shap: Vec<ShapSummary>,
    pub invariant_violations: Vec<String>,
}

fn sample<T: Clone>(items: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v.truncate(n);
    v
}

/// Attributions of the final model's relevance score to each design column,
/// on held-in positive rows against a background of real rows.
pub fn shap_summary(cfg: &PipelineConfig, table: &FeatureTable) -> Result<Vec<ShapSummary>, PipelineError> {
    let (model, featurizer) = load_model(&cfg.upstream("model.bin", "train")?)?;
    let real: Vec<Vec<Option<FeatureValue>>> = table
        .rows
        .iter()
        .filter(|r| r.origin == Origin::Real)
        .map(FeatureRow::design_values)
        .collect();
    let positives: Vec<Vec<Option<FeatureValue>>> = table
        .rows
        .iter()
        .filter(|r| r.origin == Origin::Real && r.label == 1)
        .map(FeatureRow::design_values)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.shap.seed ^ cfg.seed);
    let background = sample(&real, cfg.eval.shap_background, &mut rng);
    let instances = sample(&positives, cfg.eval.shap_instances, &mut rng);
    let f = |row: &[Option<FeatureValue>]| {
        featurizer
            .transform(row)
            .ok()
            .and_then(|x| model.probability(&x).ok())
            .unwrap_or(f64::NAN)
    };
    let mut results = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let mut sc = cfg.eval.shap.clone();
        sc.seed = sc.seed.wrapping_add(i as u64);
        results.push(kernel_shap(f, &background, inst, &sc)?);
    }
    let names: Vec<String> = table.design_columns().into_iter().map(|c| c.name).collect();
    Ok(summarize_shap(&names, &results))
}

/// Scores the baselines, compares them with the head's out-of-fold scores,
/// and writes the report. Invariant violations are written into the report
/// and returned as an error.
pub fn evaluate(cfg: &PipelineConfig) -> Result<FullReport, PipelineError> {
    let folds: FoldAssignment = read_json(&cfg.upstream("folds.json", "train")?)?;
    let head_scores = read_scores(&cfg.upstream("scores.csv", "train")?)?;
    let timings: Timings = read_json(&cfg.upstream("timings.json", "train")?)?;
    let inputs = load_inputs(cfg)?;
    let tasks: Vec<&LabeledTask> = inputs
        .labels
        .iter()
        .filter(|t| folds.fold_of.contains_key(&t.task_id))
        .collect();
    let [(bm25, bm25_time), (dense, dense_time)] =
        baseline_rankings(&tasks, &inputs.catalogs, &cfg.eval)?;
    let as_pairs = |m: &BTreeMap<String, Ranking>| -> Vec<(String, Ranking)> {
        m.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    };
    write_scores_csv(&cfg.artifact("scores_bm25.csv"), &as_pairs(&bm25)).map_err(|e| PipelineError::Eval(e.into()))?;
    write_scores_csv(&cfg.artifact("scores_dense.csv"), &as_pairs(&dense)).map_err(|e| PipelineError::Eval(e.into()))?;
    let methods = vec![
        MethodRun {
            name: TABHEAD.into(),
            seeds: vec![head_scores],
            runtime_seconds: Some(timings.score_seconds_per_task),
            metered_cost: None,
        },
        MethodRun {
            name: BM25.into(),
            seeds: vec![bm25],
            runtime_seconds: Some(bm25_time),
            metered_cost: None,
        },
        MethodRun {
            name: DENSE.into(),
            seeds: vec![dense],
            runtime_seconds: Some(dense_time),
            metered_cost: None,
        },
    ];
    let owned: Vec<LabeledTask> = tasks.iter().map(|t| (*t).clone()).collect();
    let mut report_cfg = cfg.eval.report.clone();
    report_cfg.bootstrap.seed ^= cfg.seed;
    let report = run_evaluation(&methods, &owned, &folds, &report_cfg)?;
    let table = load_table(cfg, "feature_table.csv", "extract")?;
    let shap = shap_summary(cfg, &table)?;
    let violations = check_invariants(&report);
    let full = FullReport {
        report,
        shap,
        invariant_violations: violations.clone(),
    };
    write_json(&cfg.artifact("report.json"), &full)?;
    let mut md = eval::render_markdown(&full.report);
    md.push_str("\n## Feature attributions\n\n| feature | mean abs | % |\n|---|---|---|\n");
    for s in &full.shap {
        md.push_str(&format!("| {} | {:.4} | {:.1} |\n", s.feature, s.mean_abs, s.percent));
    }
    let md_path = cfg.artifact("report.md");
    std::fs::write(&md_path, md).map_err(io_err(&md_path))?;
    eval::write_frontier_csv(&cfg.artifact("frontier.csv"), &full.report)?;
    eval::write_shap_csv(&cfg.artifact("shap.csv"), &full.shap)?;
    if !violations.is_empty() {
        return Err(PipelineError::Invariants(violations));
    }
    Ok(full)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLine {
    pub method: String,
    pub runtime_seconds: f64,
    pub cost: f64,
    pub metered: bool,
}

/// Per-read cost of each modeled runtime, plus metered charges as given.
pub fn cost_table(
    runtimes: &[(String, f64)],
    metered: &[(String, f64)],
    params: &eval::CostModelParams,
) -> Result<Vec<CostLine>, PipelineError> {
    let mut out = Vec::new();
    for (m, t) in runtimes {
        out.push(CostLine {
            method: m.clone(),
            runtime_seconds: *t,
            cost: eval::cost_per_read(*t, params)?,
            metered: false,
        });
    }
    for (m, c) in metered {
        out.push(CostLine {
            method: m.clone(),
            runtime_seconds: f64::NAN,
            cost: *c,
            metered: true,
        });
    }
    Ok(out)
}

/// Runtimes recorded in an existing `report.json`.
pub fn report_runtimes(cfg: &PipelineConfig) -> Result<Vec<(String, f64)>, PipelineError> {
    let report: FullReport = read_json(&cfg.upstream("report.json", "eval")?)?;
    Ok(report
        .report
        .costs
        .iter()
        .filter(|c| !c.metered)
        .map(|c| (c.method.clone(), c.runtime_seconds))
        .collect())
}

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig, provider: &dyn LlmProvider) -> Result<FullReport, PipelineError> {
    ingest(cfg)?;
    extract(cfg, provider)?;
    synth(cfg, provider)?;
    train(cfg)?;
    evaluate(cfg)
}

/// Writes a planted corpus, its catalogs, the matching mock script and a
/// config into `dir`; returns the config path.
pub fn write_planted_workspace(dir: &Path, n_tasks: usize, seed: u64) -> Result<PathBuf, PipelineError> {
    use crate::trace::{generate_synthetic_corpus, CorpusSpec};
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (trajectories, catalogs) = generate_synthetic_corpus(&CorpusSpec::planted(n_tasks), seed)?;
    crate::trace::write_trajectories(&dir.join("trajectories.jsonl"), &trajectories)?;
    crate::trace::write_catalogs(&dir.join("catalogs"), &catalogs)?;
    let script = dir.join("mock_script.jsonl");
    std::fs::write(&script, crate::provider::ScriptedProvider::to_jsonl(&planted::script()))
        .map_err(io_err(&script))?;
    let mut cfg = PipelineConfig::new(
        "trajectories.jsonl".into(),
        "catalogs".into(),
        "run".into(),
        "mock_script.jsonl".into(),
    );
    cfg.seed = seed;
    let path = dir.join("config.json");
    write_json(&path, &cfg)?;
    Ok(path)
}
