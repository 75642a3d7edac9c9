//! Schema-aligned synthesis of positive feature rows.
//!
//! Each round asks the provider for up to `B` positive rows per (task,
//! relevant tool), then filters them in a fixed order: schema checks,
//! dependency feasibility, near-duplicate removal, and finally a joint
//! alignment test against the real positive rows. A failed alignment halves
//! `B` and regenerates.

pub mod align;
mod prompt;
pub mod validate;

pub use align::{check_alignment, AlignConfig, AlignmentReport, MarginalResult, MarginalTest};
pub use validate::{
    dedup_lsh, observed_precedence, validate_dependencies, validate_schema, DedupSpace,
    RejectReason, Rejection, SchemaContext, SynthRow, PRECONDITION_FLAGS,
};

use crate::features::{table::KEY_COLUMNS, FeatureCard, FeatureRow, FeatureTable, Origin};
use crate::provider::{complete_parsed, extract_json, LlmProvider, ProviderError};
use crate::strata::size_bins;
use crate::trace::{Catalogs, LabeledTask, ToolIndex, Trajectory};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

pub const STAGE: &str = "tabsynth";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("alignment needs non-empty synthetic and real samples")]
    EmptyAlignment,
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("candidate `{candidate}` of task {task_id} is not in the catalogs")]
    UnknownCandidate { task_id: String, candidate: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub budget: usize,
    pub max_rounds: usize,
    pub cosine_threshold: f64,
    pub parse_attempts: usize,
    pub align: AlignConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            budget: 10,
            max_rounds: 3,
            cosine_threshold: 0.98,
            parse_attempts: 2,
            align: AlignConfig::default(),
        }
    }
}

/// One provider-emitted row before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSynthRow {
    pub task_id: String,
    pub app: String,
    pub candidate_id: String,
    pub fields: serde_json::Map<String, serde_json::Value>,
}

impl RawSynthRow {
    /// Raw form of an already validated row, for re-validation.
    pub fn from_synth(table: &FeatureTable, row: &SynthRow) -> Self {
        let mut fields = table.row_json(&row.row);
        for (k, v) in &row.preconditions {
            fields.insert(k.clone(), (*v).into());
        }
        RawSynthRow {
            task_id: row.row.task_id.clone(),
            app: row.row.app.clone(),
            candidate_id: row.row.candidate_id.clone(),
            fields,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisRequest<'a> {
    pub task_id: &'a str,
    pub app: &'a str,
    pub candidate_id: &'a str,
    pub budget: usize,
    pub card: &'a FeatureCard,
    /// Real positive rows of the task.
    pub trajectory_slice: Vec<&'a FeatureRow>,
    pub table: &'a FeatureTable,
    pub catalogs: &'a Catalogs,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedRows {
    pub rows: Vec<RawSynthRow>,
    /// Vectors that were not JSON objects.
    pub unparseable: usize,
    /// Vectors carrying a field outside the table schema.
    pub unknown_field: usize,
}

fn allowed_fields(table: &FeatureTable) -> BTreeSet<String> {
    let mut s: BTreeSet<String> = ["task_id", "app", "app_name", "candidate_tool_id", "label"]
        .iter()
        .chain(KEY_COLUMNS.iter())
        .map(|s| s.to_string())
        .collect();
    s.extend(table.columns.iter().map(|c| c.name.clone()));
    s.extend(PRECONDITION_FLAGS.iter().map(|(f, _)| f.to_string()));
    s
}

fn vectors_of(raw: &str) -> Result<Vec<serde_json::Value>, String> {
    match extract_json(raw)? {
        serde_json::Value::Array(v) => Ok(v),
        serde_json::Value::Object(mut o) => match o.remove("synthetic_feature_vectors") {
            Some(serde_json::Value::Array(v)) => Ok(v),
            Some(_) => Err("`synthetic_feature_vectors` is not an array".into()),
            None => Err("missing `synthetic_feature_vectors`".into()),
        },
        _ => Err("expected a JSON object".into()),
    }
}

/// Parses a synthesis response. Non-object vectors and vectors with fields
/// outside the schema are dropped and counted.
pub fn parse_rows(
    raw: &str,
    table: &FeatureTable,
    task_id: &str,
    app: &str,
    candidate_id: &str,
) -> Result<ParsedRows, String> {
    let allowed = allowed_fields(table);
    let mut out = ParsedRows::default();
    for v in vectors_of(raw)? {
        let serde_json::Value::Object(fields) = v else {
            out.unparseable += 1;
            continue;
        };
        if let Some(k) = fields.keys().find(|k| !allowed.contains(*k)) {
            log::debug!("synthetic row for {task_id}/{candidate_id}: unknown field `{k}`");
            out.unknown_field += 1;
            continue;
        }
        out.rows.push(RawSynthRow {
            task_id: task_id.to_string(),
            app: app.to_string(),
            candidate_id: candidate_id.to_string(),
            fields,
        });
    }
    Ok(out)
}

/// One provider call for one (task, candidate).
pub fn synthesize(
    request: &SynthesisRequest<'_>,
    provider: &dyn LlmProvider,
    parse_attempts: usize,
) -> Result<ParsedRows, SynthError> {
    if request.budget == 0 {
        return Err(SynthError::ZeroBudget);
    }
    let tool = request
        .catalogs
        .get(request.app)
        .and_then(|c| c.get(request.candidate_id))
        .ok_or_else(|| SynthError::UnknownCandidate {
            task_id: request.task_id.to_string(),
            candidate: request.candidate_id.to_string(),
        })?;
    let p = prompt::synthesis(request, tool);
    let parsed = complete_parsed(provider, &p, parse_attempts, |raw| {
        parse_rows(
            raw,
            request.table,
            request.task_id,
            request.app,
            request.candidate_id,
        )
    })?;
    Ok(parsed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synthesize,
    ValidateSchema,
    ValidateDependencies,
    Dedup,
    Align,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub round: usize,
    pub stage: Stage,
    pub rows_in: usize,
    pub rows_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub budget: usize,
    pub pairs: usize,
    pub parsed: usize,
    pub unparseable: usize,
    pub unknown_field: usize,
    pub survivors: usize,
    pub aligned: bool,
    pub report: Option<AlignmentReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRun {
    pub table: FeatureTable,
    pub synthetic: Vec<SynthRow>,
    pub rounds: Vec<RoundSummary>,
    pub stage_log: Vec<StageEvent>,
    /// Budget of the last round that ran.
    pub final_budget: usize,
    pub rejections: Vec<Rejection>,
    pub warnings: Vec<String>,
}

impl SynthRun {
    /// Alignment report of the last round, if alignment ran.
    pub fn report(&self) -> Option<&AlignmentReport> {
        self.rounds.iter().rev().find_map(|r| r.report.as_ref())
    }

    /// Surviving rows grouped per (task, candidate) in the provider output
    /// format, one object per line.
    pub fn to_jsonl(&self) -> String {
        let mut groups: BTreeMap<(&str, &str), Vec<serde_json::Value>> = BTreeMap::new();
        let mut apps: HashMap<(&str, &str), &str> = HashMap::new();
        for s in &self.synthetic {
            let key = (s.row.task_id.as_str(), s.row.candidate_id.as_str());
            apps.insert(key, &s.row.app);
            let mut m = self.table.row_json(&s.row);
            m.remove("task_id");
            m.remove("candidate_tool_id");
            for (k, v) in &s.preconditions {
                m.insert(k.clone(), (*v).into());
            }
            groups.entry(key).or_default().push(serde_json::Value::Object(m));
        }
        let mut out = String::new();
        for ((task, cand), vectors) in groups {
            let obj = serde_json::json!({
                "task_id": task,
                "app_name": apps[&(task, cand)],
                "candidate_tool_id": cand,
                "synthetic_feature_vectors": vectors,
            });
            out.push_str(&obj.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Pair {
    task_id: String,
    app: String,
    candidate: String,
    stratum: (String, usize),
}

/// Pairs whose stratum holds fewer synthetic rows per real row than the
/// average stratum; every pair when nothing has been accepted yet.
fn regeneration_targets(pairs: &[Pair], accepted: &[SynthRow], real_per_stratum: &BTreeMap<(String, usize), usize>) -> Vec<Pair> {
    if accepted.is_empty() {
        return pairs.to_vec();
    }
    let mut synth: BTreeMap<(String, usize), usize> = BTreeMap::new();
    let stratum_of: HashMap<(&str, &str), &(String, usize)> = pairs
        .iter()
        .map(|p| ((p.task_id.as_str(), p.candidate.as_str()), &p.stratum))
        .collect();
    for s in accepted {
        if let Some(st) = stratum_of.get(&(s.row.task_id.as_str(), s.row.candidate_id.as_str())) {
            *synth.entry((*st).clone()).or_default() += 1;
        }
    }
    let ratio = |st: &(String, usize)| {
        synth.get(st).copied().unwrap_or(0) as f64 / real_per_stratum.get(st).copied().unwrap_or(1).max(1) as f64
    };
    let mean = real_per_stratum.keys().map(ratio).sum::<f64>() / real_per_stratum.len().max(1) as f64;
    pairs.iter().filter(|p| ratio(&p.stratum) < mean).cloned().collect()
}

/// Runs synthesis rounds and returns the real table with surviving synthetic
/// rows appended.
pub fn run_tabsynth(
    real: &FeatureTable,
    card: &FeatureCard,
    trajectories: &[Trajectory],
    labels: &[LabeledTask],
    catalogs: &Catalogs,
    provider: &dyn LlmProvider,
    config: &SynthConfig,
) -> Result<SynthRun, SynthError> {
    if config.budget == 0 {
        return Err(SynthError::ZeroBudget);
    }
    let index = ToolIndex::new(catalogs);
    let ctx = SchemaContext::from_table(real);
    let real_rows: Vec<FeatureRow> = real
        .rows
        .iter()
        .filter(|r| r.origin == Origin::Real)
        .cloned()
        .collect();
    let positives: Vec<FeatureRow> = real_rows.iter().filter(|r| r.label == 1).cloned().collect();
    let reference = if positives.is_empty() { &real_rows } else { &positives };
    // Synthetic rows are positives; scale similarity by the rows they imitate.
    let space = DedupSpace::fit(&real.columns, reference);
    let by_task: HashMap<&str, Vec<&Trajectory>> =
        trajectories.iter().fold(HashMap::new(), |mut m, t| {
            m.entry(t.task_id.as_str()).or_default().push(t);
            m
        });
    let mut slices: HashMap<&str, Vec<&FeatureRow>> = HashMap::new();
    for r in &positives {
        slices.entry(r.task_id.as_str()).or_default().push(r);
    }

    let in_table: BTreeSet<&str> = real_rows.iter().map(|r| r.task_id.as_str()).collect();
    let tasks: Vec<&LabeledTask> = labels.iter().filter(|t| in_table.contains(t.task_id.as_str())).collect();
    let bins = size_bins(&tasks.iter().map(|t| t.r()).collect::<Vec<_>>());
    let mut pairs = Vec::new();
    let mut real_per_stratum: BTreeMap<(String, usize), usize> = BTreeMap::new();
    for (t, &bin) in tasks.iter().zip(&bins) {
        let stratum = (t.app.clone(), bin);
        *real_per_stratum.entry(stratum.clone()).or_default() += 1;
        for g in &t.relevant_tools {
            let app = index.app_of(g).unwrap_or(&t.app).to_string();
            pairs.push(Pair {
                task_id: t.task_id.clone(),
                app,
                candidate: g.clone(),
                stratum: stratum.clone(),
            });
        }
    }

    let mut budget = config.budget;
    let mut pending = pairs.clone();
    let mut accepted: Vec<SynthRow> = Vec::new();
    let mut rounds = Vec::new();
    let mut stage_log = Vec::new();
    let mut rejections = Vec::new();
    let mut warnings = Vec::new();
    let mut final_budget = budget;
    for round in 1..=config.max_rounds.max(1) {
        final_budget = budget;
        let mut raw = Vec::new();
        let (mut unparseable, mut unknown_field) = (0, 0);
        for p in &pending {
            let request = SynthesisRequest {
                task_id: &p.task_id,
                app: &p.app,
                candidate_id: &p.candidate,
                budget,
                card,
                trajectory_slice: slices.get(p.task_id.as_str()).cloned().unwrap_or_default(),
                table: real,
                catalogs,
            };
            let mut parsed = synthesize(&request, provider, config.parse_attempts)?;
            parsed.rows.truncate(budget);
            unparseable += parsed.unparseable;
            unknown_field += parsed.unknown_field;
            raw.extend(parsed.rows);
        }
        let parsed = raw.len();
        stage_log.push(StageEvent { round, stage: Stage::Synthesize, rows_in: pending.len(), rows_out: parsed });

        let (rows, rej) = validate_schema(&raw, &ctx, catalogs);
        stage_log.push(StageEvent { round, stage: Stage::ValidateSchema, rows_in: parsed, rows_out: rows.len() });
        rejections.extend(rej);

        let n_in = rows.len();
        let mut grouped: BTreeMap<String, Vec<SynthRow>> = BTreeMap::new();
        let mut order = Vec::new();
        for r in rows {
            if !grouped.contains_key(&r.row.task_id) {
                order.push(r.row.task_id.clone());
            }
            grouped.entry(r.row.task_id.clone()).or_default().push(r);
        }
        let mut rows = Vec::new();
        for task in order {
            let group = grouped.remove(&task).unwrap_or_default();
            let slice = by_task.get(task.as_str()).cloned().unwrap_or_default();
            let (kept, rej) = validate_dependencies(group, &slice, &index);
            rows.extend(kept);
            rejections.extend(rej);
        }
        stage_log.push(StageEvent { round, stage: Stage::ValidateDependencies, rows_in: n_in, rows_out: rows.len() });

        let n_in = rows.len();
        let mut reference_rows = real_rows.clone();
        reference_rows.extend(accepted.iter().map(|s| s.row.clone()));
        let (rows, rej) = dedup_lsh(rows, &reference_rows, &space, config.cosine_threshold);
        stage_log.push(StageEvent { round, stage: Stage::Dedup, rows_in: n_in, rows_out: rows.len() });
        rejections.extend(rej);

        let mut summary = RoundSummary {
            round,
            budget,
            pairs: pending.len(),
            parsed,
            unparseable,
            unknown_field,
            survivors: rows.len(),
            aligned: false,
            report: None,
        };
        if !rows.is_empty() {
            let synth: Vec<FeatureRow> = accepted.iter().chain(&rows).map(|s| s.row.clone()).collect();
            let report = check_alignment(&synth, reference, &real.columns, &config.align)?;
            stage_log.push(StageEvent { round, stage: Stage::Align, rows_in: rows.len(), rows_out: if report.pass { rows.len() } else { 0 } });
            summary.aligned = report.pass;
            summary.report = Some(report);
        }
        let aligned = summary.aligned;
        rounds.push(summary);
        if aligned {
            accepted.extend(rows);
            break;
        }
        log::info!("synthesis round {round}: alignment failed with B = {budget}");
        if round < config.max_rounds {
            budget = (budget / 2).max(1);
            pending = regeneration_targets(&pairs, &accepted, &real_per_stratum);
        }
    }
    if accepted.is_empty() {
        let msg = format!(
            "no synthetic rows survived after {} round(s); using the real table only",
            rounds.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut table = real.clone();
    table.rows.extend(accepted.iter().map(|s| s.row.clone()));
    Ok(SynthRun {
        table,
        synthetic: accepted,
        rounds,
        stage_log,
        final_budget,
        rejections,
        warnings,
    })
}
