//! The (task, candidate) feature table.
//!
//! One row per successful task and candidate tool in the catalogs of the
//! task's apps. Columns, in CSV order:
//!
//! - `task_id`, `app`, `candidate_tool_id`
//! - schema key: `tax_depth`, `api_arity`, `arg_mask`, `io_cardinality`,
//!   `dep_pattern` (`<last tool called before the decision>><candidate>`, with
//!   `START` when nothing was called), `phase` (name of the step right before
//!   the decision)
//! - one column per feature the card turns into a column
//! - `candidate_text`, `label` (1 iff the candidate was used), `origin`

use super::dsl::{evaluate, EvalContext};
use super::{FeatureCard, FeatureType};
use crate::head::{ColumnKind, DesignColumn};
use crate::trace::{tool_calls, Catalogs, LabeledTask, ToolIndex, ToolSpec, Trajectory};
use crate::value::{parse_cell, FeatureValue, ValueType};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const KEY_COLUMNS: [&str; 6] = [
    "tax_depth",
    "api_arity",
    "arg_mask",
    "io_cardinality",
    "dep_pattern",
    "phase",
];
const RESERVED: [&str; 6] = [
    "task_id",
    "app",
    "candidate_tool_id",
    "candidate_text",
    "label",
    "origin",
];

/// Marker used in `dep_pattern` and `phase` when nothing precedes the decision.
pub const START: &str = "START";

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("task {task_id}: no catalog for app `{app}`")]
    CatalogMismatch { task_id: String, app: String },
    #[error("task {task_id}: relevant tool `{tool_id}` is not a candidate")]
    LabelMismatch { task_id: String, tool_id: String },
    #[error("feature `{0}` collides with a reserved column")]
    ReservedName(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SchemaKey {
    pub tax_depth: u32,
    pub api_arity: u32,
    pub arg_mask: String,
    pub io_cardinality: String,
    pub dep_pattern: String,
    pub phase: String,
}

impl SchemaKey {
    pub fn for_tool(tool: &ToolSpec, dep_pattern: String, phase: String) -> Self {
        SchemaKey {
            tax_depth: tool.taxonomy_depth,
            api_arity: tool.argument_schema.len() as u32,
            arg_mask: tool.arg_mask(),
            io_cardinality: tool.io_label(),
            dep_pattern,
            phase,
        }
    }

    /// The four fields near-duplicate buckets are keyed on.
    pub fn bucket(&self) -> (u32, &str, &str, &str) {
        (self.tax_depth, &self.arg_mask, &self.dep_pattern, &self.phase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Real => "real",
            Origin::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub feature_type: FeatureType,
    pub value_type: ValueType,
    pub candidate_conditioned: bool,
}

impl Column {
    pub fn kind(&self) -> ColumnKind {
        match (self.value_type, self.feature_type) {
            (ValueType::Number, _) => ColumnKind::Numeric,
            (ValueType::Text, FeatureType::Text) => ColumnKind::Text,
            _ => ColumnKind::Categorical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub task_id: String,
    pub app: String,
    pub candidate_id: String,
    pub key: SchemaKey,
    /// Aligned with [`FeatureTable::columns`]; `None` is missing.
    pub values: Vec<Option<FeatureValue>>,
    pub candidate_text: String,
    pub label: u8,
    pub origin: Origin,
}

impl FeatureRow {
    /// Values in [`FeatureTable::design_columns`] order.
    pub fn design_values(&self) -> Vec<Option<FeatureValue>> {
        let mut out = Vec::with_capacity(self.values.len() + 7);
        out.push(Some(FeatureValue::Number(f64::from(self.key.tax_depth))));
        out.push(Some(FeatureValue::Number(f64::from(self.key.api_arity))));
        out.push(Some(FeatureValue::Text(self.key.arg_mask.clone())));
        out.push(Some(FeatureValue::Text(self.key.io_cardinality.clone())));
        out.push(Some(FeatureValue::Text(self.key.dep_pattern.clone())));
        out.push(Some(FeatureValue::Text(self.key.phase.clone())));
        out.extend(self.values.iter().cloned());
        out.push(Some(FeatureValue::Text(self.candidate_text.clone())));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureTable {
    pub columns: Vec<Column>,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    /// Empty table whose feature columns are the card's column entries.
    pub fn from_card(card: &FeatureCard) -> Result<Self, TableError> {
        let mut columns = Vec::new();
        for e in card.columns() {
            let name = &e.spec.feature_name;
            if RESERVED.contains(&name.as_str()) || KEY_COLUMNS.contains(&name.as_str()) {
                return Err(TableError::ReservedName(name.clone()));
            }
            columns.push(Column {
                name: name.clone(),
                feature_type: e.spec.feature_type,
                value_type: e.spec.value_type(),
                candidate_conditioned: e.spec.is_candidate_conditioned(),
            });
        }
        Ok(FeatureTable {
            columns,
            rows: Vec::new(),
        })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Head inputs: the schema key, the feature columns, and the candidate text.
    pub fn design_columns(&self) -> Vec<DesignColumn> {
        let mut out = vec![
            DesignColumn::new("tax_depth", ColumnKind::Numeric),
            DesignColumn::new("api_arity", ColumnKind::Numeric),
            DesignColumn::new("arg_mask", ColumnKind::Categorical),
            DesignColumn::new("io_cardinality", ColumnKind::Categorical),
            DesignColumn::new("dep_pattern", ColumnKind::Categorical),
            DesignColumn::new("phase", ColumnKind::Categorical),
        ];
        out.extend(self.columns.iter().map(|c| DesignColumn::new(&c.name, c.kind())));
        out.push(DesignColumn::new("candidate_text", ColumnKind::Text));
        out
    }

    /// Row indices grouped by task, in first-appearance order.
    pub fn task_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            let g = groups.entry(r.task_id.as_str()).or_default();
            if g.is_empty() {
                order.push(r.task_id.clone());
            }
            g.push(i);
        }
        order
            .into_iter()
            .map(|t| {
                let idx = groups.remove(t.as_str()).unwrap_or_default();
                (t, idx)
            })
            .collect()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["task_id", "app", "candidate_tool_id"]
            .iter()
            .chain(KEY_COLUMNS.iter())
            .map(|s| s.to_string())
            .collect();
        h.extend(self.columns.iter().map(|c| c.name.clone()));
        h.extend(["candidate_text", "label", "origin"].map(String::from));
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TableError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.task_id.clone(),
                r.app.clone(),
                r.candidate_id.clone(),
                r.key.tax_depth.to_string(),
                r.key.api_arity.to_string(),
                r.key.arg_mask.clone(),
                r.key.io_cardinality.clone(),
                r.key.dep_pattern.clone(),
                r.key.phase.clone(),
            ];
            rec.extend(
                r.values
                    .iter()
                    .map(|v| v.as_ref().map(FeatureValue::category).unwrap_or_default()),
            );
            rec.push(r.candidate_text.clone());
            rec.push(r.label.to_string());
            rec.push(r.origin.as_str().to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`write_csv`](Self::write_csv); column types come
    /// from `columns` (normally [`from_card`](Self::from_card)).
    pub fn read_csv(path: &Path, columns: Vec<Column>) -> Result<Self, TableError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut table = FeatureTable {
            columns,
            rows: Vec::new(),
        };
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != table.header() {
            return Err(TableError::Format(format!(
                "{}: header does not match the feature card",
                path.display()
            )));
        }
        let nf = table.columns.len();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let get = |i: usize| rec.get(i).unwrap_or_default().to_string();
            let num = |i: usize| -> Result<u32, TableError> {
                get(i).parse().map_err(|_| {
                    TableError::Format(format!("row {}: bad integer in column {i}", line + 1))
                })
            };
            let values = (0..nf)
                .map(|j| parse_cell(&get(9 + j), table.columns[j].value_type))
                .collect();
            let label: u8 = get(10 + nf)
                .parse()
                .map_err(|_| TableError::Format(format!("row {}: bad label", line + 1)))?;
            let origin = match get(11 + nf).as_str() {
                "real" => Origin::Real,
                "synthetic" => Origin::Synthetic,
                other => {
                    return Err(TableError::Format(format!(
                        "row {}: bad origin `{other}`",
                        line + 1
                    )))
                }
            };
            table.rows.push(FeatureRow {
                task_id: get(0),
                app: get(1),
                candidate_id: get(2),
                key: SchemaKey {
                    tax_depth: num(3)?,
                    api_arity: num(4)?,
                    arg_mask: get(5),
                    io_cardinality: get(6),
                    dep_pattern: get(7),
                    phase: get(8),
                },
                values,
                candidate_text: get(9 + nf),
                label,
                origin,
            });
        }
        Ok(table)
    }

    /// JSON object view of a row (missing values omitted).
    pub fn row_json(&self, row: &FeatureRow) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        m.insert("task_id".into(), row.task_id.clone().into());
        m.insert("app_name".into(), row.app.clone().into());
        m.insert("candidate_tool_id".into(), row.candidate_id.clone().into());
        m.insert("tax_depth".into(), row.key.tax_depth.into());
        m.insert("api_arity".into(), row.key.api_arity.into());
        m.insert("arg_mask".into(), row.key.arg_mask.clone().into());
        m.insert("io_cardinality".into(), row.key.io_cardinality.clone().into());
        m.insert("dep_pattern".into(), row.key.dep_pattern.clone().into());
        m.insert("phase".into(), row.key.phase.clone().into());
        for (c, v) in self.columns.iter().zip(&row.values) {
            if let Some(v) = v {
                m.insert(c.name.clone(), v.to_json());
            }
        }
        m.insert("label".into(), row.label.into());
        m
    }
}

struct TaskContext<'a> {
    trajectory: &'a Trajectory,
    target_index: usize,
    dep_from: String,
    phase: String,
}

/// Builds the real feature table for every labeled task whose trajectory
/// contains the decision step.
pub fn build_feature_table(
    card: &FeatureCard,
    trajectories: &[Trajectory],
    labels: &[LabeledTask],
    catalogs: &Catalogs,
    target: &str,
) -> Result<FeatureTable, TableError> {
    let mut table = FeatureTable::from_card(card)?;
    let specs: Vec<_> = card.columns().map(|e| e.spec.clone()).collect();
    if specs.is_empty() {
        log::warn!("feature card has no accepted features; table holds candidate text and labels only");
    }
    let index = ToolIndex::new(catalogs);
    let by_id: BTreeMap<&str, &Trajectory> =
        trajectories.iter().map(|t| (t.task_id.as_str(), t)).collect();
    for task in labels {
        let Some(traj) = by_id.get(task.task_id.as_str()) else {
            log::warn!("task {}: no trajectory, skipped", task.task_id);
            continue;
        };
        let Some(target_index) = traj.target_index(target) else {
            log::warn!("task {}: no `{target}` step, skipped", task.task_id);
            continue;
        };
        let calls = tool_calls(traj, target_index, &index);
        let tc = TaskContext {
            trajectory: traj,
            target_index,
            dep_from: calls.last().cloned().unwrap_or_else(|| START.to_string()),
            phase: target_index
                .checked_sub(1)
                .map(|i| traj.steps[i].name.clone())
                .unwrap_or_else(|| START.to_string()),
        };
        let mut candidates: Vec<&ToolSpec> = Vec::new();
        for app in &task.app_set {
            let cat = catalogs.get(app).ok_or_else(|| TableError::CatalogMismatch {
                task_id: task.task_id.clone(),
                app: app.clone(),
            })?;
            candidates.extend(cat.tools.iter());
        }
        for g in &task.relevant_tools {
            if !candidates.iter().any(|c| &c.tool_id == g) {
                return Err(TableError::LabelMismatch {
                    task_id: task.task_id.clone(),
                    tool_id: g.clone(),
                });
            }
        }
        let context: Vec<Option<FeatureValue>> = specs
            .iter()
            .map(|s| {
                if s.is_candidate_conditioned() {
                    None
                } else {
                    run(s, &tc, None, &index)
                }
            })
            .collect();
        for tool in candidates {
            let values = specs
                .iter()
                .zip(&context)
                .map(|(s, v)| {
                    if s.is_candidate_conditioned() {
                        run(s, &tc, Some(&tool.tool_id), &index)
                    } else {
                        v.clone()
                    }
                })
                .collect();
            table.rows.push(FeatureRow {
                task_id: task.task_id.clone(),
                app: tool.app.clone(),
                candidate_id: tool.tool_id.clone(),
                key: SchemaKey::for_tool(
                    tool,
                    format!("{}>{}", tc.dep_from, tool.tool_id),
                    tc.phase.clone(),
                ),
                values,
                candidate_text: tool.candidate_text(),
                label: u8::from(task.is_relevant(&tool.tool_id)),
                origin: Origin::Real,
            });
        }
    }
    Ok(table)
}

fn run(
    spec: &super::FeatureSpec,
    tc: &TaskContext<'_>,
    candidate: Option<&str>,
    index: &ToolIndex,
) -> Option<FeatureValue> {
    let program = spec.program.as_ref()?;
    let ctx = EvalContext {
        trajectory: tc.trajectory,
        target_index: tc.target_index,
        candidate,
        tools: Some(index),
    };
    evaluate(program, &ctx).ok()
}
