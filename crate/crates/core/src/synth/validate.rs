//! Row filters: schema checks, dependency feasibility and near-duplicate removal.

use super::RawSynthRow;
use crate::features::{Column, FeatureRow, FeatureTable, Origin, SchemaKey};
use crate::head::ColumnKind;
use crate::trace::{tool_calls, Catalogs, ToolIndex, ToolSpec, Trajectory};
use crate::value::{FeatureValue, ValueType};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

/// Precondition flags a row may carry, with the value under which the
/// candidate can run.
pub const PRECONDITION_FLAGS: [(&str, bool); 1] = [("api_missing", false)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TypeMismatch,
    Taxonomy,
    Arity,
    IoCardinality,
    ArgMask,
    OutOfRange,
    Label,
    UnknownCandidate,
    PrecedenceUnobserved,
    UnknownPhase,
    PreconditionUnsatisfied,
    KeyMissing,
    NearDuplicate,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::TypeMismatch => "type_mismatch",
            RejectReason::Taxonomy => "taxonomy",
            RejectReason::Arity => "arity",
            RejectReason::IoCardinality => "io_cardinality",
            RejectReason::ArgMask => "arg_mask",
            RejectReason::OutOfRange => "out_of_range",
            RejectReason::Label => "label",
            RejectReason::UnknownCandidate => "unknown_candidate",
            RejectReason::PrecedenceUnobserved => "precedence_unobserved",
            RejectReason::UnknownPhase => "unknown_phase",
            RejectReason::PreconditionUnsatisfied => "precondition_unsatisfied",
            RejectReason::KeyMissing => "key_missing",
            RejectReason::NearDuplicate => "near_duplicate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub task_id: String,
    pub candidate_id: String,
    pub reason: RejectReason,
    pub detail: String,
}

/// A schema-checked synthetic row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRow {
    pub row: FeatureRow,
    pub preconditions: BTreeMap<String, bool>,
    /// False when `dep_pattern` or `phase` could not be derived.
    pub key_complete: bool,
}

/// What schema checks need from the real table: columns, observed numeric
/// ranges, and the real key of every (task, candidate).
#[derive(Debug, Clone)]
pub struct SchemaContext {
    pub columns: Vec<Column>,
    pub ranges: Vec<Option<(f64, f64)>>,
    pub real_keys: HashMap<(String, String), SchemaKey>,
}

impl SchemaContext {
    pub fn from_table(table: &FeatureTable) -> Self {
        let ranges = (0..table.columns.len())
            .map(|j| {
                if table.columns[j].value_type != ValueType::Number {
                    return None;
                }
                table
                    .rows
                    .iter()
                    .filter(|r| r.origin == Origin::Real)
                    .filter_map(|r| r.values[j].as_ref().and_then(FeatureValue::as_f64))
                    .fold(None, |acc: Option<(f64, f64)>, x| match acc {
                        None => Some((x, x)),
                        Some((lo, hi)) => Some((lo.min(x), hi.max(x))),
                    })
            })
            .collect();
        let real_keys = table
            .rows
            .iter()
            .filter(|r| r.origin == Origin::Real)
            .map(|r| ((r.task_id.clone(), r.candidate_id.clone()), r.key.clone()))
            .collect();
        SchemaContext {
            columns: table.columns.clone(),
            ranges,
            real_keys,
        }
    }
}

fn reject(raw: &RawSynthRow, reason: RejectReason, detail: impl Into<String>) -> Rejection {
    Rejection {
        task_id: raw.task_id.clone(),
        candidate_id: raw.candidate_id.clone(),
        reason,
        detail: detail.into(),
    }
}

fn as_u32(v: &serde_json::Value) -> Option<u32> {
    let x = v.as_f64()?;
    (x.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&x)).then_some(x as u32)
}

fn check_row(
    raw: &RawSynthRow,
    ctx: &SchemaContext,
    tool: &ToolSpec,
) -> Result<SynthRow, Rejection> {
    let f = &raw.fields;
    if let Some(v) = f.get("label") {
        if as_u32(v) != Some(1) {
            return Err(reject(raw, RejectReason::Label, format!("label {v}")));
        }
    }
    let expect_u32 = |name: &str, want: u32, reason: RejectReason| -> Result<u32, Rejection> {
        match f.get(name) {
            None => Ok(want),
            Some(v) => match as_u32(v) {
                None => Err(reject(raw, RejectReason::TypeMismatch, format!("{name}: {v}"))),
                Some(x) if x != want => Err(reject(raw, reason, format!("{name} {x}, catalog {want}"))),
                Some(x) => Ok(x),
            },
        }
    };
    let expect_str = |name: &str, want: &str, reason: RejectReason| -> Result<(), Rejection> {
        match f.get(name) {
            None => Ok(()),
            Some(serde_json::Value::String(s)) if s == want => Ok(()),
            Some(serde_json::Value::String(s)) => {
                Err(reject(raw, reason, format!("{name} `{s}`, catalog `{want}`")))
            }
            Some(v) => Err(reject(raw, RejectReason::TypeMismatch, format!("{name}: {v}"))),
        }
    };
    let opt_str = |name: &str| -> Result<Option<String>, Rejection> {
        match f.get(name) {
            None | Some(serde_json::Value::Null) => Ok(None),
            Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(reject(raw, RejectReason::TypeMismatch, format!("{name}: {v}"))),
        }
    };
    let tax_depth = expect_u32("tax_depth", tool.taxonomy_depth, RejectReason::Taxonomy)?;
    let api_arity = expect_u32("api_arity", tool.argument_schema.len() as u32, RejectReason::Arity)?;
    expect_str("io_cardinality", &tool.io_label(), RejectReason::IoCardinality)?;
    expect_str("arg_mask", &tool.arg_mask(), RejectReason::ArgMask)?;
    let real_key = ctx
        .real_keys
        .get(&(raw.task_id.clone(), raw.candidate_id.clone()));
    let dep_pattern = opt_str("dep_pattern")?.or_else(|| real_key.map(|k| k.dep_pattern.clone()));
    let phase = opt_str("phase")?.or_else(|| real_key.map(|k| k.phase.clone()));
    let key_complete = dep_pattern.is_some() && phase.is_some();

    let mut values = Vec::with_capacity(ctx.columns.len());
    for (j, c) in ctx.columns.iter().enumerate() {
        let Some(v) = f.get(&c.name).filter(|v| !v.is_null()) else {
            values.push(None);
            continue;
        };
        let value = match (c.value_type, v) {
            (ValueType::Number, serde_json::Value::Number(n)) => {
                FeatureValue::Number(n.as_f64().unwrap_or(f64::NAN))
            }
            (ValueType::Bool, serde_json::Value::Bool(b)) => FeatureValue::Bool(*b),
            (ValueType::Text, serde_json::Value::String(s)) => FeatureValue::Text(s.clone()),
            (ValueType::Text, v @ (serde_json::Value::Array(_) | serde_json::Value::Object(_))) => {
                FeatureValue::Text(v.to_string())
            }
            _ => {
                return Err(reject(
                    raw,
                    RejectReason::TypeMismatch,
                    format!("{}: expected {:?}, got {v}", c.name, c.value_type),
                ))
            }
        };
        if let (FeatureValue::Number(x), Some((lo, hi))) = (&value, ctx.ranges[j]) {
            if !(lo..=hi).contains(x) {
                return Err(reject(
                    raw,
                    RejectReason::OutOfRange,
                    format!("{} = {x} outside [{lo}, {hi}]", c.name),
                ));
            }
        }
        values.push(Some(value));
    }
    let mut preconditions = BTreeMap::new();
    for (flag, _) in PRECONDITION_FLAGS {
        match f.get(flag) {
            None => {}
            Some(serde_json::Value::Bool(b)) => {
                preconditions.insert(flag.to_string(), *b);
            }
            Some(v) => return Err(reject(raw, RejectReason::TypeMismatch, format!("{flag}: {v}"))),
        }
    }
    Ok(SynthRow {
        row: FeatureRow {
            task_id: raw.task_id.clone(),
            app: tool.app.clone(),
            candidate_id: tool.tool_id.clone(),
            key: SchemaKey {
                tax_depth,
                api_arity,
                arg_mask: tool.arg_mask(),
                io_cardinality: tool.io_label(),
                dep_pattern: dep_pattern.unwrap_or_default(),
                phase: phase.unwrap_or_default(),
            },
            values,
            candidate_text: tool.candidate_text(),
            label: 1,
            origin: Origin::Synthetic,
        },
        preconditions,
        key_complete,
    })
}

/// Keeps rows whose types, key fields and numeric ranges agree with the
/// catalog and the real table.
pub fn validate_schema(
    rows: &[RawSynthRow],
    ctx: &SchemaContext,
    catalogs: &Catalogs,
) -> (Vec<SynthRow>, Vec<Rejection>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for raw in rows {
        let tool = catalogs
            .get(&raw.app)
            .and_then(|c| c.get(&raw.candidate_id))
            .or_else(|| catalogs.values().find_map(|c| c.get(&raw.candidate_id)));
        let Some(tool) = tool else {
            rejected.push(reject(raw, RejectReason::UnknownCandidate, raw.candidate_id.clone()));
            continue;
        };
        match check_row(raw, ctx, tool) {
            Ok(r) => kept.push(r),
            Err(e) => rejected.push(e),
        }
    }
    (kept, rejected)
}

/// Ordered tool pairs `(a, b)` with `a` called before `b` in some trajectory,
/// closed under transitivity.
pub fn observed_precedence(slice: &[&Trajectory], index: &ToolIndex) -> BTreeSet<(String, String)> {
    let mut pairs = BTreeSet::new();
    for t in slice {
        let calls = tool_calls(t, t.steps.len(), index);
        for i in 0..calls.len() {
            for j in i + 1..calls.len() {
                pairs.insert((calls[i].clone(), calls[j].clone()));
            }
        }
    }
    loop {
        let mut added = Vec::new();
        for (a, b) in &pairs {
            for (c, d) in pairs.range((b.clone(), String::new())..) {
                if c != b {
                    break;
                }
                if !pairs.contains(&(a.clone(), d.clone())) {
                    added.push((a.clone(), d.clone()));
                }
            }
        }
        if added.is_empty() {
            return pairs;
        }
        pairs.extend(added);
    }
}

/// Rejects rows whose dependency pattern was never observed in the task's
/// trajectories, whose phase is not a step of them, or whose precondition
/// flags would keep the candidate from running.
pub fn validate_dependencies(
    rows: Vec<SynthRow>,
    slice: &[&Trajectory],
    index: &ToolIndex,
) -> (Vec<SynthRow>, Vec<Rejection>) {
    let pairs = observed_precedence(slice, index);
    let phases: BTreeSet<&str> = slice
        .iter()
        .flat_map(|t| t.steps.iter().map(|s| s.name.as_str()))
        .chain([crate::features::table::START])
        .collect();
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for r in rows {
        let rej = |reason, detail: String| Rejection {
            task_id: r.row.task_id.clone(),
            candidate_id: r.row.candidate_id.clone(),
            reason,
            detail,
        };
        if let Some((flag, _)) = PRECONDITION_FLAGS
            .iter()
            .find(|(flag, ok)| r.preconditions.get(*flag).is_some_and(|v| v != ok))
        {
            rejected.push(rej(
                RejectReason::PreconditionUnsatisfied,
                format!("{flag} contradicts the catalog"),
            ));
            continue;
        }
        let dep = &r.row.key.dep_pattern;
        if !dep.is_empty() {
            let ok = match dep.split_once('>') {
                Some((from, to)) => {
                    to == r.row.candidate_id
                        && (from == crate::features::table::START
                            || pairs.contains(&(from.to_string(), to.to_string())))
                }
                None => false,
            };
            if !ok {
                rejected.push(rej(RejectReason::PrecedenceUnobserved, dep.clone()));
                continue;
            }
        }
        let phase = &r.row.key.phase;
        if !phase.is_empty() && !phases.contains(phase.as_str()) {
            rejected.push(rej(RejectReason::UnknownPhase, phase.clone()));
            continue;
        }
        kept.push(r);
    }
    (kept, rejected)
}

/// Numeric standardization used by the near-duplicate test.
#[derive(Debug, Clone)]
pub struct DedupSpace {
    kinds: Vec<ColumnKind>,
    stats: Vec<(f64, f64)>,
}

impl DedupSpace {
    pub fn fit(columns: &[Column], real: &[FeatureRow]) -> Self {
        let table = FeatureTable {
            columns: columns.to_vec(),
            rows: Vec::new(),
        };
        let kinds: Vec<ColumnKind> = table.design_columns().into_iter().map(|c| c.kind).collect();
        let rows: Vec<_> = real.iter().map(FeatureRow::design_values).collect();
        let stats = (0..kinds.len())
            .map(|j| {
                let xs: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| r[j].as_ref().and_then(FeatureValue::as_f64))
                    .collect();
                if xs.is_empty() {
                    return (0.0, 1.0);
                }
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
                (m, if v > 0.0 { v.sqrt() } else { 1.0 })
            })
            .collect();
        DedupSpace { kinds, stats }
    }

    /// Sparse vector: one-hot per non-numeric cell (candidate text excluded),
    /// standardized value per numeric cell.
    pub fn vector(&self, row: &FeatureRow) -> BTreeMap<String, f64> {
        let vals = row.design_values();
        let last = vals.len() - 1;
        let mut v = BTreeMap::new();
        for (j, (kind, cell)) in self.kinds.iter().zip(&vals).enumerate() {
            if j == last {
                continue;
            }
            match (kind, cell) {
                (ColumnKind::Numeric, Some(x)) => {
                    if let Some(x) = x.as_f64() {
                        let (m, s) = self.stats[j];
                        v.insert(format!("{j}"), (x - m) / s);
                    }
                }
                (ColumnKind::Numeric, None) => {
                    v.insert(format!("{j}\u{1f}missing"), 1.0);
                }
                (_, cell) => {
                    let c = cell
                        .as_ref()
                        .map(FeatureValue::category)
                        .unwrap_or_else(|| crate::head::MISSING.into());
                    v.insert(format!("{j}\u{1f}{c}"), 1.0);
                }
            }
        }
        v
    }
}

pub fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

type Bucket = (u32, String, String, String);

fn bucket_of(r: &FeatureRow) -> Bucket {
    (
        r.key.tax_depth,
        r.key.arg_mask.clone(),
        r.key.dep_pattern.clone(),
        r.key.phase.clone(),
    )
}

/// Buckets rows on `(tax_depth, arg_mask, dep_pattern, phase)` and, within a
/// bucket, drops rows whose cosine similarity to a real row or an earlier
/// kept row reaches `threshold`. Rows are processed in order.
pub fn dedup_lsh(
    rows: Vec<SynthRow>,
    real: &[FeatureRow],
    space: &DedupSpace,
    threshold: f64,
) -> (Vec<SynthRow>, Vec<Rejection>) {
    let mut buckets: HashMap<Bucket, Vec<BTreeMap<String, f64>>> = HashMap::new();
    let wanted: BTreeSet<Bucket> = rows.iter().map(|r| bucket_of(&r.row)).collect();
    for r in real {
        let b = bucket_of(r);
        if wanted.contains(&b) {
            buckets.entry(b).or_default().push(space.vector(r));
        }
    }
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for r in rows {
        let rej = |reason, detail: &str| Rejection {
            task_id: r.row.task_id.clone(),
            candidate_id: r.row.candidate_id.clone(),
            reason,
            detail: detail.to_string(),
        };
        if !r.key_complete || r.row.key.dep_pattern.is_empty() || r.row.key.phase.is_empty() {
            rejected.push(rej(RejectReason::KeyMissing, "dep_pattern or phase underivable"));
            continue;
        }
        let v = space.vector(&r.row);
        let bucket = buckets.entry(bucket_of(&r.row)).or_default();
        if bucket.iter().any(|u| cosine(u, &v) >= threshold) {
            rejected.push(rej(RejectReason::NearDuplicate, "near duplicate"));
            continue;
        }
        bucket.push(v);
        kept.push(r);
    }
    (kept, rejected)
}
