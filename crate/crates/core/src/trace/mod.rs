//! Agent execution traces: parsing, label derivation, difficulty rules, and a
//! synthetic corpus generator.
//!
//! Trajectories are stored as JSONL (one record per line) or as a single JSON
//! array. A record looks like:
//!
//! ```json
//! {"task_id": "2c544f9_1", "intent": "Send $250 on venmo to Catherine.",
//!  "score": 1.0, "apps": ["phone", "venmo"],
//!  "steps": [{"name": "ShortlisterAgent",
//!             "prompts": [{"role": "system", "value": "..."},
//!                         {"role": "generation", "value": "..."}],
//!             "data": "[...]"}]}
//! ```
//!
//! `apps` and `tools_used` are optional. When `tools_used` is absent, a tool
//! counts as used when its id appears as a whole identifier in a generation of
//! a coder/execution step.

mod corpus;

pub use corpus::{generate_synthetic_corpus, lexical_overlap, AppSpec, CorpusSpec};

use serde::{Deserialize, Deserializer, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {index}: missing field `{field}`")]
    MissingField { index: usize, field: &'static str },
    #[error("record {index}: {message}")]
    Schema { index: usize, message: String },
    #[error("{path}: {message}")]
    Catalog { path: PathBuf, message: String },
    #[error("task {task_id}: tool `{tool_id}` is not in any catalog")]
    UnknownTool { task_id: String, tool_id: String },
    #[error("difficulty needs n_tools >= 1 and n_apps >= 1, got ({n_tools}, {n_apps})")]
    InvalidCounts { n_tools: usize, n_apps: usize },
    #[error("infeasible corpus spec: {0}")]
    InfeasibleCorpus(String),
    #[error("writing labels: {0}")]
    Csv(#[from] csv::Error),
}

/// Closed set of prompt roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Generation,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub name: String,
    pub prompts: Vec<Turn>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "opaque_payload"
    )]
    pub data: Option<String>,
}

impl Step {
    /// Value of the last `generation` turn, if any.
    pub fn generation(&self) -> Option<&str> {
        self.turn(Role::Generation)
    }

    /// Value of the last turn with the given role.
    pub fn turn(&self, role: Role) -> Option<&str> {
        self.prompts
            .iter()
            .rev()
            .find(|t| t.role == role)
            .map(|t| t.value.as_str())
    }

    pub fn is_execution(&self) -> bool {
        let name = self.name.to_ascii_lowercase();
        name.contains("coder") || name.contains("execut")
    }
}

/// Accepts either a string or any JSON value (stored as its compact rendering).
fn opaque_payload<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    let v = Option::<serde_json::Value>::deserialize(d)?;
    Ok(v.map(|v| match v {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub intent: String,
    pub score: f64,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub apps: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tools_used: Option<Vec<String>>,
}

impl Trajectory {
    pub fn is_successful(&self) -> bool {
        self.score == 1.0
    }

    /// Index of the decision point for `target`: its last occurrence.
    pub fn target_index(&self, target: &str) -> Option<usize> {
        self.steps.iter().rposition(|s| s.name == target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArgType {
    String,
    Integer,
    Real,
    Boolean,
    Enum,
    Object,
    List,
}

impl fmt::Display for ArgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("enum serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub arg_type: ArgType,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub tool_id: String,
    #[serde(default, skip_serializing)]
    pub app: String,
    pub description: String,
    #[serde(default, rename = "args")]
    pub argument_schema: Vec<ArgSpec>,
    #[serde(default)]
    pub taxonomy_depth: u32,
    /// (inputs, outputs)
    #[serde(default, rename = "io")]
    pub io_cardinality: (u32, u32),
}

impl ToolSpec {
    /// Name, description, and argument hints joined into one string.
    pub fn candidate_text(&self) -> String {
        let args: Vec<String> = self
            .argument_schema
            .iter()
            .map(|a| {
                format!(
                    "{}{}:{}",
                    a.name,
                    if a.required { "" } else { "?" },
                    a.arg_type
                )
            })
            .collect();
        format!("{} | {} | args: {}", self.tool_id, self.description, args.join(", "))
    }

    /// Canonical argument signature, e.g. `string!,integer?`.
    pub fn arg_mask(&self) -> String {
        let parts: Vec<String> = self
            .argument_schema
            .iter()
            .map(|a| format!("{}{}", a.arg_type, if a.required { "!" } else { "?" }))
            .collect();
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join(",")
        }
    }

    pub fn io_label(&self) -> String {
        format!("{}:{}", self.io_cardinality.0, self.io_cardinality.1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ToolCatalog {
    pub app: String,
    pub tools: Vec<ToolSpec>,
}

impl ToolCatalog {
    /// Validates tool id uniqueness and stamps each tool with the app.
    pub fn new(app: impl Into<String>, mut tools: Vec<ToolSpec>) -> Result<Self, String> {
        let app = app.into();
        let mut seen = BTreeSet::new();
        for t in &mut tools {
            if !seen.insert(t.tool_id.clone()) {
                return Err(format!("duplicate tool_id `{}` in catalog `{app}`", t.tool_id));
            }
            t.app = app.clone();
        }
        Ok(ToolCatalog { app, tools })
    }

    pub fn get(&self, tool_id: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.tool_id == tool_id)
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }
}

impl<'de> Deserialize<'de> for ToolCatalog {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            app: String,
            tools: Vec<ToolSpec>,
        }
        let raw = Raw::deserialize(d)?;
        ToolCatalog::new(raw.app, raw.tools).map_err(serde::de::Error::custom)
    }
}

/// Catalogs keyed by app.
pub type Catalogs = BTreeMap<String, ToolCatalog>;

/// Reads one catalog file (an object or an array of objects) or a directory of
/// `*.json` catalog files.
pub fn load_catalogs(path: &Path) -> Result<Catalogs, TraceError> {
    let io = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(io)? {
            let p = entry.map_err(io)?.path();
            if p.extension().is_some_and(|e| e == "json") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut out = Catalogs::new();
    for file in files {
        let text = fs::read_to_string(&file).map_err(|source| TraceError::Io {
            path: file.clone(),
            source,
        })?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| TraceError::Catalog {
                path: file.clone(),
                message: e.to_string(),
            })?;
        let items = match value {
            serde_json::Value::Array(items) => items,
            other => vec![other],
        };
        for item in items {
            let cat: ToolCatalog =
                serde_json::from_value(item).map_err(|e| TraceError::Catalog {
                    path: file.clone(),
                    message: e.to_string(),
                })?;
            if out.contains_key(&cat.app) {
                return Err(TraceError::Catalog {
                    path: file.clone(),
                    message: format!("catalog for app `{}` defined twice", cat.app),
                });
            }
            out.insert(cat.app.clone(), cat);
        }
    }
    Ok(out)
}

pub fn write_catalogs(dir: &Path, catalogs: &Catalogs) -> Result<(), TraceError> {
    fs::create_dir_all(dir).map_err(|source| TraceError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for cat in catalogs.values() {
        let path = dir.join(format!("{}.json", cat.app));
        let text = serde_json::to_string_pretty(cat).expect("catalog serializes");
        fs::write(&path, text + "\n").map_err(|source| TraceError::Io { path, source })?;
    }
    Ok(())
}

/// Lookup from tool id to owning app across all catalogs.
#[derive(Debug, Clone, Default)]
pub struct ToolIndex {
    owner: HashMap<String, String>,
}

impl ToolIndex {
    pub fn new(catalogs: &Catalogs) -> Self {
        let mut owner = HashMap::new();
        for cat in catalogs.values() {
            for t in &cat.tools {
                owner
                    .entry(t.tool_id.clone())
                    .or_insert_with(|| cat.app.clone());
            }
        }
        ToolIndex { owner }
    }

    pub fn app_of(&self, tool_id: &str) -> Option<&str> {
        self.owner.get(tool_id).map(String::as_str)
    }

    pub fn contains(&self, tool_id: &str) -> bool {
        self.owner.contains_key(tool_id)
    }
}

/// A record that was skipped during lenient parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub trajectories: Vec<Trajectory>,
    pub skipped: Vec<SkippedRecord>,
}

const REQUIRED_FIELDS: [&str; 4] = ["task_id", "intent", "steps", "score"];

/// Parses a JSONL or JSON-array trajectory file.
///
/// In strict mode the first malformed record aborts with its index; otherwise
/// it is skipped and reported in [`ParseOutcome::skipped`].
pub fn parse_trajectories(path: &Path, strict: bool) -> Result<ParseOutcome, TraceError> {
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trajectories_str(&text, strict)
}

pub fn parse_trajectories_str(text: &str, strict: bool) -> Result<ParseOutcome, TraceError> {
    let trimmed = text.trim_start();
    let records: Vec<Result<serde_json::Value, String>> = if trimmed.starts_with('[') {
        match serde_json::from_str::<Vec<serde_json::Value>>(trimmed) {
            Ok(v) => v.into_iter().map(Ok).collect(),
            Err(e) => {
                return Err(TraceError::Schema {
                    index: 0,
                    message: format!("invalid JSON array: {e}"),
                })
            }
        }
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| format!("invalid JSON: {e}")))
            .collect()
    };

    let mut out = ParseOutcome::default();
    for (index, record) in records.into_iter().enumerate() {
        match record.map_err(|m| TraceError::Schema { index, message: m })
            .and_then(|v| check_record(index, v))
        {
            Ok(t) => out.trajectories.push(t),
            Err(e) if strict => return Err(e),
            Err(e) => {
                log::warn!("skipping trajectory: {e}");
                out.skipped.push(SkippedRecord {
                    index,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

fn check_record(index: usize, value: serde_json::Value) -> Result<Trajectory, TraceError> {
    let obj = value.as_object().ok_or_else(|| TraceError::Schema {
        index,
        message: "record is not a JSON object".into(),
    })?;
    if let Some(field) = REQUIRED_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
        return Err(TraceError::MissingField { index, field });
    }
    let t: Trajectory = serde_json::from_value(value).map_err(|e| TraceError::Schema {
        index,
        message: e.to_string(),
    })?;
    if t.steps.is_empty() {
        return Err(TraceError::Schema {
            index,
            message: "steps is empty".into(),
        });
    }
    if !(0.0..=1.0).contains(&t.score) {
        return Err(TraceError::Schema {
            index,
            message: format!("score {} outside [0, 1]", t.score),
        });
    }
    Ok(t)
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), TraceError> {
    let io = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for t in trajectories {
        let line = serde_json::to_string(t).expect("trajectory serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Tools used by a trajectory, in order of first appearance.
///
/// Uses the explicit `tools_used` field when present; otherwise scans
/// generations of coder/execution steps for whole-identifier matches of known
/// tool ids.
pub fn tools_used(trajectory: &Trajectory, index: &ToolIndex) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    if let Some(explicit) = &trajectory.tools_used {
        for t in explicit {
            if seen.insert(t.clone()) {
                out.push(t.clone());
            }
        }
        return out;
    }
    for step in trajectory.steps.iter().filter(|s| s.is_execution()) {
        for turn in step.prompts.iter().filter(|t| t.role == Role::Generation) {
            for ident in identifiers(&turn.value) {
                if index.contains(ident) && seen.insert(ident.to_string()) {
                    out.push(ident.to_string());
                }
            }
        }
    }
    out
}

/// Tools used within `steps[..end]` (same extraction rule as [`tools_used`]
/// minus the explicit field, which carries no position).
pub fn tools_used_before(trajectory: &Trajectory, end: usize, index: &ToolIndex) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for step in trajectory.steps[..end.min(trajectory.steps.len())]
        .iter()
        .filter(|s| s.is_execution())
    {
        for turn in step.prompts.iter().filter(|t| t.role == Role::Generation) {
            for ident in identifiers(&turn.value) {
                if index.contains(ident) && seen.insert(ident.to_string()) {
                    out.push(ident.to_string());
                }
            }
        }
    }
    out
}

/// Every tool invocation in coder/execution steps of `steps[..end]`, in
/// order, repeats included. Falls back to the explicit `tools_used` list when
/// scanning finds nothing.
pub fn tool_calls(trajectory: &Trajectory, end: usize, index: &ToolIndex) -> Vec<String> {
    let mut out = Vec::new();
    for step in trajectory.steps[..end.min(trajectory.steps.len())]
        .iter()
        .filter(|s| s.is_execution())
    {
        for turn in step.prompts.iter().filter(|t| t.role == Role::Generation) {
            out.extend(
                identifiers(&turn.value)
                    .filter(|i| index.contains(i))
                    .map(str::to_string),
            );
        }
    }
    if out.is_empty() && end >= trajectory.steps.len() {
        if let Some(explicit) = &trajectory.tools_used {
            return explicit.clone();
        }
    }
    out
}

/// Maximal runs of `[A-Za-z0-9_]`.
pub fn identifiers(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Medium => "Medium",
            Difficulty::Hard => "Hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hard is checked first (`>= 8` tools or `>= 3` apps), then Easy (`<= 3`
/// tools in a single app); everything else is Medium.
pub fn classify_difficulty(n_tools: usize, n_apps: usize) -> Result<Difficulty, TraceError> {
    if n_tools == 0 || n_apps == 0 {
        return Err(TraceError::InvalidCounts { n_tools, n_apps });
    }
    Ok(if n_tools >= 8 || n_apps >= 3 {
        Difficulty::Hard
    } else if n_tools <= 3 && n_apps == 1 {
        Difficulty::Easy
    } else {
        Difficulty::Medium
    })
}

/// Supervision derived from one successful trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTask {
    pub task_id: String,
    pub app: String,
    pub intent: String,
    /// Relevant tools `G(t)`, in order of first use.
    pub relevant_tools: Vec<String>,
    pub difficulty: Difficulty,
    pub app_set: BTreeSet<String>,
}

impl LabeledTask {
    /// `R_t = |G(t)|`.
    pub fn r(&self) -> usize {
        self.relevant_tools.len()
    }

    pub fn is_relevant(&self, tool_id: &str) -> bool {
        self.relevant_tools.iter().any(|t| t == tool_id)
    }
}

/// One labeled task per successful trajectory; unsuccessful ones are dropped.
///
/// Successful trajectories in which no catalog tool is found are dropped with
/// a warning, so no returned task has an empty relevant set.
pub fn derive_labels(
    trajectories: &[Trajectory],
    catalogs: &Catalogs,
) -> Result<Vec<LabeledTask>, TraceError> {
    let index = ToolIndex::new(catalogs);
    let mut out = Vec::new();
    for t in trajectories.iter().filter(|t| t.is_successful()) {
        let used = tools_used(t, &index);
        let mut per_app: BTreeMap<&str, usize> = BTreeMap::new();
        for tool in &used {
            let app = index.app_of(tool).ok_or_else(|| TraceError::UnknownTool {
                task_id: t.task_id.clone(),
                tool_id: tool.clone(),
            })?;
            *per_app.entry(app).or_default() += 1;
        }
        if used.is_empty() {
            log::warn!("task {}: successful but no catalog tool found; skipped", t.task_id);
            continue;
        }
        let mut app_set: BTreeSet<String> = t.apps.clone();
        app_set.extend(per_app.keys().map(|a| a.to_string()));
        // Majority owner of G; BTreeMap order breaks ties lexicographically.
        let app = per_app
            .iter()
            .fold(None::<(&str, usize)>, |best, (a, n)| match best {
                Some((_, m)) if m >= *n => best,
                _ => Some((a, *n)),
            })
            .map(|(a, _)| a.to_string())
            .expect("used is non-empty");
        let difficulty = classify_difficulty(used.len(), app_set.len())?;
        out.push(LabeledTask {
            task_id: t.task_id.clone(),
            app,
            intent: t.intent.clone(),
            relevant_tools: used,
            difficulty,
            app_set,
        });
    }
    Ok(out)
}

/// Writes `task_id, app_name, n_tools, difficulty, tool_1..tool_N`.
pub fn write_labels_csv(path: &Path, tasks: &[LabeledTask]) -> Result<(), TraceError> {
    let width = tasks.iter().map(LabeledTask::r).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "task_id".to_string(),
        "app_name".into(),
        "n_tools".into(),
        "difficulty".into(),
    ];
    header.extend((1..=width).map(|i| format!("tool_{i}")));
    w.write_record(&header)?;
    for t in tasks {
        let mut rec = vec![
            t.task_id.clone(),
            t.app.clone(),
            t.r().to_string(),
            t.difficulty.to_string(),
        ];
        rec.extend((0..width).map(|i| t.relevant_tools.get(i).cloned().unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| TraceError::Csv(e.into()))?;
    Ok(())
}

/// Share of each difficulty level, in `Difficulty::ALL` order.
pub fn difficulty_shares(tasks: &[LabeledTask]) -> [f64; 3] {
    let mut counts = [0usize; 3];
    for t in tasks {
        counts[t.difficulty as usize] += 1;
    }
    let n = tasks.len().max(1) as f64;
    counts.map(|c| c as f64 / n)
}

/// A four-step successful record in the trajectory format.
pub const SAMPLE_RECORD: &str = r#"{"intent": "Send $250 on venmo to Catherine.", "task_id": "2c544f9_1", "steps": [
  {"name": "TaskAnalyzerAgent", "prompts": [
    {"role": "system", "value": "System: You are an AI assistant [...] determine which applications are required"},
    {"role": "generation", "value": "{\"thoughts\":[\"The user's intent is to send $250 to Catherine via Venmo.\"], \"relevant_apps\":[\"phone\",\"venmo\"]}"}]},
  {"name": "TaskDecompositionAgent", "prompts": [
    {"role": "system", "value": "System: You are an expert in **task decomposition**."},
    {"role": "generation", "value": "{\"thoughts\":\"The user's intent is to send $250 to Catherine via Venmo.\"}"}]},
  {"name": "PlanControllerAgent", "prompts": [
    {"role": "system", "value": "System: As a plan controller agent"},
    {"role": "generation", "value": "{\"thoughts\": [], \"next_subtask\":\"Search for Catherine's contact information\", \"next_subtask_app\": \"phone\"}"}]},
  {"name": "ShortlisterAgent", "prompts": [
    {"role": "system", "value": "System: You are an expert AI assistant responsible for selecting relevant APIs"},
    {"role": "generation", "value": "{\"thoughts\":[\"The most direct API for searching contacts by name is 'phone_search_contacts_contacts_get'.\"]}"}],
   "data": "[...]"}
], "score": 1.0}"#;

#[cfg(test)]
mod tests {
    use super::*;



    fn catalogs() -> Catalogs {
        let amazon = ToolCatalog::new(
            "amazon",
            ["show_orders", "initiate_return", "show_cart"]
                .iter()
                .map(|id| ToolSpec {
                    tool_id: id.to_string(),
                    app: String::new(),
                    description: format!("{id} tool"),
                    argument_schema: vec![],
                    taxonomy_depth: 1,
                    io_cardinality: (1, 1),
                })
                .collect(),
        )
        .unwrap();
        Catalogs::from([("amazon".to_string(), amazon)])
    }

    fn coder_trace(score: f64, code: &str) -> Trajectory {
        Trajectory {
            task_id: "t1".into(),
            intent: "return my order".into(),
            score,
            steps: vec![Step {
                name: "CoderAgent".into(),
                prompts: vec![Turn {
                    role: Role::Generation,
                    value: code.into(),
                }],
                data: None,
            }],
            apps: BTreeSet::new(),
            tools_used: None,
        }
    }

    #[test]
    fn parses_sample_record() {
        let out = parse_trajectories_str(&SAMPLE_RECORD.replace('\n', " "), true).unwrap();
        let t = &out.trajectories[0];
        assert_eq!(t.task_id, "2c544f9_1");
        assert_eq!(t.intent, "Send $250 on venmo to Catherine.");
        assert_eq!(t.score, 1.0);
        let names: Vec<&str> = t.steps.iter().map(|s| s.name.as_str()).collect();
        assert!(names.contains(&"TaskAnalyzerAgent") && names.contains(&"ShortlisterAgent"));
        assert_eq!(t.steps[3].data.as_deref(), Some("[...]"));
    }

    #[test]
    fn parses_json_array_form() {
        let text = format!("[{SAMPLE_RECORD}, {SAMPLE_RECORD}]");
        assert_eq!(parse_trajectories_str(&text, true).unwrap().trajectories.len(), 2);
    }

    #[test]
    fn empty_input_is_empty() {
        let out = parse_trajectories_str("", true).unwrap();
        assert!(out.trajectories.is_empty() && out.skipped.is_empty());
    }

    #[test]
    fn missing_score_is_skipped_or_fatal() {
        let mut v: serde_json::Value =
            serde_json::from_str(&SAMPLE_RECORD.replace('\n', " ")).unwrap();
        v.as_object_mut().unwrap().remove("score");
        let good = SAMPLE_RECORD.replace('\n', " ");
        let text = format!("{good}\n{v}\n");
        let lenient = parse_trajectories_str(&text, false).unwrap();
        assert_eq!(lenient.trajectories.len(), 1);
        assert_eq!(lenient.skipped.len(), 1);
        assert_eq!(lenient.skipped[0].index, 1);
        match parse_trajectories_str(&text, true) {
            Err(TraceError::MissingField { index: 1, field: "score" }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_role_is_rejected() {
        let bad = SAMPLE_RECORD.replace('\n', " ").replacen("\"system\"", "\"tool\"", 1);
        assert!(matches!(
            parse_trajectories_str(&bad, true),
            Err(TraceError::Schema { index: 0, .. })
        ));
    }

    #[test]
    fn labels_from_coder_generations() {
        let t = coder_trace(
            1.0,
            "orders = show_orders(page=1)\ninitiate_return(order_id=orders[0])\nx = show_orders_v2()",
        );
        let labels = derive_labels(&[t], &catalogs()).unwrap();
        assert_eq!(labels.len(), 1);
        let g: BTreeSet<_> = labels[0].relevant_tools.iter().cloned().collect();
        assert_eq!(
            g,
            BTreeSet::from(["show_orders".to_string(), "initiate_return".to_string()])
        );
        assert_eq!(labels[0].r(), 2);
        assert_eq!(labels[0].app, "amazon");
        assert_eq!(labels[0].difficulty, Difficulty::Easy);
    }

    #[test]
    fn failed_trajectories_yield_no_labels() {
        let t = coder_trace(0.0, "show_orders()");
        assert!(derive_labels(&[t], &catalogs()).unwrap().is_empty());
    }

    #[test]
    fn explicit_unknown_tool_is_an_error() {
        let mut t = coder_trace(1.0, "");
        t.tools_used = Some(vec!["show_orders".into(), "teleport".into()]);
        match derive_labels(&[t], &catalogs()) {
            Err(TraceError::UnknownTool { tool_id, task_id }) => {
                assert_eq!((tool_id.as_str(), task_id.as_str()), ("teleport", "t1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn difficulty_rules() {
        use Difficulty::*;
        assert_eq!(classify_difficulty(2, 1).unwrap(), Easy);
        assert_eq!(classify_difficulty(5, 1).unwrap(), Medium);
        assert_eq!(classify_difficulty(8, 1).unwrap(), Hard);
        assert_eq!(classify_difficulty(2, 3).unwrap(), Hard);
        assert_eq!(classify_difficulty(4, 1).unwrap(), Medium);
        assert_eq!(classify_difficulty(2, 2).unwrap(), Medium);
        assert!(classify_difficulty(0, 1).is_err());
        assert!(classify_difficulty(1, 0).is_err());
    }

    #[test]
    fn difficulty_partition_matches_rule_text() {
        // Each (tools, apps) pair gets exactly one label; check it against the
        // three rule predicates read in priority order.
        for n_tools in 1..=20 {
            for n_apps in 1..=5 {
                let hard = n_tools >= 8 || n_apps >= 3;
                let easy = n_tools <= 3 && n_apps == 1;
                let medium = (4..=7).contains(&n_tools) || n_apps == 2;
                let expected = if hard {
                    Difficulty::Hard
                } else if easy {
                    Difficulty::Easy
                } else {
                    assert!(medium, "({n_tools}, {n_apps}) fits no rule");
                    Difficulty::Medium
                };
                assert_eq!(classify_difficulty(n_tools, n_apps).unwrap(), expected);
            }
        }
    }

    #[test]
    fn trajectory_round_trip() {
        let t = parse_trajectories_str(&SAMPLE_RECORD.replace('\n', " "), true)
            .unwrap()
            .trajectories;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_trajectories(&path, &t).unwrap();
        assert_eq!(parse_trajectories(&path, true).unwrap().trajectories, t);
    }

    #[test]
    fn labels_csv_is_sparse() {
        let tasks = vec![
            LabeledTask {
                task_id: "a".into(),
                app: "amazon".into(),
                intent: String::new(),
                relevant_tools: vec!["x".into(), "y".into()],
                difficulty: Difficulty::Easy,
                app_set: BTreeSet::from(["amazon".to_string()]),
            },
            LabeledTask {
                task_id: "b".into(),
                app: "amazon".into(),
                intent: String::new(),
                relevant_tools: vec!["x".into()],
                difficulty: Difficulty::Easy,
                app_set: BTreeSet::from(["amazon".to_string()]),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        write_labels_csv(&path, &tasks).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(
            text,
            "task_id,app_name,n_tools,difficulty,tool_1,tool_2\na,amazon,2,Easy,x,y\nb,amazon,1,Easy,x,\n"
        );
    }

    #[test]
    fn catalog_rejects_duplicates() {
        let json = r#"{"app": "a", "tools": [
            {"tool_id": "x", "description": "d", "args": [], "taxonomy_depth": 1, "io": [1, 1]},
            {"tool_id": "x", "description": "d", "args": [], "taxonomy_depth": 1, "io": [1, 1]}]}"#;
        assert!(serde_json::from_str::<ToolCatalog>(json).is_err());
    }

    #[test]
    fn candidate_text_has_args() {
        let t = ToolSpec {
            tool_id: "amazon_show_orders".into(),
            app: "amazon".into(),
            description: "List recent orders".into(),
            argument_schema: vec![
                ArgSpec {
                    name: "page".into(),
                    arg_type: ArgType::Integer,
                    required: false,
                },
                ArgSpec {
                    name: "token".into(),
                    arg_type: ArgType::String,
                    required: true,
                },
            ],
            taxonomy_depth: 2,
            io_cardinality: (2, 1),
        };
        assert_eq!(
            t.candidate_text(),
            "amazon_show_orders | List recent orders | args: page?:integer, token:string"
        );
        assert_eq!(t.arg_mask(), "integer?,string!");
    }
}
