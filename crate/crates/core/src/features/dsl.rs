//! Extractor programs: a closed, straight-line instruction set evaluated
//! against the part of a trajectory that precedes the decision step.
//!
//! A program is a source instruction followed by zero or more transforms:
//!
//! ```json
//! {"ops": [{"op": "read_field", "path": "prev[1].generation.thoughts"},
//!          {"op": "truncate", "max_tokens": 8}]}
//! ```
//!
//! Field paths start at one of `intent`, `task_id`, `apps`, `prev[k]` (the
//! k-th step before the decision step, `k >= 1`) or `agent[Name]` (the last
//! step named `Name` before the decision step). Step roots take one accessor:
//! `.name`, `.data`, `.system`, `.user`, `.generation`, or
//! `.generation.<key>[.<key>...]` to read inside a JSON generation. Paths that
//! could reach the decision step or anything after it (`target`, `next[..]`,
//! `prev[0]`, absolute `steps[i]`, the outcome `score`) are rejected before
//! the program runs.

use crate::text::truncate_tokens;
use crate::trace::{identifiers, Role, Step, ToolIndex, Trajectory};
use crate::value::FeatureValue;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Upper bound on free-text snippets.
pub const MAX_SNIPPET_TOKENS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    ReadField {
        path: String,
    },
    StepIndex {
        agent: String,
    },
    AgentVisited {
        agent: String,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        negate: bool,
    },
    LastStatus,
    CoUsageCount {
        window: usize,
    },
    RegexCapture {
        pattern: String,
        #[serde(default = "default_group")]
        group: usize,
    },
    TokenCount,
    Truncate {
        max_tokens: usize,
    },
}

fn default_group() -> usize {
    1
}

impl Op {
    fn is_source(&self) -> bool {
        matches!(
            self,
            Op::ReadField { .. }
                | Op::StepIndex { .. }
                | Op::AgentVisited { .. }
                | Op::LastStatus
                | Op::CoUsageCount { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractorProgram {
    pub ops: Vec<Op>,
}

impl ExtractorProgram {
    pub fn new(ops: Vec<Op>) -> Self {
        ExtractorProgram { ops }
    }

    /// Accepts `{"ops": [...]}`, `{"program": {"ops": [...]}}`, or a bare
    /// array of instructions.
    pub fn from_json(value: &serde_json::Value) -> Result<Self, String> {
        let v = value.get("program").unwrap_or(value);
        let ops = if v.is_array() { v } else { v.get("ops").unwrap_or(v) };
        serde_json::from_value::<Vec<Op>>(ops.clone())
            .map(ExtractorProgram::new)
            .map_err(|e| format!("invalid extractor program: {e}"))
    }

    /// True when the value depends on which candidate is being scored.
    pub fn is_candidate_conditioned(&self) -> bool {
        self.ops.iter().any(|op| matches!(op, Op::CoUsageCount { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DslError {
    #[error("leakage: {0}")]
    Leakage(String),
    #[error("out-of-schema access: {0}")]
    OutOfSchema(String),
    #[error("ill-formed program: {0}")]
    Arity(String),
    #[error("type error: {0}")]
    Type(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Static value types; `Any` is a JSON read whose type is known only at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaticType {
    Text,
    Number,
    Bool,
    Any,
}

impl fmt::Display for StaticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StaticType::Text => "text",
            StaticType::Number => "number",
            StaticType::Bool => "bool",
            StaticType::Any => "any",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Root {
    Intent,
    TaskId,
    Apps,
    Prev(usize),
    Agent(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Accessor {
    None,
    Name,
    Data,
    System,
    User,
    Generation(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FieldPath {
    root: Root,
    accessor: Accessor,
}

fn bracket<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    s.strip_prefix(prefix)?.strip_prefix('[')?.strip_suffix(']')
}

fn parse_path(path: &str) -> Result<FieldPath, DslError> {
    let path = path.trim();
    // Agent names may not contain ']' so the root ends at the first "]." or
    // at the first '.' for bare roots.
    let (root_str, rest) = if path.contains('[') {
        match path.find(']') {
            Some(i) => (&path[..=i], path[i + 1..].strip_prefix('.').unwrap_or(&path[i + 1..])),
            None => return Err(DslError::OutOfSchema(format!("unterminated `[` in `{path}`"))),
        }
    } else {
        match path.split_once('.') {
            Some((a, b)) => (a, b),
            None => (path, ""),
        }
    };
    let leak = |what: &str| Err(DslError::Leakage(format!("`{path}` {what}")));
    let root = match root_str {
        "intent" => Root::Intent,
        "task_id" => Root::TaskId,
        "apps" => Root::Apps,
        "target" => return leak("reads the decision step"),
        "score" => return leak("reads the task outcome"),
        s if s.starts_with("next[") => return leak("reads steps after the decision step"),
        s if s.starts_with("steps[") => {
            return leak("uses an absolute step index that may reach the decision step")
        }
        s if s.starts_with("prev[") => {
            let k: usize = bracket(s, "prev")
                .and_then(|k| k.trim().parse().ok())
                .ok_or_else(|| DslError::OutOfSchema(format!("bad step offset in `{path}`")))?;
            if k == 0 {
                return leak("reads the decision step (prev[0])");
            }
            Root::Prev(k)
        }
        s if s.starts_with("agent[") => {
            let name = bracket(s, "agent")
                .map(|n| n.trim().trim_matches(|c| c == '"' || c == '\''))
                .filter(|n| !n.is_empty())
                .ok_or_else(|| DslError::OutOfSchema(format!("bad agent name in `{path}`")))?;
            Root::Agent(name.to_string())
        }
        other => {
            return Err(DslError::OutOfSchema(format!(
                "unknown root `{other}` in `{path}`"
            )))
        }
    };
    let is_step = matches!(root, Root::Prev(_) | Root::Agent(_));
    let accessor = if rest.is_empty() {
        if is_step {
            return Err(DslError::OutOfSchema(format!(
                "`{path}` needs a step accessor (.name, .data, .system, .user, .generation)"
            )));
        }
        Accessor::None
    } else {
        if !is_step {
            return Err(DslError::OutOfSchema(format!("`{root_str}` has no field `{rest}`")));
        }
        let mut parts = rest.split('.');
        match parts.next().unwrap_or_default() {
            "name" => Accessor::Name,
            "data" => Accessor::Data,
            "system" => Accessor::System,
            "user" => Accessor::User,
            "generation" => {
                let keys: Vec<String> = parts.by_ref().map(str::to_string).collect();
                if keys.iter().any(String::is_empty) {
                    return Err(DslError::OutOfSchema(format!("empty key in `{path}`")));
                }
                Accessor::Generation(keys)
            }
            other => {
                return Err(DslError::OutOfSchema(format!(
                    "steps have no field `{other}` (in `{path}`)"
                )))
            }
        }
    };
    if !matches!(accessor, Accessor::Generation(_)) && rest.split('.').count() > 1 {
        return Err(DslError::OutOfSchema(format!("`{path}` indexes into a string field")));
    }
    Ok(FieldPath { root, accessor })
}

/// Checks instruction arity, types, arguments, and the before-the-decision
/// rule. Returns the static output type.
pub fn check_program(program: &ExtractorProgram) -> Result<StaticType, DslError> {
    let (first, rest) = program
        .ops
        .split_first()
        .ok_or_else(|| DslError::Arity("program has no instructions".into()))?;
    if !first.is_source() {
        return Err(DslError::Arity(format!(
            "first instruction must read the trajectory, found {first:?}"
        )));
    }
    let mut ty = match first {
        Op::ReadField { path } => match parse_path(path)?.accessor {
            Accessor::Generation(keys) if !keys.is_empty() => StaticType::Any,
            _ => StaticType::Text,
        },
        Op::StepIndex { .. } => StaticType::Number,
        Op::AgentVisited { .. } => StaticType::Bool,
        Op::LastStatus => StaticType::Text,
        Op::CoUsageCount { window } => {
            if *window == 0 {
                return Err(DslError::Argument("co_usage_count window must be >= 1".into()));
            }
            StaticType::Number
        }
        _ => unreachable!("checked is_source"),
    };
    for op in rest {
        if op.is_source() {
            return Err(DslError::Arity(format!(
                "{op:?} takes no input but appears after the first instruction"
            )));
        }
        if !matches!(ty, StaticType::Text | StaticType::Any) {
            return Err(DslError::Type(format!("{op:?} expects text, got {ty}")));
        }
        ty = match op {
            Op::RegexCapture { pattern, group } => {
                let re = regex::Regex::new(pattern)
                    .map_err(|e| DslError::Argument(format!("regex `{pattern}`: {e}")))?;
                if *group >= re.captures_len() {
                    return Err(DslError::Argument(format!(
                        "regex `{pattern}` has no group {group}"
                    )));
                }
                StaticType::Text
            }
            Op::TokenCount => StaticType::Number,
            Op::Truncate { max_tokens } => {
                if *max_tokens == 0 || *max_tokens > MAX_SNIPPET_TOKENS {
                    return Err(DslError::Argument(format!(
                        "truncate max_tokens must be in 1..={MAX_SNIPPET_TOKENS}"
                    )));
                }
                StaticType::Text
            }
            _ => unreachable!("sources handled above"),
        };
    }
    Ok(ty)
}

/// What a program may see: the trajectory up to (not including) `target_index`.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub trajectory: &'a Trajectory,
    pub target_index: usize,
    pub candidate: Option<&'a str>,
    pub tools: Option<&'a ToolIndex>,
}

impl<'a> EvalContext<'a> {
    fn visible(&self) -> &'a [Step] {
        &self.trajectory.steps[..self.target_index.min(self.trajectory.steps.len())]
    }

    fn last_named(&self, agent: &str) -> Option<(usize, &'a Step)> {
        self.visible()
            .iter()
            .enumerate()
            .rev()
            .find(|(_, s)| s.name == agent)
    }
}

fn json_to_value(v: &serde_json::Value) -> Option<FeatureValue> {
    match v {
        serde_json::Value::Array(items) if items.iter().all(|i| i.is_string()) => Some(
            FeatureValue::Text(
                items
                    .iter()
                    .filter_map(|i| i.as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
        ),
        other => FeatureValue::from_json(other),
    }
}

fn read_field(path: &FieldPath, ctx: &EvalContext<'_>) -> Result<FeatureValue, String> {
    let t = ctx.trajectory;
    let step = match &path.root {
        Root::Intent => return Ok(FeatureValue::Text(t.intent.clone())),
        Root::TaskId => return Ok(FeatureValue::Text(t.task_id.clone())),
        Root::Apps => {
            return Ok(FeatureValue::Text(
                t.apps.iter().cloned().collect::<Vec<_>>().join(","),
            ))
        }
        Root::Prev(k) => {
            let i = ctx
                .target_index
                .checked_sub(*k)
                .ok_or_else(|| format!("prev[{k}] is before the first step"))?;
            &t.steps[i]
        }
        Root::Agent(name) => {
            ctx.last_named(name)
                .ok_or_else(|| format!("no `{name}` step before the decision step"))?
                .1
        }
    };
    let text = |role: Role, what: &str| {
        step.turn(role)
            .map(|s| FeatureValue::Text(s.to_string()))
            .ok_or_else(|| format!("step `{}` has no {what} turn", step.name))
    };
    match &path.accessor {
        Accessor::None => unreachable!("step roots always carry an accessor"),
        Accessor::Name => Ok(FeatureValue::Text(step.name.clone())),
        Accessor::Data => step
            .data
            .clone()
            .map(FeatureValue::Text)
            .ok_or_else(|| format!("step `{}` has no data", step.name)),
        Accessor::System => text(Role::System, "system"),
        Accessor::User => text(Role::User, "user"),
        Accessor::Generation(keys) if keys.is_empty() => text(Role::Generation, "generation"),
        Accessor::Generation(keys) => {
            let raw = step
                .generation()
                .ok_or_else(|| format!("step `{}` has no generation turn", step.name))?;
            let mut v: serde_json::Value = serde_json::from_str(raw)
                .map_err(|e| format!("generation of `{}` is not JSON: {e}", step.name))?;
            for k in keys {
                v = v
                    .get(k.as_str())
                    .cloned()
                    .ok_or_else(|| format!("generation of `{}` has no key `{k}`", step.name))?;
            }
            json_to_value(&v).ok_or_else(|| format!("key `{}` is null", keys.join(".")))
        }
    }
}

fn count_identifier(step: &Step, needle: &str) -> usize {
    step.prompts
        .iter()
        .filter(|t| t.role == Role::Generation)
        .map(|t| identifiers(&t.value).filter(|i| *i == needle).count())
        .sum()
}

/// Runs a statically checked program. Errors are runtime failures that a
/// repair round may fix.
pub fn evaluate(program: &ExtractorProgram, ctx: &EvalContext<'_>) -> Result<FeatureValue, String> {
    check_program(program).map_err(|e| e.to_string())?;
    if ctx.target_index > ctx.trajectory.steps.len() {
        return Err("decision step index out of range".into());
    }
    let mut reads_thoughts = false;
    let mut value = match &program.ops[0] {
        Op::ReadField { path } => {
            let p = parse_path(path).map_err(|e| e.to_string())?;
            if let Accessor::Generation(keys) = &p.accessor {
                reads_thoughts = keys.iter().any(|k| k.contains("thought"));
            }
            read_field(&p, ctx)?
        }
        Op::StepIndex { agent } => {
            let at_target = ctx
                .trajectory
                .steps
                .get(ctx.target_index)
                .is_some_and(|s| &s.name == agent);
            if at_target {
                FeatureValue::Number(ctx.target_index as f64)
            } else {
                let (i, _) = ctx
                    .last_named(agent)
                    .ok_or_else(|| format!("no `{agent}` step before the decision step"))?;
                FeatureValue::Number(i as f64)
            }
        }
        Op::AgentVisited { agent, negate } => {
            FeatureValue::Bool(ctx.last_named(agent).is_some() != *negate)
        }
        Op::LastStatus => {
            let status = ctx
                .visible()
                .iter()
                .rev()
                .find(|s| s.is_execution())
                .and_then(|s| s.data.as_deref())
                .and_then(|d| serde_json::from_str::<serde_json::Value>(d).ok())
                .and_then(|v| v.get("status").and_then(|s| s.as_str()).map(str::to_string));
            FeatureValue::Text(status.unwrap_or_else(|| "none".into()))
        }
        Op::CoUsageCount { window } => {
            let start = ctx.target_index.saturating_sub(*window);
            let steps = &ctx.trajectory.steps[start..ctx.target_index];
            let n: usize = match ctx.candidate {
                Some(c) => steps.iter().map(|s| count_identifier(s, c)).sum(),
                None => steps
                    .iter()
                    .flat_map(|s| s.prompts.iter().filter(|t| t.role == Role::Generation))
                    .map(|t| {
                        identifiers(&t.value)
                            .filter(|i| ctx.tools.is_some_and(|idx| idx.contains(i)))
                            .count()
                    })
                    .sum(),
            };
            FeatureValue::Number(n as f64)
        }
        _ => unreachable!("checked"),
    };
    for op in &program.ops[1..] {
        let text = match &value {
            FeatureValue::Text(s) => s.clone(),
            other => return Err(format!("{op:?} expects text, got {}", other.value_type())),
        };
        value = match op {
            Op::RegexCapture { pattern, group } => {
                let re = regex::Regex::new(pattern).map_err(|e| e.to_string())?;
                let caps = re
                    .captures(&text)
                    .ok_or_else(|| format!("regex `{pattern}` did not match"))?;
                FeatureValue::Text(
                    caps.get(*group)
                        .map(|m| m.as_str().to_string())
                        .unwrap_or_default(),
                )
            }
            Op::TokenCount => FeatureValue::Number(text.split_whitespace().count() as f64),
            Op::Truncate { max_tokens } => FeatureValue::Text(truncate_tokens(&text, *max_tokens)),
            _ => unreachable!("checked"),
        };
    }
    if reads_thoughts {
        if let FeatureValue::Text(s) = &value {
            value = FeatureValue::Text(truncate_tokens(s, MAX_SNIPPET_TOKENS));
        }
    }
    Ok(value)
}
