//! The language-model slot used by feature discovery and synthesis.
//!
//! Every request is a three-part prompt tagged with a *stage* (for example
//! `relevance_judge` or `tabsynth`). Providers append each call to a
//! [`CallLog`] before returning, so a run can be replayed or audited.
//!
//! [`ScriptedProvider`] is the deterministic stand-in used in tests and
//! offline runs. Its script is JSONL; each line serves one call of a stage, in
//! order:
//!
//! ```text
//! {"stage": "relevance_judge", "response": {"judge_type": "relevance_judge", "features": []}}
//! {"stage": "code_repair", "response": "{\"ops\": []}", "repeat": 3}
//! {"stage": "meta_judge", "policy": "threshold", "repeat": 0}
//! {"stage": "tabsynth", "policy": "resample", "repeat": 0}
//! ```
//!
//! `repeat` serves the same entry that many times (`0` means unbounded). A
//! `policy` entry computes its answer from the prompt instead of replaying a
//! fixed string; see [`MockPolicy`].

use crate::text::fnv1a;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("mock script has no response for stage `{stage}` call {index}")]
    ScriptExhausted { stage: String, index: usize },
    #[error("invalid mock script: {0}")]
    Script(String),
    #[error("stage `{stage}`: unparseable response after {attempts} attempts: {last_error}")]
    Unparseable {
        stage: String,
        attempts: usize,
        last_error: String,
    },
    #[error("{0}")]
    Other(String),
}

/// A role-structured request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub stage: String,
    pub system: String,
    pub developer: String,
    pub user: String,
}

impl Prompt {
    pub fn new(
        stage: impl Into<String>,
        system: impl Into<String>,
        developer: impl Into<String>,
        user: impl Into<String>,
    ) -> Self {
        Prompt {
            stage: stage.into(),
            system: system.into(),
            developer: developer.into(),
            user: user.into(),
        }
    }

    pub fn digest(&self) -> u64 {
        let joined = format!(
            "{}\u{1f}{}\u{1f}{}\u{1f}{}",
            self.stage, self.system, self.developer, self.user
        );
        fnv1a(joined.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub stage: String,
    /// 0-based index of this call within its stage.
    pub index: usize,
    pub prompt: Prompt,
    pub response: Result<String, String>,
}

/// Append-only record of provider interactions.
#[derive(Debug, Default)]
pub struct CallLog {
    records: Mutex<Vec<CallRecord>>,
}

impl CallLog {
    pub fn push(&self, record: CallRecord) {
        self.records.lock().expect("call log poisoned").push(record);
    }

    /// Records sorted by `(stage, index)`, which is stable across thread
    /// interleavings.
    pub fn snapshot(&self) -> Vec<CallRecord> {
        let mut v = self.records.lock().expect("call log poisoned").clone();
        v.sort_by(|a, b| (a.stage.as_str(), a.index).cmp(&(b.stage.as_str(), b.index)));
        v
    }

    pub fn for_stage(&self, stage: &str) -> Vec<CallRecord> {
        self.snapshot()
            .into_iter()
            .filter(|r| r.stage == stage)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("call log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for r in self.snapshot() {
            out.push_str(&serde_json::to_string(&r).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)
    }
}

pub trait LlmProvider: Send + Sync {
    /// Stable identifier recorded in provenance blocks.
    fn id(&self) -> String;

    /// One completion. Implementations log the call before returning.
    fn complete(&self, prompt: &Prompt) -> Result<String, ProviderError>;

    fn log(&self) -> &CallLog;
}

/// Calls the provider and parses the answer, re-asking up to `max_attempts`
/// times in total. Each retry appends the parse errors seen so far to the
/// user part of the prompt.
pub fn complete_parsed<T>(
    provider: &dyn LlmProvider,
    prompt: &Prompt,
    max_attempts: usize,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<T, ProviderError> {
    let mut errors: Vec<String> = Vec::new();
    for _ in 0..max_attempts.max(1) {
        let mut p = prompt.clone();
        if !errors.is_empty() {
            p.user.push_str("\n\nYour previous response was rejected:\n");
            for (i, e) in errors.iter().enumerate() {
                p.user.push_str(&format!("{}. {e}\n", i + 1));
            }
            p.user.push_str("Return only the JSON object described above.");
        }
        let raw = provider.complete(&p)?;
        match parse(&raw) {
            Ok(v) => return Ok(v),
            Err(e) => {
                log::warn!("stage {}: rejected response: {e}", prompt.stage);
                errors.push(e);
            }
        }
    }
    Err(ProviderError::Unparseable {
        stage: prompt.stage.clone(),
        attempts: max_attempts.max(1),
        last_error: errors.pop().unwrap_or_default(),
    })
}

/// Extracts the first JSON value from a response, tolerating code fences and
/// surrounding prose.
pub fn extract_json(raw: &str) -> Result<serde_json::Value, String> {
    let trimmed = raw.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Ok(v);
    }
    let start = trimmed
        .find(['{', '['])
        .ok_or_else(|| "no JSON value in response".to_string())?;
    let mut de = serde_json::Deserializer::from_str(&trimmed[start..]).into_iter();
    match de.next() {
        Some(Ok(v)) => Ok(v),
        Some(Err(e)) => Err(format!("invalid JSON: {e}")),
        None => Err("no JSON value in response".into()),
    }
}

/// Answers computed from the prompt instead of replayed verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockPolicy {
    /// Meta-judge: accept when the mean judge score is at least 0.75,
    /// conditional at 0.5, reject otherwise (always reject when every score
    /// is 0). Reads the block between [`VERDICTS_BEGIN`] and [`VERDICTS_END`].
    Threshold,
    /// Synthesis: re-emits the budgeted number of positive rows for the
    /// requested candidate from the trajectory table in the prompt, permuting
    /// the words of free-text fields so that copies are not verbatim.
    Resample,
}

pub const VERDICTS_BEGIN: &str = "<<<VERDICTS";
pub const VERDICTS_END: &str = "VERDICTS>>>";
pub const ROWS_BEGIN: &str = "<<<ROWS";
pub const ROWS_END: &str = "ROWS>>>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<MockPolicy>,
    /// Simulated transport failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub repeat: usize,
}

fn one() -> usize {
    1
}

fn is_one(n: &usize) -> bool {
    *n == 1
}

impl ScriptEntry {
    pub fn reply(stage: &str, response: serde_json::Value) -> Self {
        ScriptEntry {
            stage: stage.to_string(),
            response: Some(response),
            policy: None,
            error: None,
            repeat: 1,
        }
    }

    pub fn policy(stage: &str, policy: MockPolicy) -> Self {
        ScriptEntry {
            stage: stage.to_string(),
            response: None,
            policy: Some(policy),
            error: None,
            repeat: 0,
        }
    }

    pub fn repeated(mut self, n: usize) -> Self {
        self.repeat = n;
        self
    }
}

/// Deterministic provider replaying a script, matched by per-stage call index.
#[derive(Debug)]
pub struct ScriptedProvider {
    stages: BTreeMap<String, Vec<ScriptEntry>>,
    counters: Mutex<BTreeMap<String, usize>>,
    log: CallLog,
}

impl ScriptedProvider {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, ProviderError> {
        let mut stages: BTreeMap<String, Vec<ScriptEntry>> = BTreeMap::new();
        for (i, e) in entries.into_iter().enumerate() {
            let kinds = usize::from(e.response.is_some())
                + usize::from(e.policy.is_some())
                + usize::from(e.error.is_some());
            if kinds != 1 {
                return Err(ProviderError::Script(format!(
                    "entry {i}: exactly one of response, policy, error is required"
                )));
            }
            stages.entry(e.stage.clone()).or_default().push(e);
        }
        Ok(ScriptedProvider {
            stages,
            counters: Mutex::new(BTreeMap::new()),
            log: CallLog::default(),
        })
    }

    pub fn from_jsonl(text: &str) -> Result<Self, ProviderError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| ProviderError::Script(format!("line {}: {e}", i + 1)))?;
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn from_path(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Script(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn to_jsonl(entries: &[ScriptEntry]) -> String {
        entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }

    fn entry_for(&self, stage: &str, index: usize) -> Option<&ScriptEntry> {
        let mut remaining = index;
        for e in self.stages.get(stage)? {
            if e.repeat == 0 {
                return Some(e);
            }
            if remaining < e.repeat {
                return Some(e);
            }
            remaining -= e.repeat;
        }
        None
    }

    fn answer(&self, prompt: &Prompt, index: usize) -> Result<String, ProviderError> {
        let entry = self
            .entry_for(&prompt.stage, index)
            .ok_or_else(|| ProviderError::ScriptExhausted {
                stage: prompt.stage.clone(),
                index,
            })?;
        if let Some(msg) = &entry.error {
            return Err(ProviderError::Unreachable(msg.clone()));
        }
        if let Some(policy) = entry.policy {
            return match policy {
                MockPolicy::Threshold => threshold_policy(prompt),
                MockPolicy::Resample => resample_policy(prompt),
            };
        }
        Ok(match entry.response.as_ref().expect("validated") {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    }
}

impl LlmProvider for ScriptedProvider {
    fn id(&self) -> String {
        "mock".into()
    }

    fn complete(&self, prompt: &Prompt) -> Result<String, ProviderError> {
        let index = {
            let mut counters = self.counters.lock().expect("counter poisoned");
            let c = counters.entry(prompt.stage.clone()).or_default();
            let i = *c;
            *c += 1;
            i
        };
        let response = self.answer(prompt, index);
        self.log.push(CallRecord {
            stage: prompt.stage.clone(),
            index,
            prompt: prompt.clone(),
            response: response.clone().map_err(|e| e.to_string()),
        });
        response
    }

    fn log(&self) -> &CallLog {
        &self.log
    }
}

fn between<'a>(text: &'a str, begin: &str, end: &str) -> Option<&'a str> {
    let s = text.find(begin)? + begin.len();
    let e = text[s..].find(end)? + s;
    Some(&text[s..e])
}

fn threshold_policy(prompt: &Prompt) -> Result<String, ProviderError> {
    let block = between(&prompt.user, VERDICTS_BEGIN, VERDICTS_END)
        .ok_or_else(|| ProviderError::Other("threshold policy: no verdict block".into()))?;
    let value: serde_json::Value = serde_json::from_str(block.trim())
        .map_err(|e| ProviderError::Other(format!("threshold policy: {e}")))?;
    let mut out = Vec::new();
    for f in value.as_array().into_iter().flatten() {
        let name = f["feature_name"].as_str().unwrap_or_default();
        let scores: Vec<f64> = f["verdicts"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|v| v["score"].as_f64())
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        let all_zero = scores.iter().all(|s| *s == 0.0);
        let decision = if all_zero || mean < 0.5 {
            "reject"
        } else if mean < 0.75 {
            "conditional"
        } else {
            "accept"
        };
        out.push(serde_json::json!({
            "feature_name": name,
            "final_decision": decision,
            "meta_score": (1.0 + 4.0 * mean).round(),
            "confidence": 4,
            "decision_rationale": format!("mean judge score {mean:.3}"),
        }));
    }
    Ok(serde_json::Value::Array(out).to_string())
}

/// The `n`-th permutation of the words in lexicographic index order
/// (`n = 0` is the identity), so distinct `n` below `len!` give distinct
/// word orders.
fn permute_words(text: &str, n: usize) -> String {
    let mut words: Vec<&str> = text.split_whitespace().collect();
    let len = words.len();
    if len < 2 {
        return text.to_string();
    }
    let mut digits = Vec::with_capacity(len);
    let mut rest = n;
    for base in 1..=len {
        digits.push(rest % base);
        rest /= base;
    }
    let mut out = Vec::with_capacity(len);
    for d in digits.into_iter().rev() {
        out.push(words.remove(d));
    }
    out.join(" ")
}

fn resample_policy(prompt: &Prompt) -> Result<String, ProviderError> {
    let header = |key: &str| -> Option<String> {
        let s = prompt.user.find(&format!("{key}="))? + key.len() + 1;
        let rest = &prompt.user[s..];
        let e = rest.find(|c: char| c.is_whitespace() || c == ',')?;
        Some(rest[..e].trim_end_matches('.').to_string())
    };
    let task_id = header("task_id").unwrap_or_default();
    let candidate = header("candidate_tool_id").unwrap_or_default();
    let app = header("app").unwrap_or_default();
    let budget: usize = between(&prompt.user, "exactly ", " items")
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(1);
    let block = between(&prompt.user, ROWS_BEGIN, ROWS_END).unwrap_or_default();
    let rows: Vec<serde_json::Map<String, serde_json::Value>> = block
        .lines()
        .filter_map(|l| serde_json::from_str(l.trim()).ok())
        .collect();
    let positives: Vec<&serde_json::Map<String, serde_json::Value>> = rows
        .iter()
        .filter(|r| r.get("candidate_tool_id").and_then(|v| v.as_str()) == Some(&candidate))
        .collect();
    let mut vectors = Vec::new();
    if !positives.is_empty() {
        for i in 0..budget {
            let src = positives[i % positives.len()];
            let mut row = serde_json::Map::new();
            for (k, v) in src {
                if matches!(k.as_str(), "task_id" | "candidate_tool_id" | "origin") {
                    continue;
                }
                let v = match v {
                    serde_json::Value::String(s) if s.contains(' ') => {
                        serde_json::Value::String(permute_words(s, i + 1))
                    }
                    other => other.clone(),
                };
                row.insert(k.clone(), v);
            }
            row.insert("label".into(), serde_json::json!(1));
            vectors.push(serde_json::Value::Object(row));
        }
    }
    Ok(serde_json::json!({
        "task_id": task_id,
        "app_name": app,
        "candidate_tool_id": candidate,
        "synthetic_feature_vectors": vectors,
    })
    .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(stage: &str, user: &str) -> Prompt {
        Prompt::new(stage, "sys", "dev", user)
    }

    #[test]
    fn replays_by_stage_index() {
        let provider = ScriptedProvider::new(vec![
            ScriptEntry::reply("a", serde_json::json!("first")),
            ScriptEntry::reply("b", serde_json::json!({"x": 1})),
            ScriptEntry::reply("a", serde_json::json!("second")).repeated(2),
        ])
        .unwrap();
        assert_eq!(provider.complete(&p("a", "")).unwrap(), "first");
        assert_eq!(provider.complete(&p("b", "")).unwrap(), r#"{"x":1}"#);
        assert_eq!(provider.complete(&p("a", "")).unwrap(), "second");
        assert_eq!(provider.complete(&p("a", "")).unwrap(), "second");
        assert!(matches!(
            provider.complete(&p("a", "")),
            Err(ProviderError::ScriptExhausted { index: 3, .. })
        ));
        let log = provider.log().snapshot();
        assert_eq!(log.len(), 5);
        assert_eq!((log[0].stage.as_str(), log[0].index), ("a", 0));
        assert!(log[3].response.is_err());
    }

    #[test]
    fn empty_script_fails_cleanly() {
        let provider = ScriptedProvider::from_jsonl("").unwrap();
        assert!(matches!(
            provider.complete(&p("feature_analyzer", "")),
            Err(ProviderError::ScriptExhausted { .. })
        ));
    }

    #[test]
    fn parse_retries_carry_errors() {
        let provider = ScriptedProvider::new(vec![
            ScriptEntry::reply("j", serde_json::json!("nope")),
            ScriptEntry::reply("j", serde_json::json!("still nope")),
            ScriptEntry::reply("j", serde_json::json!("{\"ok\": true}")),
        ])
        .unwrap();
        let v = complete_parsed(&provider, &p("j", "base"), 3, |s| {
            extract_json(s).map_err(|e| format!("bad: {e}"))
        })
        .unwrap();
        assert_eq!(v["ok"], true);
        let log = provider.log().for_stage("j");
        assert!(!log[0].prompt.user.contains("rejected"));
        assert_eq!(log[2].prompt.user.matches("bad:").count(), 2);
    }

    #[test]
    fn extracts_fenced_json() {
        let v = extract_json("Here:\n```json\n{\"a\": [1, 2]}\n```").unwrap();
        assert_eq!(v["a"][1], 2);
        assert!(extract_json("no json").is_err());
    }

    #[test]
    fn threshold_policy_rejects_all_zero() {
        let verdicts = serde_json::json!([
            {"feature_name": "f", "verdicts": [{"score": 0.0}, {"score": 0.0}, {"score": 0.0}]},
            {"feature_name": "g", "verdicts": [{"score": 1.0}, {"score": 0.75}, {"score": 0.75}]},
        ]);
        let prompt = p("meta_judge", &format!("{VERDICTS_BEGIN}\n{verdicts}\n{VERDICTS_END}"));
        let out: serde_json::Value =
            serde_json::from_str(&threshold_policy(&prompt).unwrap()).unwrap();
        assert_eq!(out[0]["final_decision"], "reject");
        assert_eq!(out[1]["final_decision"], "accept");
    }

    #[test]
    fn word_permutations_are_distinct() {
        let text = "a b c d";
        assert_eq!(permute_words(text, 0), text);
        let all: std::collections::BTreeSet<String> = (0..24).map(|n| permute_words(text, n)).collect();
        assert_eq!(all.len(), 24);
        assert_eq!(permute_words("solo", 5), "solo");
    }

    #[test]
    fn script_entries_round_trip() {
        let entries = vec![
            ScriptEntry::reply("a", serde_json::json!({"k": 1})),
            ScriptEntry::policy("tabsynth", MockPolicy::Resample),
        ];
        let text = ScriptedProvider::to_jsonl(&entries);
        let back: Vec<ScriptEntry> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, entries);
    }
}
