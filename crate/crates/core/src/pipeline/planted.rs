//! A mock-provider script matched to the planted corpus, so the whole
//! pipeline runs offline.
//!
//! The analyzer proposes ten features. One reads the decision step and is
//! rejected as leakage, one has no program and is compiled by the code
//! extractor, one fails on tasks without an earlier coder step and is
//! repaired once, and one is constant and is dropped after refinement. The
//! judges rate the remaining eight; the meta-judge runs the threshold policy.

use crate::features::JudgeType;
use crate::provider::{MockPolicy, ScriptEntry};
use serde_json::{json, Value};

pub const TARGET: &str = "ShortlisterAgent";

fn spec(name: &str, ty: &str, description: &str, source: &str, program: Option<Value>) -> Value {
    let mut v = json!({
        "feature_name": name,
        "feature_type": ty,
        "description": description,
        "extraction_source": source,
        "computation": description,
        "classification_relevance": "informs which tools the shortlister should return",
        "rationale": "observable before the shortlisting decision",
    });
    if let Some(p) = program {
        v["program"] = p;
    }
    v
}

fn read(path: &str) -> Value {
    json!({"ops": [{"op": "read_field", "path": path}]})
}

/// The analyzer's proposal, identical for every trajectory shown.
pub fn proposals() -> Value {
    json!({"potential_features": [
        spec("user_intent", "text", "The user's request as written.", "intent", Some(read("intent"))),
        spec("step_id", "numeric", "Index of the shortlisting step in the trajectory.", "step order",
             Some(json!({"ops": [{"op": "step_index", "agent": TARGET}]}))),
        spec("first_time_shortlister", "categorical", "Whether no shortlisting happened earlier.", "step names",
             Some(json!({"ops": [{"op": "agent_visited", "agent": TARGET, "negate": true}]}))),
        spec("thoughts", "text", "Opening of the planner's latest thoughts.", "PlanControllerAgent generation",
             Some(json!({"ops": [{"op": "read_field", "path": "prev[1].generation.thoughts"},
                                 {"op": "truncate", "max_tokens": 8}]}))),
        spec("planned_api_mentions", "numeric",
             "How often the candidate tool is named in the three steps before the decision.",
             "recent generations",
             Some(json!({"ops": [{"op": "co_usage_count", "window": 3}]}))),
        spec("intent_length", "numeric", "Number of words in the request.", "intent", None),
        spec("last_coder_status", "categorical", "Status reported by the latest coder step.", "CoderAgent data",
             Some(json!({"ops": [{"op": "read_field", "path": "agent[CoderAgent].data"},
                                 {"op": "regex_capture", "pattern": "\"status\":\\s*\"(\\w+)\"", "group": 1}]}))),
        spec("next_subtask_app", "categorical", "App the planner routes the next subtask to.", "PlanControllerAgent generation",
             Some(read("prev[1].generation.next_subtask_app"))),
        spec("previous_agent", "categorical", "Name of the step right before the decision.", "step names",
             Some(read("prev[1].name"))),
        spec("shortlist_preview", "text", "The shortlist itself.", "ShortlisterAgent generation",
             Some(read("target.generation.result"))),
    ]})
}

/// `(feature, raw rating per judge)` for the features that reach the judges.
pub const RATINGS: [(&str, [f64; 3]); 8] = [
    ("user_intent", [5.0, 4.0, 5.0]),
    ("step_id", [4.0, 4.0, 4.0]),
    ("first_time_shortlister", [4.0, 5.0, 4.0]),
    ("thoughts", [3.0, 3.0, 3.0]),
    ("planned_api_mentions", [5.0, 4.0, 5.0]),
    ("intent_length", [1.0, 1.0, 1.0]),
    ("last_coder_status", [4.0, 4.0, 4.0]),
    ("next_subtask_app", [4.0, 5.0, 4.0]),
];

fn judge_reply(judge: JudgeType, idx: usize) -> Value {
    let features: Vec<Value> = RATINGS
        .iter()
        .map(|(name, scores)| {
            json!({
                "feature_name": name,
                "score": scores[idx],
                "confidence": 4,
                "assessment": format!("rated {} of 5", scores[idx]),
                "key_factors": ["available before the decision"],
            })
        })
        .collect();
    json!({"judge_type": judge.stage(), "features": features})
}

/// Script entries for the analyzer, code extractor, repair, refiner, judges,
/// meta-judge and synthesis stages.
pub fn script() -> Vec<ScriptEntry> {
    let mut out = vec![
        ScriptEntry::reply(crate::features::ANALYZER, proposals()).repeated(0),
        ScriptEntry::reply(
            crate::features::CODE_EXTRACTOR,
            json!({"ops": [{"op": "read_field", "path": "intent"}, {"op": "token_count"}]}),
        )
        .repeated(0),
        ScriptEntry::reply(
            crate::features::CODE_REPAIR,
            json!({"ops": [{"op": "last_status"}]}),
        )
        .repeated(0),
        ScriptEntry::reply(
            crate::features::REFINER,
            json!({"potential_features": []}),
        )
        .repeated(0),
    ];
    for (i, judge) in JudgeType::ALL.iter().enumerate() {
        out.push(ScriptEntry::reply(judge.stage(), judge_reply(*judge, i)).repeated(0));
    }
    out.push(ScriptEntry::policy(
        crate::features::META_JUDGE,
        MockPolicy::Threshold,
    ));
    out.push(ScriptEntry::policy(crate::synth::STAGE, MockPolicy::Resample));
    out
}
