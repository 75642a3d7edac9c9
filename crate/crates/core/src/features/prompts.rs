//! Prompt builders for the feature-discovery stages.

use super::{FeatureSpec, JudgeType, JudgeVerdict};
use crate::provider::{Prompt, VERDICTS_BEGIN, VERDICTS_END};
use crate::trace::Trajectory;

pub const ANALYZER: &str = "feature_analyzer";
pub const CODE_EXTRACTOR: &str = "code_extractor";
pub const CODE_REPAIR: &str = "code_repair";
pub const REFINER: &str = "feature_refiner";
pub const META_JUDGE: &str = "meta_judge";

const DSL_REFERENCE: &str = r#"Extractor programs are JSON objects {"ops": [...]}. The first op reads the trajectory; later ops transform text.
Sources:
  {"op": "read_field", "path": P}   P = intent | task_id | apps | prev[k].F | agent[Name].F
                                    F = name | data | system | user | generation | generation.<json key>...
  {"op": "step_index", "agent": Name}
  {"op": "agent_visited", "agent": Name, "negate": false}
  {"op": "last_status"}
  {"op": "co_usage_count", "window": W}   occurrences of the scored candidate id in the W steps before the decision
Transforms:
  {"op": "regex_capture", "pattern": R, "group": 1}
  {"op": "token_count"}
  {"op": "truncate", "max_tokens": N}   (N <= 8)
Only content strictly before the decision step may be read; prev[0], target, next[..], steps[i] and score are rejected."#;

const SPEC_FORMAT: &str = r#"{
  "potential_features": [
    {
      "feature_name": "snake_case name",
      "feature_type": "text | numeric | categorical | computed",
      "description": "...",
      "extraction_source": "...",
      "computation": "...",
      "program": {"ops": [...]},
      "classification_relevance": "...",
      "rationale": "..."
    }
  ]
}"#;

fn prefix_json(trajectory: &Trajectory, target_index: usize) -> String {
    let mut visible = trajectory.clone();
    visible.steps.truncate(target_index);
    visible.tools_used = None;
    serde_json::json!({
        "task_id": visible.task_id,
        "intent": visible.intent,
        "apps": visible.apps,
        "steps": visible.steps,
    })
    .to_string()
}

pub fn analyzer(trajectory: &Trajectory, target_index: usize, target: &str) -> Prompt {
    Prompt::new(
        ANALYZER,
        "You design tabular features for a classifier that will replace one agent \
         component. Features must be computable by code from the logged trajectory.",
        format!(
            "The component being replaced is `{target}`. You see the trajectory up to, \
             but not including, its step. Propose features that can be read or computed \
             from that prefix: user inputs, earlier generations, plans, statuses, and \
             step structure.\n\n{DSL_REFERENCE}\n\nAnswer with JSON only:\n{SPEC_FORMAT}"
        ),
        format!(
            "Decision component: {target}\nTrajectory prefix:\n{}",
            prefix_json(trajectory, target_index)
        ),
    )
}

fn spec_json(spec: &FeatureSpec) -> String {
    let mut s = spec.clone();
    s.program = None;
    serde_json::to_string(&s).expect("spec serializes")
}

pub fn code_extractor(spec: &FeatureSpec, target: &str) -> Prompt {
    Prompt::new(
        CODE_EXTRACTOR,
        "You translate feature descriptions into extractor programs.",
        format!(
            "Write one extractor program for the feature below. The decision step is \
             `{target}`.\n\n{DSL_REFERENCE}\n\nAnswer with JSON only: {{\"ops\": [...]}}"
        ),
        format!("Feature:\n{}", spec_json(spec)),
    )
}

pub fn code_repair(
    spec: &FeatureSpec,
    program: &super::dsl::ExtractorProgram,
    errors: &[String],
) -> Prompt {
    let mut trace = String::new();
    for (i, e) in errors.iter().enumerate() {
        trace.push_str(&format!("attempt {}: {e}\n", i + 1));
    }
    Prompt::new(
        CODE_REPAIR,
        "You repair extractor programs that failed at run time.",
        format!("{DSL_REFERENCE}\n\nAnswer with JSON only: {{\"ops\": [...]}}"),
        format!(
            "Feature:\n{}\nCurrent program:\n{}\nErrors so far:\n{trace}",
            spec_json(spec),
            serde_json::to_string(program).expect("program serializes"),
        ),
    )
}

pub fn refiner(specs: &[FeatureSpec], requests: &[super::RepairRequest]) -> Prompt {
    Prompt::new(
        REFINER,
        "You revise feature specifications after an extraction review.",
        format!(
            "Return revised versions of the flagged features only, keeping their names. \
             Omit a feature to leave it unchanged.\n\n{DSL_REFERENCE}\n\nAnswer with JSON only:\n{SPEC_FORMAT}"
        ),
        format!(
            "Current features:\n{}\nReview:\n{}",
            serde_json::to_string(specs).expect("specs serialize"),
            serde_json::to_string(requests).expect("requests serialize"),
        ),
    )
}

fn focus(judge: JudgeType) -> &'static str {
    match judge {
        JudgeType::Relevance => {
            "how strongly each feature is tied to the decision being made, i.e. whether \
             it helps separate the options"
        }
        JudgeType::Generality => {
            "whether each feature can be extracted from nearly every trajectory with a \
             stable meaning"
        }
        JudgeType::Impact => {
            "how much new discriminative information each feature adds beyond the \
             obvious ones"
        }
    }
}

pub fn judge(judge: JudgeType, specs: &[FeatureSpec]) -> Prompt {
    let card: Vec<String> = specs.iter().map(spec_json).collect();
    Prompt::new(
        judge.stage(),
        format!("You are the {} judge for a feature card.", judge.stage().trim_end_matches("_judge")),
        format!(
            "Rate {} on a 1 (poor) to 5 (excellent) scale, with a confidence on the same \
             scale. Rate every feature exactly once.\n\nAnswer with JSON only:\n\
             {{\"judge_type\": \"{}\", \"features\": [{{\"feature_name\": \"...\", \"score\": 1-5, \
             \"confidence\": 1-5, \"assessment\": \"...\", \"key_factors\": [\"...\"]}}]}}",
            focus(judge),
            judge.stage()
        ),
        format!("Feature card:\n[{}]", card.join(",\n")),
    )
}

pub fn meta(features: &[(FeatureSpec, Vec<JudgeVerdict>)]) -> Prompt {
    let block: Vec<serde_json::Value> = features
        .iter()
        .map(|(spec, verdicts)| {
            serde_json::json!({
                "feature_name": spec.feature_name,
                "description": spec.description,
                "verdicts": verdicts,
            })
        })
        .collect();
    Prompt::new(
        META_JUDGE,
        "You reconcile three independent judges into one decision per feature.",
        "Weigh the relevance, generality and impact verdicts equally. Decide accept, \
         conditional or reject for every feature and explain each decision; a rejection \
         always needs an explanation.\n\nAnswer with JSON only:\n\
         [{\"feature_name\": \"...\", \"final_decision\": \"accept|conditional|reject\", \
         \"meta_score\": 1-5, \"confidence\": 1-5, \"decision_rationale\": \"...\"}]",
        format!(
            "Judge verdicts:\n{VERDICTS_BEGIN}\n{}\n{VERDICTS_END}",
            serde_json::Value::Array(block)
        ),
    )
}
