use super::SynthesisRequest;
use crate::provider::{Prompt, ROWS_BEGIN, ROWS_END};
use crate::trace::ToolSpec;

pub fn synthesis(request: &SynthesisRequest<'_>, tool: &ToolSpec) -> Prompt {
    let card: Vec<serde_json::Value> = request
        .card
        .columns()
        .map(|e| {
            serde_json::json!({
                "feature_name": e.spec.feature_name,
                "feature_type": e.spec.feature_type,
                "value_type": e.spec.value_type(),
                "description": e.spec.description,
            })
        })
        .collect();
    let siblings: Vec<&str> = request
        .catalogs
        .get(request.app)
        .map(|c| c.tools.iter().map(|t| t.tool_id.as_str()).collect())
        .unwrap_or_default();
    let mut rows = String::new();
    for r in &request.trajectory_slice {
        rows.push_str(&serde_json::Value::Object(request.table.row_json(r)).to_string());
        rows.push('\n');
    }
    Prompt::new(
        super::STAGE,
        "You generate synthetic training rows for a tool-shortlisting classifier. \
         Every row you write must look like a plausible real row for the given task \
         and tool: same columns, same value types, realistic values.",
        format!(
            "Columns come from the feature card and the schema key. Rules:\n\
             - Only use columns listed in the card or the key fields tax_depth, api_arity, \
             arg_mask, io_cardinality, dep_pattern, phase.\n\
             - Key fields must match the candidate tool's catalog entry; do not invent \
             tools, categories or argument types.\n\
             - dep_pattern must be `<previous tool or START>><candidate>` and respect the \
             call order seen in the task's trajectories.\n\
             - Every row is a positive example: label = 1.\n\
             - If a field does not apply, omit it.\n\n\
             Feature card:\n{}\n\nCandidate tool:\n{}\nOther tools of the app: {}\n\n\
             Answer with JSON only:\n\
             {{\"task_id\": \"...\", \"app_name\": \"...\", \"candidate_tool_id\": \"...\", \
             \"synthetic_feature_vectors\": [{{...}}]}}",
            serde_json::Value::Array(card),
            serde_json::to_string(tool).expect("tool serializes"),
            siblings.join(", "),
        ),
        format!(
            "task_id={} app={} candidate_tool_id={}\n\
             Produce exactly {} items in synthetic_feature_vectors.\n\
             Real positive rows of this task:\n{ROWS_BEGIN}\n{rows}{ROWS_END}",
            request.task_id, request.app, request.candidate_id, request.budget
        ),
    )
}
