//! Feature discovery: an analyzer proposes feature specifications, each spec
//! carries an [`ExtractorProgram`](dsl::ExtractorProgram) that is run against
//! every trajectory, a validator checks what came out, three judges score the
//! survivors independently, and a meta-judge reconciles the scores into a
//! [`FeatureCard`]. Accepted card entries become columns of the
//! [`FeatureTable`](table::FeatureTable).

pub mod dsl;
mod orchestrate;
mod prompts;
pub mod table;

pub use orchestrate::{
    analyze_features, compile_and_run, judge_features, meta_judge, realize_features,
    run_tabschema, validate_extraction, Analysis, Issue, RealizedTable, RejectedSpec,
    RepairRequest, RunOutcome, SchemaConfig, TabSchemaRun, ValidationFlag, ValidationReview,
};
/// Provider stage names of the feature-discovery calls.
pub use prompts::{ANALYZER, CODE_EXTRACTOR, CODE_REPAIR, META_JUDGE, REFINER};
pub use table::{build_feature_table, Column, FeatureRow, FeatureTable, Origin, SchemaKey, TableError};

use crate::provider::ProviderError;
use crate::value::ValueType;
use dsl::ExtractorProgram;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("trajectory batch is empty")]
    EmptyBatch,
    #[error("no trajectory in the batch contains the decision step `{0}`")]
    TargetAbsent(String),
    #[error("feature card is empty")]
    EmptyCard,
    #[error("feature `{0}` does not carry one verdict from each judge")]
    MissingVerdicts(String),
    #[error("feature `{feature}`: {source}")]
    Sandbox {
        feature: String,
        #[source]
        source: dsl::DslError,
    },
    #[error("feature `{0}` has no extractor program")]
    NoProgram(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureType {
    #[default]
    #[serde(alias = "Text", alias = "string")]
    Text,
    #[serde(alias = "Numeric", alias = "number", alias = "numerical")]
    Numeric,
    #[serde(alias = "Categorical", alias = "boolean", alias = "bool")]
    Categorical,
    #[serde(alias = "Computed")]
    Computed,
}

impl FeatureType {
    /// Realized value types that agree with this declared type.
    pub fn admits(self, ty: ValueType) -> bool {
        match self {
            FeatureType::Text => ty == ValueType::Text,
            FeatureType::Numeric => ty == ValueType::Number,
            FeatureType::Categorical => matches!(ty, ValueType::Text | ValueType::Bool),
            FeatureType::Computed => matches!(ty, ValueType::Number | ValueType::Bool),
        }
    }

    /// Value type assumed when nothing was realized.
    pub fn default_value_type(self) -> ValueType {
        match self {
            FeatureType::Text | FeatureType::Categorical => ValueType::Text,
            FeatureType::Numeric | FeatureType::Computed => ValueType::Number,
        }
    }
}

impl fmt::Display for FeatureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureType::Text => "text",
            FeatureType::Numeric => "numeric",
            FeatureType::Categorical => "categorical",
            FeatureType::Computed => "computed",
        })
    }
}

/// One proposed feature. `computation` is the prose description;
/// `program` is its executable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub feature_name: String,
    #[serde(default)]
    pub feature_type: FeatureType,
    #[serde(default)]
    pub description: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub extraction_source: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub computation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<ExtractorProgram>,
    #[serde(default, deserialize_with = "lenient_string")]
    pub classification_relevance: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub rationale: String,
    /// Relevance judge score once judged, else 0.
    #[serde(default)]
    pub relevance_score: f64,
    /// Value type observed at extraction time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realized_type: Option<ValueType>,
}

fn lenient_string<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    let v = Option::<serde_json::Value>::deserialize(d)?;
    Ok(match v {
        None | Some(serde_json::Value::Null) => String::new(),
        Some(serde_json::Value::String(s)) => s,
        Some(other) => other.to_string(),
    })
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, feature_type: FeatureType, program: ExtractorProgram) -> Self {
        FeatureSpec {
            feature_name: name.into(),
            feature_type,
            description: String::new(),
            extraction_source: String::new(),
            computation: String::new(),
            program: Some(program),
            classification_relevance: String::new(),
            rationale: String::new(),
            relevance_score: 0.0,
            realized_type: None,
        }
    }

    pub fn value_type(&self) -> ValueType {
        self.realized_type
            .unwrap_or_else(|| self.feature_type.default_value_type())
    }

    pub fn is_candidate_conditioned(&self) -> bool {
        self.program
            .as_ref()
            .is_some_and(ExtractorProgram::is_candidate_conditioned)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeType {
    Relevance,
    Generality,
    Impact,
}

impl JudgeType {
    pub const ALL: [JudgeType; 3] = [JudgeType::Relevance, JudgeType::Generality, JudgeType::Impact];

    /// Provider stage name.
    pub fn stage(self) -> &'static str {
        match self {
            JudgeType::Relevance => "relevance_judge",
            JudgeType::Generality => "generality_judge",
            JudgeType::Impact => "impact_judge",
        }
    }

    /// Accepts the stage name and common variants such as
    /// `impact_uniqueness_judge`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_ascii_lowercase();
        if s.starts_with("relevance") {
            Some(JudgeType::Relevance)
        } else if s.starts_with("generality") {
            Some(JudgeType::Generality)
        } else if s.starts_with("impact") {
            Some(JudgeType::Impact)
        } else {
            None
        }
    }
}

/// Maps a 1–5 rating to `[0, 1]`.
pub fn unit_score(raw: f64) -> f64 {
    (raw - 1.0) / 4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub judge_type: JudgeType,
    /// `(raw_score - 1) / 4`.
    pub score: f64,
    pub confidence: f64,
    pub assessment: String,
    #[serde(default)]
    pub key_factors: Vec<String>,
    /// The rating as returned, on the 1–5 scale.
    pub raw_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaDecision {
    Accept,
    Conditional,
    Reject,
}

impl MetaDecision {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "accept" => Some(MetaDecision::Accept),
            "conditional" => Some(MetaDecision::Conditional),
            "reject" => Some(MetaDecision::Reject),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardEntry {
    #[serde(flatten)]
    pub spec: FeatureSpec,
    pub verdicts: Vec<JudgeVerdict>,
    pub final_decision: MetaDecision,
    /// As returned on the 1–5 scale.
    pub meta_score: f64,
    pub confidence: f64,
    pub decision_rationale: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub provider: String,
    pub seed: u64,
    /// FNV-1a of the serialized analyzer batch, hex.
    pub batch_hash: String,
    pub target: String,
    pub refinement_cycles: usize,
    #[serde(default)]
    pub rejected_specs: Vec<RejectedSpec>,
    #[serde(default)]
    pub dropped_after_validation: Vec<ValidationFlag>,
    #[serde(default)]
    pub include_conditional: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureCard {
    pub features: Vec<CardEntry>,
    pub provenance: Provenance,
}

impl FeatureCard {
    /// Entries that become table columns: accepted ones, plus conditional
    /// ones when the provenance says so.
    pub fn columns(&self) -> impl Iterator<Item = &CardEntry> {
        let cond = self.provenance.include_conditional;
        self.features.iter().filter(move |e| match e.final_decision {
            MetaDecision::Accept => true,
            MetaDecision::Conditional => cond,
            MetaDecision::Reject => false,
        })
    }

    pub fn get(&self, name: &str) -> Option<&CardEntry> {
        self.features.iter().find(|e| e.spec.feature_name == name)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("card serializes") + "\n"
    }
}
