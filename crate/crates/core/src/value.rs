//! Typed cell values shared by feature tables, extractors, and synthetic rows.

use serde::{Deserialize, Serialize};
use std::fmt;

/// A realized feature value.
///
/// Serialized untagged so that JSON rows look like `{"step_id": 24,
/// "api_missing": false, "intent": "..."}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

/// The runtime type of a [`FeatureValue`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Bool,
    Number,
    Text,
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueType::Bool => "bool",
            ValueType::Number => "number",
            ValueType::Text => "text",
        })
    }
}

impl FeatureValue {
    pub fn value_type(&self) -> ValueType {
        match self {
            FeatureValue::Bool(_) => ValueType::Bool,
            FeatureValue::Number(_) => ValueType::Number,
            FeatureValue::Text(_) => ValueType::Text,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(x) => Some(*x),
            FeatureValue::Bool(b) => Some(if *b { 1.0 } else { 0.0 }),
            FeatureValue::Text(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            FeatureValue::Text(s) => Some(s),
            _ => None,
        }
    }

    /// Categorical rendering used for hashing and contingency tables.
    pub fn category(&self) -> String {
        match self {
            FeatureValue::Bool(b) => b.to_string(),
            FeatureValue::Number(x) => format_number(*x),
            FeatureValue::Text(s) => s.clone(),
        }
    }

    /// Converts a JSON scalar. Arrays and objects are rendered as compact JSON text.
    pub fn from_json(value: &serde_json::Value) -> Option<Self> {
        match value {
            serde_json::Value::Null => None,
            serde_json::Value::Bool(b) => Some(FeatureValue::Bool(*b)),
            serde_json::Value::Number(n) => n.as_f64().map(FeatureValue::Number),
            serde_json::Value::String(s) => Some(FeatureValue::Text(s.clone())),
            other => Some(FeatureValue::Text(other.to_string())),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            FeatureValue::Bool(b) => serde_json::Value::Bool(*b),
            FeatureValue::Number(x) => serde_json::Number::from_f64(*x)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            FeatureValue::Text(s) => serde_json::Value::String(s.clone()),
        }
    }
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.category())
    }
}

/// Integers print without a trailing `.0`; everything else uses the shortest
/// round-tripping representation.
pub fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Parses a CSV cell back into a value of the given type. Empty cells are missing.
pub fn parse_cell(raw: &str, ty: ValueType) -> Option<FeatureValue> {
    if raw.is_empty() {
        return None;
    }
    match ty {
        ValueType::Text => Some(FeatureValue::Text(raw.to_string())),
        ValueType::Number => raw.parse().ok().map(FeatureValue::Number),
        ValueType::Bool => match raw {
            "true" | "TRUE" | "True" => Some(FeatureValue::Bool(true)),
            "false" | "FALSE" | "False" => Some(FeatureValue::Bool(false)),
            _ => None,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untagged_json_shapes() {
        let v: Vec<FeatureValue> = serde_json::from_str(r#"[true, 24, "x"]"#).unwrap();
        assert_eq!(
            v,
            vec![
                FeatureValue::Bool(true),
                FeatureValue::Number(24.0),
                FeatureValue::Text("x".into())
            ]
        );
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"[true,24.0,"x"]"#);
    }

    #[test]
    fn cells_round_trip() {
        for v in [
            FeatureValue::Bool(false),
            FeatureValue::Number(3.0),
            FeatureValue::Number(0.125),
            FeatureValue::Text("a b".into()),
        ] {
            assert_eq!(parse_cell(&v.category(), v.value_type()), Some(v));
        }
        assert_eq!(parse_cell("", ValueType::Number), None);
    }
}
