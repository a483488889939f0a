//! Schema descriptors for context payloads and structured model output.
//!
//! A schema is a flat list of named fields. Field types are scalars, series of
//! a type, or nested records; record nesting is capped at [`MAX_RECORD_DEPTH`]
//! levels counting the top-level record.

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;
use std::fmt;

pub const MAX_RECORD_DEPTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    Text,
    Integer,
    Real,
    Boolean,
    /// RFC 3339 string, normalized to UTC.
    Timestamp,
    Series(Box<FieldType>),
    Record(Vec<Field>),
}

impl FieldType {
    pub fn series(of: FieldType) -> Self {
        FieldType::Series(Box::new(of))
    }

    pub fn is_scalar(&self) -> bool {
        !matches!(self, FieldType::Series(_) | FieldType::Record(_))
    }

    fn record_depth(&self) -> usize {
        match self {
            FieldType::Series(inner) => inner.record_depth(),
            FieldType::Record(fields) => {
                1 + fields.iter().map(|f| f.ty.record_depth()).max().unwrap_or(0)
            }
            _ => 0,
        }
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldType::Text => f.write_str("text"),
            FieldType::Integer => f.write_str("integer"),
            FieldType::Real => f.write_str("real"),
            FieldType::Boolean => f.write_str("boolean"),
            FieldType::Timestamp => f.write_str("timestamp"),
            FieldType::Series(inner) => write!(f, "series-of-{inner}"),
            FieldType::Record(fields) => {
                f.write_str("record-of-{")?;
                for (i, field) in fields.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{}: {}", field.name, field.ty)?;
                }
                f.write_str("}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: FieldType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub optional: bool,
}

impl Field {
    pub fn new(name: impl Into<String>, ty: FieldType) -> Self {
        Field {
            name: name.into(),
            ty,
            unit: None,
            optional: false,
        }
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = Some(unit.into());
        self
    }

    pub fn optional(mut self) -> Self {
        self.optional = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SchemaDescriptor {
    pub fields: Vec<Field>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{path}: {reason}")]
pub struct SchemaViolation {
    pub path: String,
    pub reason: String,
}

impl SchemaViolation {
    fn new(path: &str, reason: impl Into<String>) -> Self {
        SchemaViolation {
            path: if path.is_empty() { "$".into() } else { path.into() },
            reason: reason.into(),
        }
    }
}

impl SchemaDescriptor {
    pub fn new(fields: Vec<Field>) -> Self {
        SchemaDescriptor { fields }
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Structural well-formedness: non-empty unique names, depth cap.
    pub fn check(&self) -> Result<(), SchemaViolation> {
        check_fields(&self.fields, "")?;
        let depth = FieldType::Record(self.fields.clone()).record_depth();
        if depth > MAX_RECORD_DEPTH {
            return Err(SchemaViolation::new(
                "",
                format!("record nesting depth {depth} exceeds {MAX_RECORD_DEPTH}"),
            ));
        }
        Ok(())
    }

    /// True when every field is a series of scalars; such payloads are tables
    /// (columns of equal length) and marshal to CSV.
    pub fn is_tabular(&self) -> bool {
        !self.fields.is_empty()
            && self
                .fields
                .iter()
                .all(|f| matches!(&f.ty, FieldType::Series(inner) if inner.is_scalar()))
    }

    pub fn validate(&self, payload: &Value) -> Result<(), SchemaViolation> {
        self.check()?;
        validate_record(&self.fields, payload, "")?;
        if self.is_tabular() {
            let mut len: Option<(usize, &str)> = None;
            for f in &self.fields {
                if let Some(Value::Array(col)) = payload.get(&f.name) {
                    match len {
                        None => len = Some((col.len(), &f.name)),
                        Some((n, first)) if n != col.len() => {
                            return Err(SchemaViolation::new(
                                &f.name,
                                format!(
                                    "column has {} rows but column {first} has {n}",
                                    col.len()
                                ),
                            ))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(())
    }

    /// Row count of a tabular payload (0 for non-tabular or empty payloads).
    pub fn row_count(&self, payload: &Value) -> usize {
        if !self.is_tabular() {
            return 0;
        }
        self.fields
            .iter()
            .filter_map(|f| payload.get(&f.name).and_then(Value::as_array))
            .map(Vec::len)
            .next()
            .unwrap_or(0)
    }

    /// Human/model-readable rendering used when a schema is embedded in a prompt.
    pub fn describe(&self) -> String {
        let mut out = String::from("{\n");
        for f in &self.fields {
            out.push_str(&format!("  \"{}\": {}", f.name, f.ty));
            if let Some(unit) = &f.unit {
                out.push_str(&format!(" ({unit})"));
            }
            if f.optional {
                out.push_str(" [optional]");
            }
            out.push('\n');
        }
        out.push('}');
        out
    }
}

fn check_fields(fields: &[Field], path: &str) -> Result<(), SchemaViolation> {
    let mut seen = BTreeSet::new();
    for f in fields {
        let here = join(path, &f.name);
        if f.name.is_empty() {
            return Err(SchemaViolation::new(path, "empty field name"));
        }
        if !seen.insert(f.name.as_str()) {
            return Err(SchemaViolation::new(&here, "duplicate field name"));
        }
        check_type(&f.ty, &here)?;
    }
    Ok(())
}

fn check_type(ty: &FieldType, path: &str) -> Result<(), SchemaViolation> {
    match ty {
        FieldType::Series(inner) => check_type(inner, path),
        FieldType::Record(fields) => check_fields(fields, path),
        _ => Ok(()),
    }
}

fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

fn validate_record(fields: &[Field], value: &Value, path: &str) -> Result<(), SchemaViolation> {
    let obj = value
        .as_object()
        .ok_or_else(|| SchemaViolation::new(path, format!("expected record, found {}", kind_of(value))))?;
    for f in fields {
        let here = join(path, &f.name);
        match obj.get(&f.name) {
            None | Some(Value::Null) if f.optional => {}
            None => return Err(SchemaViolation::new(&here, "missing required field")),
            Some(v) => validate_value(&f.ty, v, &here)?,
        }
    }
    for key in obj.keys() {
        if !fields.iter().any(|f| &f.name == key) {
            return Err(SchemaViolation::new(&join(path, key), "field not declared in schema"));
        }
    }
    Ok(())
}

fn validate_value(ty: &FieldType, value: &Value, path: &str) -> Result<(), SchemaViolation> {
    let ok = match ty {
        FieldType::Text => value.is_string(),
        FieldType::Integer => value.is_i64() || value.is_u64(),
        FieldType::Real => value.is_number(),
        FieldType::Boolean => value.is_boolean(),
        FieldType::Timestamp => {
            let s = value.as_str().ok_or_else(|| {
                SchemaViolation::new(path, format!("expected timestamp, found {}", kind_of(value)))
            })?;
            DateTime::parse_from_rfc3339(s)
                .map_err(|e| SchemaViolation::new(path, format!("invalid RFC 3339 timestamp: {e}")))?;
            true
        }
        FieldType::Series(inner) => {
            let items = value.as_array().ok_or_else(|| {
                SchemaViolation::new(path, format!("expected series, found {}", kind_of(value)))
            })?;
            for (i, item) in items.iter().enumerate() {
                validate_value(inner, item, &format!("{path}[{i}]"))?;
            }
            true
        }
        FieldType::Record(fields) => {
            validate_record(fields, value, path)?;
            true
        }
    };
    if ok {
        Ok(())
    } else {
        Err(SchemaViolation::new(
            path,
            format!("expected {ty}, found {}", kind_of(value)),
        ))
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn turbine_schema() -> SchemaDescriptor {
        SchemaDescriptor::new(vec![
            Field::new("turbine_id", FieldType::series(FieldType::Text)),
            Field::new("timestamps", FieldType::series(FieldType::Timestamp)),
            Field::new("power_output", FieldType::series(FieldType::Real)).with_unit("kW"),
        ])
    }

    #[test]
    fn missing_timestamps_column_is_a_violation() {
        let payload = json!({"turbine_id": ["T-01"], "power_output": [1.0]});
        let err = turbine_schema().validate(&payload).unwrap_err();
        assert_eq!(err.path, "timestamps");
    }

    #[test]
    fn ragged_columns_are_rejected() {
        let payload = json!({
            "turbine_id": ["T-01", "T-02"],
            "timestamps": ["2025-08-01T00:00:00Z"],
            "power_output": [1.0, 2.0]
        });
        assert!(turbine_schema().validate(&payload).is_err());
    }

    #[test]
    fn undeclared_fields_are_rejected() {
        let s = SchemaDescriptor::new(vec![Field::new("a", FieldType::Integer)]);
        assert!(s.validate(&json!({"a": 1, "b": 2})).is_err());
        assert!(s.validate(&json!({"a": 1})).is_ok());
        assert!(s.validate(&json!({"a": 1.5})).is_err());
    }

    #[test]
    fn depth_cap() {
        let leaf = FieldType::Record(vec![Field::new("x", FieldType::Text)]);
        let two = FieldType::series(FieldType::Record(vec![Field::new("inner", leaf.clone())]));
        let ok = SchemaDescriptor::new(vec![Field::new("items", two.clone())]);
        assert!(ok.check().is_ok());
        let three = FieldType::Record(vec![Field::new("deeper", two)]);
        let too_deep = SchemaDescriptor::new(vec![Field::new("top", three)]);
        assert!(too_deep.check().is_err());
    }

    #[test]
    fn optional_fields_may_be_absent_or_null() {
        let s = SchemaDescriptor::new(vec![Field::new("note", FieldType::Text).optional()]);
        assert!(s.validate(&json!({})).is_ok());
        assert!(s.validate(&json!({"note": null})).is_ok());
        assert!(s.validate(&json!({"note": 3})).is_err());
    }

    #[test]
    fn schema_document_shape() {
        let s = SchemaDescriptor::new(vec![
            Field::new("ids", FieldType::series(FieldType::Text)),
            Field::new("n", FieldType::Integer).optional(),
        ]);
        let doc = serde_json::to_value(&s).unwrap();
        assert_eq!(
            doc,
            json!({"fields": [
                {"name": "ids", "type": {"series": "text"}},
                {"name": "n", "type": "integer", "optional": true}
            ]})
        );
        let back: SchemaDescriptor = serde_json::from_value(doc).unwrap();
        assert_eq!(back, s);
    }
}
