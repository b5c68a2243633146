//! Locating a JSON object inside free-form model output.

use std::fmt;

use serde::de::{Deserialize, Deserializer, MapAccess, Visitor};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExtractError {
    #[error("no balanced JSON object found in response")]
    NoObject { raw: String },
    #[error("malformed JSON object: {message}")]
    Malformed { message: String, raw: String },
}

impl ExtractError {
    pub fn raw(&self) -> &str {
        match self {
            ExtractError::NoObject { raw } | ExtractError::Malformed { raw, .. } => raw,
        }
    }
}

/// A top-level JSON object with its keys in document order. Duplicate keys
/// are kept, so callers can reject them.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    entries: Vec<(String, Value)>,
}

impl Document {
    pub fn entries(&self) -> &[(String, Value)] {
        &self.entries
    }

    /// First value stored under `key`.
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Collapses into a `serde_json` object; later duplicates win.
    pub fn into_value(self) -> Value {
        Value::Object(self.entries.into_iter().collect::<Map<_, _>>())
    }
}

impl<'de> Deserialize<'de> for Document {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = Document;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Document, A::Error> {
                let mut entries = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(Document { entries })
            }
        }

        d.deserialize_map(EntriesVisitor)
    }
}

/// Byte span of the balanced `{ ... }` starting at `start`, honouring
/// string literals and escapes.
fn balanced_span(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + offset + c.len_utf8());
                }
            }
            _ => {}
        }
    }
    None
}

/// Finds and parses the first balanced top-level object in `raw`. Code
/// fences and surrounding prose are skipped; when a candidate fails to
/// parse, scanning resumes after its opening brace.
pub fn extract_document(raw: &str) -> Result<Document, ExtractError> {
    let mut first_error = None;
    let mut cursor = 0;
    while let Some(rel) = raw[cursor..].find('{') {
        let start = cursor + rel;
        match balanced_span(raw, start) {
            Some(end) => match serde_json::from_str::<Document>(&raw[start..end]) {
                Ok(doc) => return Ok(doc),
                Err(e) => {
                    first_error.get_or_insert_with(|| e.to_string());
                }
            },
            None if first_error.is_none() => {
                first_error = Some("unterminated object".to_string());
            }
            None => {}
        }
        cursor = start + 1;
    }
    match first_error {
        Some(message) => Err(ExtractError::Malformed {
            message,
            raw: raw.to_string(),
        }),
        None => Err(ExtractError::NoObject { raw: raw.to_string() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn strips_code_fences() {
        let doc = extract_document("```json\n{\"a\":1}\n```").unwrap();
        assert_eq!(doc.into_value(), json!({"a": 1}));
    }

    #[test]
    fn strips_prose() {
        let doc = extract_document("Sure! {\"a\":1} hope this helps").unwrap();
        assert_eq!(doc.into_value(), json!({"a": 1}));
    }

    #[test]
    fn keeps_nested_objects() {
        let doc = extract_document("{\"a\":{\"b\":2}}").unwrap();
        assert_eq!(doc.into_value(), json!({"a": {"b": 2}}));
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_matching() {
        let doc = extract_document(r#"x {"a":"}{", "b":"\"}"} y"#).unwrap();
        assert_eq!(doc.into_value(), json!({"a": "}{", "b": "\"}"}));
    }

    #[test]
    fn skips_non_json_brace_groups() {
        let doc = extract_document("use {name} here: {\"name\": \"Ada\"}").unwrap();
        assert_eq!(doc.get("name"), Some(&json!("Ada")));
    }

    #[test]
    fn keeps_duplicate_keys_in_order() {
        let doc = extract_document(r#"{"1":"True","1":"False"}"#).unwrap();
        assert_eq!(doc.keys().collect::<Vec<_>>(), vec!["1", "1"]);
    }

    #[test]
    fn errors_carry_raw_text() {
        let err = extract_document("no json here").unwrap_err();
        assert!(matches!(err, ExtractError::NoObject { .. }));
        assert_eq!(err.raw(), "no json here");

        let err = extract_document("{\"a\": tru}").unwrap_err();
        assert!(matches!(err, ExtractError::Malformed { .. }));
        assert_eq!(err.raw(), "{\"a\": tru}");

        assert!(matches!(
            extract_document("{\"a\": 1"),
            Err(ExtractError::Malformed { .. })
        ));
    }
}
