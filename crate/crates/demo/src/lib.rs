//! Browser bindings: score an EPQR-A or BFI answer document, push one
//! EPQR-A scale to its maximum, and map a free-text attribute to its
//! category. Each export takes and returns JSON text.

use std::str::FromStr;

use serde_json::json;
use wasm_bindgen::prelude::*;

use persona_audit::manipulation::{apply_condition, Condition, ConditionKind};
use persona_audit::normalization::{normalize_value, Attribute, CategoryMaps};
use persona_audit::questionnaire::{parse_answer_document, score, Instrument, Questionnaire};

fn questionnaire(instrument: &str) -> Result<Questionnaire, String> {
    match instrument.to_ascii_lowercase().as_str() {
        "epqra" | "epqr-a" => Ok(Questionnaire::epqra()),
        "bfi" => Ok(Questionnaire::bfi()),
        other => Err(format!("unknown instrument `{other}`")),
    }
}

fn score_document(document: &str, instrument: &str) -> Result<String, String> {
    let q = questionnaire(instrument)?;
    let sheet = parse_answer_document(document, &q, "demo").map_err(|e| e.to_string())?;
    let scores = score(&sheet, &q).map_err(|e| e.to_string())?;
    Ok(json!({ "scores": scores.scores }).to_string())
}

fn maximize_document(document: &str, scale: &str) -> Result<String, String> {
    let kind = match scale.to_ascii_uppercase().as_str() {
        "N" => ConditionKind::MaxN,
        "P" => ConditionKind::MaxP,
        other => return Err(format!("only N or P can be maximized, got `{other}`")),
    };
    let q = Questionnaire::epqra();
    let sheet = parse_answer_document(document, &q, "demo").map_err(|e| e.to_string())?;
    let before = score(&sheet, &q).map_err(|e| e.to_string())?;
    let out = apply_condition(Condition::new(kind, 0), &[sheet], &q).map_err(|e| e.to_string())?;
    let after = score(&out[0], &q).map_err(|e| e.to_string())?;
    let answers: serde_json::Map<String, serde_json::Value> = out[0]
        .answers
        .iter()
        .map(|(id, a)| (id.to_string(), a.document_value().into()))
        .collect();
    Ok(json!({ "answers": answers, "before": before.scores, "after": after.scores }).to_string())
}

fn normalize_text(attribute: &str, raw: &str) -> Result<String, String> {
    let attribute = Attribute::from_str(attribute)?;
    let maps = CategoryMaps::builtin();
    Ok(json!({
        "category": normalize_value(attribute, raw, &maps),
        "categories": maps.get(attribute).categories(),
    })
    .to_string())
}

/// Scores an answer document such as `{"1": "True", ...}`.
#[wasm_bindgen(js_name = scoreAnswers)]
pub fn score_answers(document: &str, instrument: &str) -> Result<String, JsError> {
    score_document(document, instrument).map_err(|e| JsError::new(&e))
}

/// Sets every item of scale `N` or `P` to its keyed answer.
#[wasm_bindgen]
pub fn maximize(document: &str, scale: &str) -> Result<String, JsError> {
    maximize_document(document, scale).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn normalize(attribute: &str, raw: &str) -> Result<String, JsError> {
    normalize_text(attribute, raw).map_err(|e| JsError::new(&e))
}

/// Item texts of an instrument in id order, for building the form.
#[wasm_bindgen]
pub fn items(instrument: &str) -> Result<String, JsError> {
    let q = questionnaire(instrument).map_err(|e| JsError::new(&e))?;
    let list: Vec<_> = q
        .items()
        .iter()
        .map(|i| json!({ "id": i.id, "text": i.text, "scale": i.scale }))
        .collect();
    Ok(serde_json::Value::from(list).to_string())
}

/// Instruments the page can build forms for.
#[wasm_bindgen]
pub fn instruments() -> String {
    json!([Instrument::Epqra.as_str(), Instrument::Bfi.as_str()]).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn example_document() -> String {
        let trues = [3, 8, 14, 15, 16, 20, 24];
        let entries: Vec<String> = (1..=24)
            .map(|i| format!("\"{i}\": \"{}\"", if trues.contains(&i) { "True" } else { "False" }))
            .collect();
        format!("{{{}}}", entries.join(", "))
    }

    #[test]
    fn scores_example() {
        let out: Value = serde_json::from_str(&score_document(&example_document(), "epqra").unwrap()).unwrap();
        assert_eq!(out["scores"], json!({"E": 0.0, "N": 1.0, "P": 2.0, "L": 6.0}));
    }

    #[test]
    fn maximizes_n() {
        let out: Value = serde_json::from_str(&maximize_document(&example_document(), "n").unwrap()).unwrap();
        assert_eq!(out["before"]["N"], 1.0);
        assert_eq!(out["after"]["N"], 6.0);
        assert_eq!(out["after"]["P"], 2.0);
        assert_eq!(out["answers"]["1"], "True");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(maximize_document(&example_document(), "E").is_err());
        assert!(score_document("not json", "epqra").is_err());
        assert!(score_document(&example_document(), "mmpi").is_err());
        assert!(normalize_text("shoe_size", "42").is_err());
    }

    #[test]
    fn normalizes() {
        let out: Value = serde_json::from_str(&normalize_text("gender", "Gender-Fluid").unwrap()).unwrap();
        assert_eq!(out["category"], "Non-binary");
        assert!(out["categories"].as_array().unwrap().contains(&json!("Other")));
    }
}
