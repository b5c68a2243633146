//! Prompt construction. Templates live in `data/prompts/` and are emitted
//! byte-for-byte; only the placeholders are substituted.

use sha2::{Digest, Sha256};

use super::PersonaRecord;
use crate::questionnaire::{AnswerSheet, Instrument, Questionnaire};

pub const PERSONA_TEMPLATE: &str = include_str!("../../data/prompts/persona.txt");
pub const EPQRA_TEMPLATE: &str = include_str!("../../data/prompts/epqra.txt");
pub const BFI_TEMPLATE: &str = include_str!("../../data/prompts/bfi.txt");
pub const EXPECTED_SCHEMA: &str = include_str!("../../data/prompts/expected_schema.json");

/// Preamble placing the persona in the role context of a questionnaire
/// prompt.
const PERSONA_CONTEXT_HEADER: &str =
    "You are the following person. Answer every question as this person would.\n\n**Persona:**\n\n";

/// Pretty-prints a flat JSON object with string values, preserving key
/// order (two-space indent, matching the templates).
pub fn json_object(entries: &[(String, String)]) -> String {
    if entries.is_empty() {
        return "{}".to_string();
    }
    let body = entries
        .iter()
        .map(|(k, v)| {
            format!(
                "  {}: {}",
                serde_json::to_string(k).expect("string serializes"),
                serde_json::to_string(v).expect("string serializes")
            )
        })
        .collect::<Vec<_>>()
        .join(",\n");
    format!("{{\n{body}\n}}")
}

/// Hex SHA-256 of the exact prompt bytes.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// The persona-generation prompt: the fixed instructions with the schema
/// substituted, followed by the respondent's answers keyed by question text.
pub fn build_persona_prompt(sheet: &AnswerSheet, q: &Questionnaire) -> String {
    let data: Vec<(String, String)> = q
        .items()
        .iter()
        .filter_map(|item| sheet.answer(item.id).map(|a| (item.text.clone(), a.document_value())))
        .collect();
    let instructions = PERSONA_TEMPLATE.replace("{expected_schema}", EXPECTED_SCHEMA.trim_end());
    format!("{instructions}\nData:\n{}\n", json_object(&data))
}

/// The questionnaire prompt for `q`, answered in the role of `persona`.
pub fn build_questionnaire_prompt(persona: &PersonaRecord, q: &Questionnaire) -> String {
    let items: Vec<(String, String)> = q.items().iter().map(|i| (i.id.to_string(), i.text.clone())).collect();
    let template = match q.instrument() {
        Instrument::Epqra => EPQRA_TEMPLATE,
        Instrument::Bfi => BFI_TEMPLATE,
    };
    let body = template.replace("{questionnaire}", &json_object(&items));
    format!("{PERSONA_CONTEXT_HEADER}{}\n\n{body}", persona.to_document())
}
