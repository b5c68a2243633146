//! Instrument definitions, answer sheets and scoring.
//!
//! Two instruments are supported: the 24-item EPQR-A (dichotomous answers,
//! scales E/N/P/L with six items each) and the 44-item BFI (Likert 1-5,
//! scales E/N/A/C/O). Item banks are JSON data files; the default banks are
//! compiled into the crate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::generation::extract::{extract_document, ExtractError};

pub type ItemId = u32;

const EPQRA_BANK: &str = include_str!("../data/epqra.json");
const BFI_BANK: &str = include_str!("../data/bfi.json");

pub const ITEM_BANK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum QuestionnaireError {
    #[error("failed to read item bank: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed item bank: {0}")]
    Malformed(String),
    #[error("invalid item bank field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("answer sheet is for {sheet} but questionnaire is {questionnaire}")]
    InstrumentMismatch {
        sheet: Instrument,
        questionnaire: Instrument,
    },
    #[error("missing item {0}")]
    MissingItem(ItemId),
    #[error("unexpected item {0}")]
    ExtraItem(ItemId),
    #[error("duplicate answer for item {0}")]
    DuplicateItem(ItemId),
    #[error("item {item}: {message}")]
    InvalidAnswer { item: ItemId, message: String },
    #[error(transparent)]
    Extraction(#[from] ExtractError),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> QuestionnaireError {
    QuestionnaireError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Instrument {
    #[serde(rename = "EPQRA", alias = "epqra", alias = "EPQR-A")]
    Epqra,
    #[serde(rename = "BFI", alias = "bfi")]
    Bfi,
}

impl Instrument {
    pub const ALL: [Instrument; 2] = [Instrument::Epqra, Instrument::Bfi];

    pub fn item_count(self) -> usize {
        match self {
            Instrument::Epqra => 24,
            Instrument::Bfi => 44,
        }
    }

    /// Scale labels in reporting order.
    pub fn scale_labels(self) -> &'static [&'static str] {
        match self {
            Instrument::Epqra => &["E", "N", "P", "L"],
            Instrument::Bfi => &["E", "N", "A", "C", "O"],
        }
    }

    pub fn response_domain(self) -> ResponseDomain {
        match self {
            Instrument::Epqra => ResponseDomain::Dichotomous,
            Instrument::Bfi => ResponseDomain::Likert1To5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Instrument::Epqra => "EPQRA",
            Instrument::Bfi => "BFI",
        }
    }
}

impl fmt::Display for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Instrument {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "epqra" => Ok(Instrument::Epqra),
            "bfi" => Ok(Instrument::Bfi),
            other => Err(format!("unknown instrument `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseDomain {
    Dichotomous,
    #[serde(rename = "likert_1_to_5")]
    Likert1To5,
}

/// How an item contributes to its scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keying {
    /// The literal answer that scores one point.
    Dichotomous(bool),
    /// Likert item; reversed items score `6 - value`.
    Likert { reversed: bool },
}

impl Keying {
    fn parse(raw: &str) -> Option<Keying> {
        match raw {
            "true" => Some(Keying::Dichotomous(true)),
            "false" => Some(Keying::Dichotomous(false)),
            "+" => Some(Keying::Likert { reversed: false }),
            "-" => Some(Keying::Likert { reversed: true }),
            _ => None,
        }
    }

    fn code(self) -> &'static str {
        match self {
            Keying::Dichotomous(true) => "true",
            Keying::Dichotomous(false) => "false",
            Keying::Likert { reversed: false } => "+",
            Keying::Likert { reversed: true } => "-",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub id: ItemId,
    pub text: String,
    pub scale: String,
    pub keyed: Keying,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scale {
    pub label: String,
    pub items: Vec<ItemId>,
}

/// A validated instrument. Items are stored in id order, scales in the
/// instrument's reporting order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Questionnaire {
    instrument: Instrument,
    items: Vec<Item>,
    scales: Vec<Scale>,
}

#[derive(Serialize, Deserialize)]
struct RawItem {
    id: ItemId,
    text: String,
    scale: String,
    keyed: String,
}

#[derive(Serialize, Deserialize)]
struct RawBank {
    format_version: u32,
    instrument: Instrument,
    response_domain: ResponseDomain,
    scales: BTreeMap<String, Vec<ItemId>>,
    items: Vec<RawItem>,
}

impl Questionnaire {
    /// The compiled-in item bank for `instrument`.
    pub fn builtin(instrument: Instrument) -> Questionnaire {
        let text = match instrument {
            Instrument::Epqra => EPQRA_BANK,
            Instrument::Bfi => BFI_BANK,
        };
        Self::from_json(text).expect("compiled-in item bank is valid")
    }

    pub fn epqra() -> Questionnaire {
        Self::builtin(Instrument::Epqra)
    }

    pub fn bfi() -> Questionnaire {
        Self::builtin(Instrument::Bfi)
    }

    pub fn from_json(text: &str) -> Result<Questionnaire, QuestionnaireError> {
        let raw: RawBank = serde_json::from_str(text).map_err(|e| QuestionnaireError::Malformed(e.to_string()))?;
        Self::validate(raw)
    }

    fn validate(raw: RawBank) -> Result<Questionnaire, QuestionnaireError> {
        if raw.format_version != ITEM_BANK_FORMAT_VERSION {
            return Err(invalid(
                "format_version",
                format!("unsupported version {}", raw.format_version),
            ));
        }
        let instrument = raw.instrument;
        if raw.response_domain != instrument.response_domain() {
            return Err(invalid(
                "response_domain",
                format!("{instrument} requires {:?}", instrument.response_domain()),
            ));
        }
        let count = instrument.item_count();

        let mut seen = BTreeSet::new();
        let mut items = Vec::with_capacity(raw.items.len());
        for it in raw.items {
            if it.id == 0 || it.id as usize > count {
                return Err(invalid("items.id", format!("id {} outside 1..={count}", it.id)));
            }
            if !seen.insert(it.id) {
                return Err(invalid("items.id", format!("duplicate id {}", it.id)));
            }
            if !instrument.scale_labels().contains(&it.scale.as_str()) {
                return Err(invalid(
                    "items.scale",
                    format!("unknown scale `{}` on item {}", it.scale, it.id),
                ));
            }
            let keyed = Keying::parse(&it.keyed)
                .filter(|k| {
                    matches!(
                        (k, instrument.response_domain()),
                        (Keying::Dichotomous(_), ResponseDomain::Dichotomous)
                            | (Keying::Likert { .. }, ResponseDomain::Likert1To5)
                    )
                })
                .ok_or_else(|| invalid("items.keyed", format!("bad keying `{}` on item {}", it.keyed, it.id)))?;
            if it.text.trim().is_empty() {
                return Err(invalid("items.text", format!("empty text on item {}", it.id)));
            }
            items.push(Item {
                id: it.id,
                text: it.text,
                scale: it.scale,
                keyed,
            });
        }
        if items.len() != count {
            let missing: Vec<_> = (1..=count as ItemId).filter(|i| !seen.contains(i)).collect();
            return Err(invalid(
                "items",
                format!("expected {count} items, found {} (missing {missing:?})", items.len()),
            ));
        }
        items.sort_by_key(|i| i.id);

        for label in raw.scales.keys() {
            if !instrument.scale_labels().contains(&label.as_str()) {
                return Err(invalid("scales", format!("unknown scale `{label}`")));
            }
        }
        let mut assigned = BTreeSet::new();
        let mut scales = Vec::new();
        for &label in instrument.scale_labels() {
            let ids = raw
                .scales
                .get(label)
                .ok_or_else(|| invalid("scales", format!("missing scale `{label}`")))?;
            for &id in ids {
                let item = items
                    .get((id as usize).wrapping_sub(1))
                    .ok_or_else(|| invalid("scales", format!("scale `{label}` lists unknown item {id}")))?;
                if item.scale != label {
                    return Err(invalid(
                        "scales",
                        format!("item {id} listed under `{label}` but tagged `{}`", item.scale),
                    ));
                }
                if !assigned.insert(id) {
                    return Err(invalid("scales", format!("item {id} listed twice")));
                }
            }
            if instrument == Instrument::Epqra && ids.len() != 6 {
                return Err(invalid(
                    "scales",
                    format!("scale `{label}` has {} items, expected 6", ids.len()),
                ));
            }
            let mut ids = ids.clone();
            ids.sort_unstable();
            scales.push(Scale {
                label: label.to_string(),
                items: ids,
            });
        }
        if assigned.len() != count {
            let orphan: Vec<_> = (1..=count as ItemId).filter(|i| !assigned.contains(i)).collect();
            return Err(invalid("scales", format!("items not assigned to a scale: {orphan:?}")));
        }

        Ok(Questionnaire {
            instrument,
            items,
            scales,
        })
    }

    /// Serializes back to the item-bank file format.
    pub fn to_json(&self) -> String {
        let raw = RawBank {
            format_version: ITEM_BANK_FORMAT_VERSION,
            instrument: self.instrument,
            response_domain: self.instrument.response_domain(),
            scales: self.scales.iter().map(|s| (s.label.clone(), s.items.clone())).collect(),
            items: self
                .items
                .iter()
                .map(|i| RawItem {
                    id: i.id,
                    text: i.text.clone(),
                    scale: i.scale.clone(),
                    keyed: i.keyed.code().to_string(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("item bank serializes")
    }

    pub fn instrument(&self) -> Instrument {
        self.instrument
    }

    pub fn response_domain(&self) -> ResponseDomain {
        self.instrument.response_domain()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: ItemId) -> Option<&Item> {
        self.items.get((id as usize).checked_sub(1)?)
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn scales(&self) -> &[Scale] {
        &self.scales
    }

    pub fn scale(&self, label: &str) -> Option<&Scale> {
        self.scales.iter().find(|s| s.label == label)
    }

    /// Contribution of one answer to its scale: 0/1 for dichotomous items,
    /// the (reverse-)keyed 1-5 value for Likert items.
    pub fn keyed_value(&self, id: ItemId, answer: Answer) -> Option<f64> {
        let item = self.item(id)?;
        match (item.keyed, answer) {
            (Keying::Dichotomous(k), Answer::Bool(b)) => Some(if k == b { 1.0 } else { 0.0 }),
            (Keying::Likert { reversed }, Answer::Likert(v)) if (1..=5).contains(&v) => {
                Some(if reversed { 6 - v } else { v } as f64)
            }
            _ => None,
        }
    }

    /// Checks completeness and answer domain of `sheet`.
    pub fn check_sheet(&self, sheet: &AnswerSheet) -> Result<(), QuestionnaireError> {
        if sheet.instrument != self.instrument {
            return Err(QuestionnaireError::InstrumentMismatch {
                sheet: sheet.instrument,
                questionnaire: self.instrument,
            });
        }
        if let Some(&extra) = sheet.answers.keys().find(|&&id| self.item(id).is_none()) {
            return Err(QuestionnaireError::ExtraItem(extra));
        }
        for item in &self.items {
            let answer = *sheet
                .answers
                .get(&item.id)
                .ok_or(QuestionnaireError::MissingItem(item.id))?;
            if self.keyed_value(item.id, answer).is_none() {
                return Err(QuestionnaireError::InvalidAnswer {
                    item: item.id,
                    message: format!("{answer} is outside the {:?} domain", self.response_domain()),
                });
            }
        }
        Ok(())
    }
}

/// Loads and validates an item bank from disk.
pub fn load_item_bank(instrument: Instrument, path: &Path) -> Result<Questionnaire, QuestionnaireError> {
    let text = std::fs::read_to_string(path)?;
    let q = Questionnaire::from_json(&text)?;
    if q.instrument != instrument {
        return Err(invalid(
            "instrument",
            format!("file declares {} but {instrument} was requested", q.instrument),
        ));
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Answer {
    Bool(bool),
    Likert(u8),
}

impl Answer {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Answer::Bool(b) => Some(b),
            Answer::Likert(_) => None,
        }
    }

    /// Parses a single answer value for `domain`. Booleans accept JSON
    /// literals and case-insensitive "true"/"false" strings; Likert values
    /// accept integers and digit strings.
    pub fn from_json(value: &Value, domain: ResponseDomain) -> Result<Answer, String> {
        match domain {
            ResponseDomain::Dichotomous => match value {
                Value::Bool(b) => Ok(Answer::Bool(*b)),
                Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
                    "true" => Ok(Answer::Bool(true)),
                    "false" => Ok(Answer::Bool(false)),
                    _ => Err(format!("expected \"True\" or \"False\", got {value}")),
                },
                _ => Err(format!("expected \"True\" or \"False\", got {value}")),
            },
            ResponseDomain::Likert1To5 => {
                let n = match value {
                    Value::Number(n) => n.as_u64(),
                    Value::String(s) => s.trim().parse::<u64>().ok(),
                    _ => None,
                };
                match n {
                    Some(v @ 1..=5) => Ok(Answer::Likert(v as u8)),
                    _ => Err(format!("expected a rating from 1 to 5, got {value}")),
                }
            }
        }
    }

    /// The value written into answer documents: "True"/"False" or "1".."5".
    pub fn document_value(self) -> String {
        match self {
            Answer::Bool(true) => "True".to_string(),
            Answer::Bool(false) => "False".to_string(),
            Answer::Likert(v) => v.to_string(),
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Bool(b) => write!(f, "{b}"),
            Answer::Likert(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Answer::Bool(b) => s.serialize_bool(*b),
            Answer::Likert(v) => s.serialize_u8(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        let domain = match &value {
            Value::Number(_) => ResponseDomain::Likert1To5,
            Value::String(s) if s.trim().chars().all(|c| c.is_ascii_digit()) => ResponseDomain::Likert1To5,
            _ => ResponseDomain::Dichotomous,
        };
        Answer::from_json(&value, domain).map_err(serde::de::Error::custom)
    }
}

/// One respondent's answers to one instrument.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSheet {
    pub respondent_id: String,
    pub instrument: Instrument,
    pub answers: BTreeMap<ItemId, Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

impl AnswerSheet {
    pub fn new(
        respondent_id: impl Into<String>,
        instrument: Instrument,
        answers: BTreeMap<ItemId, Answer>,
    ) -> AnswerSheet {
        AnswerSheet {
            respondent_id: respondent_id.into(),
            instrument,
            answers,
            explanation: None,
        }
    }

    /// Builds a dichotomous sheet from answers to items 1..=n in order.
    pub fn from_bools(respondent_id: impl Into<String>, instrument: Instrument, answers: &[bool]) -> AnswerSheet {
        let answers = answers
            .iter()
            .enumerate()
            .map(|(i, &b)| (i as ItemId + 1, Answer::Bool(b)))
            .collect();
        AnswerSheet::new(respondent_id, instrument, answers)
    }

    pub fn answer(&self, id: ItemId) -> Option<Answer> {
        self.answers.get(&id).copied()
    }

    /// Renders the sheet in the questionnaire response format: question
    /// numbers as keys, "True"/"False" (or "1".."5") as values, followed by
    /// an optional "explanation".
    pub fn to_document(&self) -> String {
        let mut entries: Vec<(String, String)> = self
            .answers
            .iter()
            .map(|(id, a)| (id.to_string(), a.document_value()))
            .collect();
        if let Some(explanation) = &self.explanation {
            entries.push(("explanation".to_string(), explanation.clone()));
        }
        crate::generation::prompt::json_object(&entries)
    }
}

/// Per-scale scores for one sheet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleScores {
    pub instrument: Instrument,
    pub scores: BTreeMap<String, f64>,
}

impl ScaleScores {
    pub fn get(&self, scale: &str) -> Option<f64> {
        self.scores.get(scale).copied()
    }
}

/// Scores `sheet`: EPQR-A scales are counts of keyed answers (0-6), BFI
/// scales are means of keyed item values (1-5).
pub fn score(sheet: &AnswerSheet, q: &Questionnaire) -> Result<ScaleScores, QuestionnaireError> {
    q.check_sheet(sheet)?;
    let scores = q
        .scales()
        .iter()
        .map(|scale| {
            let values = scale.items.iter().map(|&id| {
                q.keyed_value(id, sheet.answers[&id])
                    .expect("sheet checked against questionnaire")
            });
            let total: f64 = values.sum();
            let value = match q.response_domain() {
                ResponseDomain::Dichotomous => total,
                ResponseDomain::Likert1To5 => total / scale.items.len() as f64,
            };
            (scale.label.clone(), value)
        })
        .collect();
    Ok(ScaleScores {
        instrument: q.instrument(),
        scores,
    })
}

/// Parses a questionnaire response (possibly wrapped in prose or code
/// fences) into a complete answer sheet.
pub fn parse_answer_document(
    text: &str,
    q: &Questionnaire,
    respondent_id: &str,
) -> Result<AnswerSheet, QuestionnaireError> {
    let doc = extract_document(text)?;
    let mut answers = BTreeMap::new();
    let mut explanation = None;
    for (key, value) in doc.entries() {
        let key = key.trim();
        if key.eq_ignore_ascii_case("explanation") {
            explanation = Some(match value {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            });
            continue;
        }
        let Ok(id) = key.parse::<ItemId>() else {
            // Stray keys such as "..." copied from the example format.
            continue;
        };
        if q.item(id).is_none() {
            return Err(QuestionnaireError::ExtraItem(id));
        }
        let answer = Answer::from_json(value, q.response_domain())
            .map_err(|message| QuestionnaireError::InvalidAnswer { item: id, message })?;
        if answers.insert(id, answer).is_some() {
            return Err(QuestionnaireError::DuplicateItem(id));
        }
    }
    if let Some(missing) = q.items().iter().map(|i| i.id).find(|id| !answers.contains_key(id)) {
        return Err(QuestionnaireError::MissingItem(missing));
    }
    Ok(AnswerSheet {
        respondent_id: respondent_id.to_string(),
        instrument: q.instrument(),
        answers,
        explanation,
    })
}
