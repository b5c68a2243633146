//! Persona generation and questionnaire administration through a pluggable
//! text-completion backend.
//!
//! Every backend call goes through [`Generator`], which builds the prompt,
//! consults the [`ResponseCache`], retries on transport and schema failures
//! and returns a [`GenerationRecord`] whether or not the call succeeded.

pub mod cache;
pub mod extract;
#[cfg(feature = "http")]
pub mod http;
pub mod mock;
pub mod prompt;

use std::fmt;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use cache::{CacheKey, ResponseCache};
pub use extract::{extract_document, Document, ExtractError};
pub use prompt::{build_persona_prompt, build_questionnaire_prompt, prompt_hash};

use crate::questionnaire::{parse_answer_document, AnswerSheet, Instrument, Questionnaire};

/// The structured persona requested by the generation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaRecord {
    pub name: String,
    pub age: u32,
    pub gender: String,
    pub sexual_orientation: String,
    pub race: String,
    pub ethnicity: String,
    pub religious_belief: String,
    pub occupation: String,
    pub political_orientation: String,
    pub location: String,
    pub description: String,
}

/// Attributes audited for demographic bias (age is handled separately).
pub const AUDITED_TEXT_FIELDS: [&str; 7] = [
    "gender",
    "sexual_orientation",
    "race",
    "religious_belief",
    "occupation",
    "political_orientation",
    "location",
];

const STRING_FIELDS: [&str; 10] = [
    "name",
    "gender",
    "sexual_orientation",
    "race",
    "ethnicity",
    "religious_belief",
    "occupation",
    "political_orientation",
    "location",
    "description",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` has wrong type: {found}")]
    WrongType { field: &'static str, found: String },
    #[error("field `{0}` is empty")]
    Empty(&'static str),
    #[error("age must be a positive integer, got {0}")]
    InvalidAge(String),
}

impl PersonaRecord {
    /// Validates a parsed document against the persona schema. Field
    /// presence and types are strict; vocabulary is not checked here.
    pub fn from_document(doc: &Document) -> Result<PersonaRecord, SchemaError> {
        let text = |field: &'static str| -> Result<String, SchemaError> {
            match doc.get(field) {
                None => Err(SchemaError::MissingField(field)),
                Some(Value::String(s)) => {
                    if s.trim().is_empty() && field != "ethnicity" {
                        Err(SchemaError::Empty(field))
                    } else {
                        Ok(s.trim().to_string())
                    }
                }
                Some(Value::Null) if field == "ethnicity" => Ok(String::new()),
                Some(other) => Err(SchemaError::WrongType {
                    field,
                    found: other.to_string(),
                }),
            }
        };
        let age = match doc.get("age") {
            None => return Err(SchemaError::MissingField("age")),
            Some(Value::Number(n)) => n
                .as_u64()
                .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0 && *f >= 0.0).map(|f| f as u64)),
            Some(Value::String(s)) => s.trim().parse::<u64>().ok(),
            Some(_) => None,
        };
        let age = match age {
            Some(a) if a > 0 && a <= u32::MAX as u64 => a as u32,
            _ => return Err(SchemaError::InvalidAge(doc.get("age").unwrap().to_string())),
        };
        let mut fields = STRING_FIELDS.iter().map(|f| text(f));
        let mut next = || fields.next().expect("ten string fields");
        Ok(PersonaRecord {
            name: next()?,
            gender: next()?,
            sexual_orientation: next()?,
            race: next()?,
            ethnicity: next()?,
            religious_belief: next()?,
            occupation: next()?,
            political_orientation: next()?,
            location: next()?,
            description: next()?,
            age,
        })
    }

    /// Pretty JSON in schema field order.
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("persona serializes")
    }

    pub fn attribute(&self, field: &str) -> Option<&str> {
        Some(match field {
            "name" => &self.name,
            "gender" => &self.gender,
            "sexual_orientation" => &self.sexual_orientation,
            "race" => &self.race,
            "ethnicity" => &self.ethnicity,
            "religious_belief" => &self.religious_belief,
            "occupation" => &self.occupation,
            "political_orientation" => &self.political_orientation,
            "location" => &self.location,
            "description" => &self.description,
            _ => return None,
        })
    }
}

/// Parses a raw model response into a persona.
pub fn parse_persona(raw: &str) -> Result<PersonaRecord, GenerationError> {
    let doc = extract_document(raw)?;
    Ok(PersonaRecord::from_document(&doc)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Mock,
}

/// Connection and sampling settings for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: f64,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    /// First transport-retry delay; doubles on each further attempt.
    pub backoff_base_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            base_url: "https://api.openai.com/v1".to_string(),
            model_id: "mock".to_string(),
            temperature: 1.0,
            max_retries: 3,
            timeout_secs: 120.0,
            api_key_env: Some("OPENAI_API_KEY".to_string()),
            backoff_base_ms: 500,
        }
    }
}

impl BackendConfig {
    pub fn mock(model_id: impl Into<String>) -> BackendConfig {
        BackendConfig {
            model_id: model_id.into(),
            backoff_base_ms: 0,
            ..BackendConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(format!("timeout must be positive, got {}", self.timeout_secs));
        }
        if self.model_id.trim().is_empty() {
            return Err("model_id is empty".to_string());
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(10);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

/// Per-call parameters handed to a backend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletionParams<'a> {
    pub model_id: &'a str,
    pub temperature: f64,
    /// 1-based attempt number within one generation.
    pub attempt: u32,
    /// Index of the independent sample (trial) this call belongs to.
    pub sample: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Network failure, timeout, rate limit or server error; retried with backoff.
    #[error("transport error: {0}")]
    Transport(String),
    /// Not worth retrying (bad request, missing fixture, missing credentials).
    #[error("backend error: {0}")]
    Fatal(String),
}

/// A text-completion service: prompt in, raw text out.
pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &str, params: &CompletionParams<'_>) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, prompt: &str, params: &CompletionParams<'_>) -> Result<String, BackendError> {
        (**self).complete(prompt, params)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, prompt: &str, params: &CompletionParams<'_>) -> Result<String, BackendError> {
        (**self).complete(prompt, params)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("could not extract JSON: {0}")]
    Extract(#[from] ExtractError),
    #[error("persona schema violation: {0}")]
    Schema(#[from] SchemaError),
    #[error("invalid questionnaire response: {0}")]
    Answers(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task", content = "instrument")]
pub enum Task {
    Persona,
    Questionnaire(Instrument),
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Persona => f.write_str("persona"),
            Task::Questionnaire(i) => write!(f, "questionnaire:{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Parsed {
    Persona(PersonaRecord),
    Sheet(AnswerSheet),
}

/// Audit trail for one generation, successful or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub respondent_id: String,
    #[serde(flatten)]
    pub task: Task,
    pub model_id: String,
    pub prompt_hash: String,
    pub status: Status,
    pub attempts: u32,
    /// Final raw response, if any call returned text.
    pub raw_response: Option<String>,
    /// Every raw response received, in attempt order.
    pub responses: Vec<String>,
    pub errors: Vec<String>,
    pub parsed: Option<Parsed>,
    pub timestamp_ms: u64,
}

/// A generation that exhausted its retries. The record is still returned so
/// it can be persisted.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{} for {} failed after {} attempts: {error}", record.task, record.respondent_id, record.attempts)]
pub struct GenerationFailure {
    pub error: GenerationError,
    pub record: GenerationRecord,
}

pub type GenerationResult<T> = Result<(T, GenerationRecord), Box<GenerationFailure>>;

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Binds a backend, its configuration, an optional cache and a sample index.
pub struct Generator<'a> {
    pub backend: &'a dyn Backend,
    pub config: &'a BackendConfig,
    pub cache: Option<&'a ResponseCache>,
    pub sample: u64,
}

impl<'a> Generator<'a> {
    pub fn new(backend: &'a dyn Backend, config: &'a BackendConfig) -> Generator<'a> {
        Generator {
            backend,
            config,
            cache: None,
            sample: 0,
        }
    }

    pub fn with_cache(mut self, cache: &'a ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_sample(mut self, sample: u64) -> Self {
        self.sample = sample;
        self
    }

    /// Asks the backend for a persona matching `sheet`.
    pub fn generate_persona(&self, sheet: &AnswerSheet, q: &Questionnaire) -> GenerationResult<PersonaRecord> {
        let prompt = build_persona_prompt(sheet, q);
        self.run(&sheet.respondent_id, Task::Persona, &prompt, |raw| {
            parse_persona(raw).map(|p| (p.clone(), Parsed::Persona(p)))
        })
    }

    /// Has the backend answer `q` in the role of `persona`.
    pub fn administer_questionnaire(
        &self,
        respondent_id: &str,
        persona: &PersonaRecord,
        q: &Questionnaire,
    ) -> GenerationResult<AnswerSheet> {
        let prompt = build_questionnaire_prompt(persona, q);
        self.run(respondent_id, Task::Questionnaire(q.instrument()), &prompt, |raw| {
            parse_answer_document(raw, q, respondent_id)
                .map(|s| (s.clone(), Parsed::Sheet(s)))
                .map_err(|e| GenerationError::Answers(e.to_string()))
        })
    }

    fn run<T>(
        &self,
        respondent_id: &str,
        task: Task,
        prompt: &str,
        parse: impl Fn(&str) -> Result<(T, Parsed), GenerationError>,
    ) -> GenerationResult<T> {
        let hash = prompt_hash(prompt);
        let mut record = GenerationRecord {
            respondent_id: respondent_id.to_string(),
            task,
            model_id: self.config.model_id.clone(),
            prompt_hash: hash.clone(),
            status: Status::Failure,
            attempts: 0,
            raw_response: None,
            responses: Vec::new(),
            errors: Vec::new(),
            parsed: None,
            timestamp_ms: 0,
        };
        let mut last_error = GenerationError::Backend(BackendError::Fatal("no attempt made".into()));

        for attempt in 1..=self.config.max_retries + 1 {
            record.attempts = attempt;
            let key = CacheKey::new(
                &self.config.model_id,
                &hash,
                self.config.temperature,
                attempt,
                self.sample,
            );
            let text = match self.cache.and_then(|c| c.get(&key)) {
                Some(hit) => hit,
                None => {
                    let params = CompletionParams {
                        model_id: &self.config.model_id,
                        temperature: self.config.temperature,
                        attempt,
                        sample: self.sample,
                    };
                    match self.backend.complete(prompt, &params) {
                        Ok(text) => {
                            if let Some(cache) = self.cache {
                                if let Err(e) = cache.put(key, &text) {
                                    log::warn!("response cache append failed: {e}");
                                }
                            }
                            text
                        }
                        Err(err) => {
                            record.errors.push(err.to_string());
                            let fatal = matches!(err, BackendError::Fatal(_));
                            last_error = err.into();
                            if fatal {
                                break;
                            }
                            if attempt <= self.config.max_retries {
                                std::thread::sleep(self.config.backoff(attempt));
                            }
                            continue;
                        }
                    }
                }
            };
            record.responses.push(text.clone());
            record.raw_response = Some(text.clone());
            match parse(&text) {
                Ok((value, parsed)) => {
                    record.status = Status::Success;
                    record.parsed = Some(parsed);
                    record.timestamp_ms = now_ms();
                    return Ok((value, record));
                }
                Err(err) => {
                    record.errors.push(err.to_string());
                    last_error = err;
                }
            }
        }
        record.timestamp_ms = now_ms();
        Err(Box::new(GenerationFailure {
            error: last_error,
            record,
        }))
    }
}
