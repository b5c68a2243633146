//! Offline backends: closures, fixture replay and a rule-based simulator.

use std::collections::HashMap;
use std::io::{self, BufRead};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::extract::extract_document;
use super::prompt::{json_object, prompt_hash};
use super::{Backend, BackendError, CompletionParams};
use crate::questionnaire::{Instrument, Keying, Questionnaire};

/// Wraps a closure as a backend.
pub struct FnBackend<F> {
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&str, &CompletionParams<'_>) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        FnBackend { f }
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&str, &CompletionParams<'_>) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, prompt: &str, params: &CompletionParams<'_>) -> Result<String, BackendError> {
        (self.f)(prompt, params)
    }
}

/// Counts calls reaching the wrapped backend.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: Backend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for CountingBackend<B> {
    fn complete(&self, prompt: &str, params: &CompletionParams<'_>) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt, params)
    }
}

/// One line of a fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureLine {
    pub prompt_hash: String,
    pub response_text: String,
}

impl FixtureLine {
    pub fn for_prompt(prompt: &str, response_text: impl Into<String>) -> FixtureLine {
        FixtureLine {
            prompt_hash: prompt_hash(prompt),
            response_text: response_text.into(),
        }
    }
}

/// Replays recorded responses by prompt hash. Repeated lines for the same
/// hash serve successive attempts; the last one repeats.
#[derive(Debug, Clone, Default)]
pub struct FixtureBackend {
    responses: HashMap<String, Vec<String>>,
}

impl FixtureBackend {
    pub fn from_lines(lines: impl IntoIterator<Item = FixtureLine>) -> Self {
        let mut responses: HashMap<String, Vec<String>> = HashMap::new();
        for line in lines {
            responses.entry(line.prompt_hash).or_default().push(line.response_text);
        }
        FixtureBackend { responses }
    }

    pub fn from_jsonl(text: &str) -> io::Result<Self> {
        let mut lines = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: FixtureLine = serde_json::from_str(line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("fixture line {}: {e}", n + 1)))?;
            lines.push(parsed);
        }
        Ok(Self::from_lines(lines))
    }

    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut text = String::new();
        for line in io::BufReader::new(file).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Backend for FixtureBackend {
    fn complete(&self, prompt: &str, params: &CompletionParams<'_>) -> Result<String, BackendError> {
        let hash = prompt_hash(prompt);
        let list = self
            .responses
            .get(&hash)
            .ok_or_else(|| BackendError::Fatal(format!("no fixture for prompt {hash}")))?;
        let idx = (params.attempt.max(1) as usize - 1).min(list.len() - 1);
        Ok(list[idx].clone())
    }
}

/// A deterministic stand-in for a chat model.
///
/// Persona prompts yield a persona whose description states, item by item,
/// how the person would answer the source questionnaire; demographics are
/// drawn from trait-dependent weights. Questionnaire prompts are answered by
/// reading those statements back: EPQR-A items directly (with optional
/// answer noise), BFI items from trait levels implied by the statements.
/// Output depends only on the prompt, model id and sample index.
pub struct SimulatedBackend {
    epqra: Questionnaire,
    bfi: Questionnaire,
    answer_noise: f64,
}

impl Default for SimulatedBackend {
    fn default() -> Self {
        Self::new(0.05)
    }
}

const STATEMENT_OPEN: &str = "Asked \"";
const STATEMENT_MID: &str = "\", they would say ";

impl SimulatedBackend {
    /// `answer_noise` is the probability of flipping each EPQR-A answer.
    pub fn new(answer_noise: f64) -> Self {
        SimulatedBackend {
            epqra: Questionnaire::epqra(),
            bfi: Questionnaire::bfi(),
            answer_noise,
        }
    }

    fn rng(prompt: &str, params: &CompletionParams<'_>) -> ChaCha8Rng {
        let digest = Sha256::new()
            .chain_update(params.model_id.as_bytes())
            .chain_update([0])
            .chain_update(params.sample.to_le_bytes())
            .chain_update(prompt.as_bytes())
            .finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Fraction of keyed answers per EPQR-A scale.
    fn trait_levels(&self, answers: &HashMap<String, bool>) -> HashMap<&'static str, f64> {
        let mut levels = HashMap::new();
        for &label in Instrument::Epqra.scale_labels() {
            let scale = self.epqra.scale(label).expect("builtin scale");
            let mut keyed = 0.0;
            let mut seen = 0.0;
            for &id in &scale.items {
                let item = self.epqra.item(id).expect("builtin item");
                if let (Some(&a), Keying::Dichotomous(k)) = (answers.get(&item.text), item.keyed) {
                    seen += 1.0;
                    if a == k {
                        keyed += 1.0;
                    }
                }
            }
            levels.insert(label, if seen > 0.0 { keyed / seen } else { 0.5 });
        }
        levels
    }

    fn persona(&self, prompt: &str, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
        let data = prompt
            .find("\nData:\n")
            .map(|i| &prompt[i..])
            .ok_or_else(|| BackendError::Fatal("persona prompt without data block".into()))?;
        let doc = extract_document(data).map_err(|e| BackendError::Fatal(e.to_string()))?;
        let answers: HashMap<String, bool> = doc
            .entries()
            .iter()
            .filter_map(|(k, v)| {
                let b = v.as_str()?.eq_ignore_ascii_case("true");
                Some((k.clone(), b))
            })
            .collect();
        let lv = self.trait_levels(&answers);
        let (e, n, p) = (lv["E"], lv["N"], lv["P"]);

        let name = pick(
            rng,
            &[
                ("Alex", 1.0),
                ("Sam", 1.0),
                ("Jordan", 1.0),
                ("Emily", 1.0),
                ("John", 1.0),
                ("Sarah", 1.0),
                ("Maya", 1.0),
                ("Daniel", 1.0),
            ],
        );
        let surname = pick(
            rng,
            &[
                ("Morgan", 1.0),
                ("Carter", 1.0),
                ("Thompson", 1.0),
                ("Lee", 1.0),
                ("Rivera", 1.0),
                ("Okafor", 1.0),
            ],
        );
        let gender = pick(
            rng,
            &[
                ("Female", 0.45),
                ("Male", 0.45 * (1.0 - 0.7 * p)),
                ("non-binary", 0.05 + 0.6 * p),
                ("genderqueer", 0.02),
            ],
        );
        let orientation = pick(
            rng,
            &[
                ("Heterosexual", 0.75 * (1.0 - 0.6 * p)),
                ("straight", 0.1),
                ("Bisexual", 0.08 + 0.3 * p),
                ("Gay", 0.04),
                ("Unspecified", 0.03),
            ],
        );
        let race = pick(
            rng,
            &[
                ("White", 0.55),
                ("Caucasian", 0.1),
                ("Black", 0.1),
                ("Asian", 0.1),
                ("Hispanic", 0.1),
                ("Mixed", 0.05),
            ],
        );
        let religion = pick(
            rng,
            &[
                ("Agnostic", 0.4),
                ("Christian", 0.25),
                ("Atheist", 0.2 + 0.2 * p),
                ("Buddhist", 0.1),
            ],
        );
        let politics = pick(
            rng,
            &[
                ("Moderate", 0.45 * (1.0 - 0.6 * p)),
                ("Liberal", 0.3 + 0.5 * p),
                ("Conservative", 0.15 * (1.0 - p)),
                ("Libertarian", 0.05),
            ],
        );
        let occupation = pick(
            rng,
            &[
                ("Freelance writer", 1.0),
                ("Software engineer", 1.0),
                ("Accountant", 0.8),
                ("Graphic designer", 0.6 + p),
                ("Nurse", 0.6),
                ("Research scientist", 0.6),
                ("Marketing manager", 0.4 + e),
                ("Teacher", 0.5),
            ],
        );
        let location = pick(
            rng,
            &[
                ("Portland, Oregon", 1.0),
                ("Boston, MA", 1.0),
                ("New York City", 1.0),
                ("Seattle, WA", 0.8),
                ("Austin, Texas", 0.6),
                ("Minneapolis, Minnesota", 0.5),
            ],
        );
        let age: u32 = 22 + rng.gen_range(0..20);

        let mood = if n > 0.5 { "often anxious" } else { "usually calm" };
        let social = if e > 0.5 { "outgoing" } else { "reserved" };
        let mut description = format!(
            "{name} is a {social}, {mood} {} living in {location}.\n\n",
            occupation.to_lowercase()
        );
        let mut statements: Vec<(&str, bool)> = answers.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        statements.sort_by_key(|(text, _)| self.epqra.items().iter().position(|i| i.text == *text));
        for (text, yes) in statements {
            description.push_str(&format!(
                "{STATEMENT_OPEN}{text}{STATEMENT_MID}{}. ",
                if yes { "yes" } else { "no" }
            ));
        }
        let persona = serde_json::json!({
            "name": format!("{name} {surname}"),
            "age": age,
            "gender": gender,
            "sexual_orientation": orientation,
            "race": race,
            "ethnicity": "",
            "religious_belief": religion,
            "occupation": occupation,
            "political_orientation": politics,
            "location": location,
            "description": description.trim_end(),
        });
        Ok(serde_json::to_string_pretty(&persona).expect("json"))
    }

    fn statements(description: &str) -> HashMap<String, bool> {
        description
            .split(STATEMENT_OPEN)
            .skip(1)
            .filter_map(|chunk| {
                let (text, rest) = chunk.split_once(STATEMENT_MID)?;
                let yes = rest.starts_with("yes");
                (yes || rest.starts_with("no")).then(|| (text.to_string(), yes))
            })
            .collect()
    }

    fn questionnaire(&self, prompt: &str, rng: &mut ChaCha8Rng) -> Result<String, BackendError> {
        let persona = extract_document(prompt).map_err(|e| BackendError::Fatal(e.to_string()))?;
        let description = persona.get("description").and_then(|v| v.as_str()).unwrap_or("");
        let answers = Self::statements(description);
        let q_start = prompt
            .find("**Questionnaire:**")
            .ok_or_else(|| BackendError::Fatal("questionnaire prompt without items".into()))?;
        let items = extract_document(&prompt[q_start..]).map_err(|e| BackendError::Fatal(e.to_string()))?;
        let is_epqra = prompt.contains("answer only with \"True\" or \"False\"");

        let mut out = Vec::new();
        if is_epqra {
            for (id, text) in items.entries() {
                let text = text.as_str().unwrap_or_default();
                let mut yes = answers.get(text).copied().unwrap_or(false);
                if rng.gen_bool(self.answer_noise.clamp(0.0, 1.0)) {
                    yes = !yes;
                }
                out.push((id.clone(), if yes { "True" } else { "False" }.to_string()));
            }
        } else {
            let lv = self.trait_levels(&answers);
            let level = |scale: &str| match scale {
                "E" => lv["E"],
                "N" => lv["N"],
                "A" => 1.0 - 0.7 * lv["P"],
                "C" => 0.9 - 0.6 * lv["P"],
                _ => 0.3 + 0.5 * lv["E"],
            };
            for (id, _) in items.entries() {
                let Some(item) = id.parse().ok().and_then(|i| self.bfi.item(i)) else {
                    continue;
                };
                let raw = 1.0 + 4.0 * level(&item.scale) + rng.gen_range(-0.6..0.6);
                let rating = raw.round().clamp(1.0, 5.0) as u8;
                let rating = match item.keyed {
                    Keying::Likert { reversed: true } => 6 - rating,
                    _ => rating,
                };
                out.push((id.clone(), rating.to_string()));
            }
        }
        out.push((
            "explanation".to_string(),
            "Answers follow the persona's described habits and temperament.".to_string(),
        ));
        Ok(json_object(&out))
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[(&'a str, f64)]) -> &'a str {
    let total: f64 = options.iter().map(|(_, w)| w.max(0.0)).sum();
    let mut x = rng.gen::<f64>() * total;
    for (label, w) in options {
        x -= w.max(0.0);
        if x < 0.0 {
            return label;
        }
    }
    options.last().expect("non-empty options").0
}

impl Backend for SimulatedBackend {
    fn complete(&self, prompt: &str, params: &CompletionParams<'_>) -> Result<String, BackendError> {
        let mut rng = Self::rng(prompt, params);
        if prompt.starts_with("Use the provided data") {
            self.persona(prompt, &mut rng)
        } else if prompt.contains("**Questionnaire:**") {
            self.questionnaire(prompt, &mut rng)
        } else {
            Err(BackendError::Fatal("unrecognised prompt".into()))
        }
    }
}
