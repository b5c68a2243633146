//! Experimental conditions derived from an input population.
//!
//! `MaxN`/`MaxP` force one EPQR-A scale to its maximum and leave every other
//! item untouched. `Random` draws a fresh population item by item from the
//! input's per-item TRUE rates, which keeps scale means but destroys the
//! inter-item correlation.
//!
//! Random populations use ChaCha8 (`rand_chacha`) seeded from a `u64`, a
//! portable generator with a fixed output stream across platforms.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::questionnaire::{Answer, AnswerSheet, Instrument, ItemId, Keying, Questionnaire, ResponseDomain};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManipulationError {
    #[error("{0} is not a dichotomous instrument")]
    UnsupportedInstrument(Instrument),
    #[error("unknown scale `{0}`")]
    UnknownScale(String),
    #[error("no input sheets")]
    EmptyInput,
    #[error("mixed instruments in input ({0} and {1})")]
    MixedInstruments(Instrument, Instrument),
    #[error("sheet {respondent} has no answer for item {item}")]
    IncompleteSheet { respondent: String, item: ItemId },
    #[error("population size must be at least 1")]
    EmptyPopulation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Base,
    MaxN,
    MaxP,
    Random,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 4] = [
        ConditionKind::Base,
        ConditionKind::MaxN,
        ConditionKind::MaxP,
        ConditionKind::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionKind::Base => "base",
            ConditionKind::MaxN => "maxn",
            ConditionKind::MaxP => "maxp",
            ConditionKind::Random => "random",
        }
    }

    /// Display label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            ConditionKind::Base => "Base",
            ConditionKind::MaxN => "MaxN",
            ConditionKind::MaxP => "MaxP",
            ConditionKind::Random => "Random",
        }
    }

    /// The scale forced to its maximum, if any.
    pub fn maximized_scale(self) -> Option<&'static str> {
        match self {
            ConditionKind::MaxN => Some("N"),
            ConditionKind::MaxP => Some("P"),
            _ => None,
        }
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConditionKind::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown condition `{s}` (expected base, maxn, maxp or random)"))
    }
}

/// An experimental condition. Only `Random` carries a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawCondition", into = "RawCondition")]
pub struct Condition {
    kind: ConditionKind,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct RawCondition {
    kind: ConditionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl TryFrom<RawCondition> for Condition {
    type Error = String;

    fn try_from(raw: RawCondition) -> Result<Self, Self::Error> {
        match (raw.kind, raw.seed) {
            (ConditionKind::Random, Some(seed)) => Ok(Condition::random(seed)),
            (ConditionKind::Random, None) => Err("random condition requires a seed".into()),
            (kind, None) => Ok(Condition { kind, seed: None }),
            (kind, Some(_)) => Err(format!("{kind} condition does not take a seed")),
        }
    }
}

impl From<Condition> for RawCondition {
    fn from(c: Condition) -> Self {
        RawCondition {
            kind: c.kind,
            seed: c.seed,
        }
    }
}

impl Condition {
    pub const BASE: Condition = Condition {
        kind: ConditionKind::Base,
        seed: None,
    };
    pub const MAX_N: Condition = Condition {
        kind: ConditionKind::MaxN,
        seed: None,
    };
    pub const MAX_P: Condition = Condition {
        kind: ConditionKind::MaxP,
        seed: None,
    };

    pub fn random(seed: u64) -> Condition {
        Condition {
            kind: ConditionKind::Random,
            seed: Some(seed),
        }
    }

    /// Builds a condition; `seed` is required for `Random` and ignored otherwise.
    pub fn new(kind: ConditionKind, seed: u64) -> Condition {
        match kind {
            ConditionKind::Random => Condition::random(seed),
            kind => Condition { kind, seed: None },
        }
    }

    pub fn kind(&self) -> ConditionKind {
        self.kind
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// Sets every item of `scale` to its keyed answer; all other answers are
/// copied unchanged.
pub fn maximize_scale(sheet: &AnswerSheet, scale: &str, q: &Questionnaire) -> Result<AnswerSheet, ManipulationError> {
    if q.response_domain() != ResponseDomain::Dichotomous {
        return Err(ManipulationError::UnsupportedInstrument(q.instrument()));
    }
    let target = q
        .scale(scale)
        .ok_or_else(|| ManipulationError::UnknownScale(scale.to_string()))?;
    let mut out = sheet.clone();
    for &id in &target.items {
        if let Some(Keying::Dichotomous(keyed)) = q.item(id).map(|i| i.keyed) {
            out.answers.insert(id, Answer::Bool(keyed));
        }
    }
    Ok(out)
}

/// Per-item fraction of TRUE answers across a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMarginals {
    pub instrument: Instrument,
    pub p_true: BTreeMap<ItemId, f64>,
}

impl ItemMarginals {
    pub fn p(&self, item: ItemId) -> Option<f64> {
        self.p_true.get(&item).copied()
    }

    /// Marginals with the same probability on every item of `q`.
    pub fn uniform(q: &Questionnaire, p: f64) -> ItemMarginals {
        ItemMarginals {
            instrument: q.instrument(),
            p_true: q.items().iter().map(|i| (i.id, p.clamp(0.0, 1.0))).collect(),
        }
    }

    /// Expected scale score under item independence: the sum of keyed-answer
    /// probabilities over the scale's items.
    pub fn expected_scale_score(&self, q: &Questionnaire, scale: &str) -> Option<f64> {
        let scale = q.scale(scale)?;
        scale
            .items
            .iter()
            .map(|&id| {
                let p = self.p(id)?;
                match q.item(id)?.keyed {
                    Keying::Dichotomous(true) => Some(p),
                    Keying::Dichotomous(false) => Some(1.0 - p),
                    Keying::Likert { .. } => None,
                }
            })
            .sum()
    }
}

pub fn compute_marginals(sheets: &[AnswerSheet]) -> Result<ItemMarginals, ManipulationError> {
    let first = sheets.first().ok_or(ManipulationError::EmptyInput)?;
    let instrument = first.instrument;
    if instrument.response_domain() != ResponseDomain::Dichotomous {
        return Err(ManipulationError::UnsupportedInstrument(instrument));
    }
    let mut counts: BTreeMap<ItemId, usize> = (1..=instrument.item_count() as ItemId).map(|i| (i, 0)).collect();
    for sheet in sheets {
        if sheet.instrument != instrument {
            return Err(ManipulationError::MixedInstruments(instrument, sheet.instrument));
        }
        for (id, count) in counts.iter_mut() {
            match sheet.answer(*id) {
                Some(Answer::Bool(true)) => *count += 1,
                Some(Answer::Bool(false)) => {}
                _ => {
                    return Err(ManipulationError::IncompleteSheet {
                        respondent: sheet.respondent_id.clone(),
                        item: *id,
                    })
                }
            }
        }
    }
    let n = sheets.len() as f64;
    Ok(ItemMarginals {
        instrument,
        p_true: counts.into_iter().map(|(id, c)| (id, c as f64 / n)).collect(),
    })
}

/// Draws `n` sheets with independent Bernoulli(p_true(i)) answers. Sheet
/// ids are `random-0000`, `random-0001`, and so on.
pub fn random_population(m: &ItemMarginals, n: usize, seed: u64) -> Result<Vec<AnswerSheet>, ManipulationError> {
    random_population_with_ids(m, &(0..n).map(|i| format!("random-{i:04}")).collect::<Vec<_>>(), seed)
}

/// As [`random_population`], assigning the given respondent ids in order.
pub fn random_population_with_ids(
    m: &ItemMarginals,
    respondent_ids: &[String],
    seed: u64,
) -> Result<Vec<AnswerSheet>, ManipulationError> {
    if respondent_ids.is_empty() {
        return Err(ManipulationError::EmptyPopulation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(respondent_ids
        .iter()
        .map(|id| {
            let answers = m
                .p_true
                .iter()
                .map(|(&item, &p)| (item, Answer::Bool(rng.gen_bool(p.clamp(0.0, 1.0)))))
                .collect();
            AnswerSheet::new(id.clone(), m.instrument, answers)
        })
        .collect())
}

/// Applies `condition` to an input population.
pub fn apply_condition(
    condition: Condition,
    sheets: &[AnswerSheet],
    q: &Questionnaire,
) -> Result<Vec<AnswerSheet>, ManipulationError> {
    match condition.kind() {
        ConditionKind::Base => Ok(sheets.to_vec()),
        ConditionKind::MaxN | ConditionKind::MaxP => {
            let scale = condition.kind().maximized_scale().expect("max condition");
            sheets.iter().map(|s| maximize_scale(s, scale, q)).collect()
        }
        ConditionKind::Random => {
            let marginals = compute_marginals(sheets)?;
            let ids: Vec<String> = sheets.iter().map(|s| s.respondent_id.clone()).collect();
            random_population_with_ids(&marginals, &ids, condition.seed().expect("random has seed"))
        }
    }
}
