//! Collapsing free-text sociodemographic values into canonical categories.
//!
//! Matching is exact on a folded key: lowercase, with everything except
//! letters, digits and `+` removed. "Gender-Fluid", "gender fluid" and
//! "genderfluid" therefore share one key. Unmatched values map to the
//! attribute's fallback label.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generation::PersonaRecord;

const DEFAULT_MAPS: &str = include_str!("../data/category_maps.json");

#[derive(Debug, Error)]
pub enum NormalizationError {
    #[error("failed to read category maps: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed category maps: {0}")]
    Malformed(String),
    #[error("{attribute}: {message}")]
    Invalid { attribute: Attribute, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Gender,
    PoliticalOrientation,
    Race,
    ReligiousBelief,
    SexualOrientation,
    Occupation,
    Location,
}

impl Attribute {
    pub const ALL: [Attribute; 7] = [
        Attribute::Gender,
        Attribute::PoliticalOrientation,
        Attribute::Race,
        Attribute::ReligiousBelief,
        Attribute::SexualOrientation,
        Attribute::Occupation,
        Attribute::Location,
    ];

    /// Persona field name.
    pub fn field(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::PoliticalOrientation => "political_orientation",
            Attribute::Race => "race",
            Attribute::ReligiousBelief => "religious_belief",
            Attribute::SexualOrientation => "sexual_orientation",
            Attribute::Occupation => "occupation",
            Attribute::Location => "location",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Attribute::Gender => "Gender",
            Attribute::PoliticalOrientation => "Political orientation",
            Attribute::Race => "Race",
            Attribute::ReligiousBelief => "Religious belief",
            Attribute::SexualOrientation => "Sexual orientation",
            Attribute::Occupation => "Occupation",
            Attribute::Location => "Location",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.field())
    }
}

impl FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Attribute::ALL
            .into_iter()
            .find(|a| a.field() == s)
            .ok_or_else(|| format!("unknown attribute `{s}`"))
    }
}

/// Folds a raw value to its match key.
pub fn match_key(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric() || *c == '+')
        .flat_map(char::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub canonical: String,
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RawMap {
    attribute: Attribute,
    rules: Vec<Rule>,
    fallback: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RawMaps {
    format_version: u32,
    maps: Vec<RawMap>,
}

/// Ordered synonym rules for one attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMap {
    attribute: Attribute,
    rules: Vec<Rule>,
    fallback: String,
    lookup: HashMap<String, usize>,
}

impl CategoryMap {
    pub fn new(
        attribute: Attribute,
        rules: Vec<Rule>,
        fallback: impl Into<String>,
    ) -> Result<Self, NormalizationError> {
        let fallback = fallback.into();
        let invalid = |message: String| NormalizationError::Invalid { attribute, message };
        let mut lookup: HashMap<String, usize> = HashMap::new();
        let mut insert = |key: String, idx: usize, shown: &str| -> Result<(), NormalizationError> {
            if key.is_empty() {
                return Err(invalid(format!("pattern `{shown}` has an empty match key")));
            }
            match lookup.get(&key) {
                Some(&other) if other != idx => Err(invalid(format!(
                    "pattern `{shown}` maps to both `{}` and `{}`",
                    rules[other].canonical, rules[idx].canonical
                ))),
                _ => {
                    lookup.insert(key, idx);
                    Ok(())
                }
            }
        };
        for (idx, rule) in rules.iter().enumerate() {
            insert(match_key(&rule.canonical), idx, &rule.canonical)?;
            for syn in &rule.synonyms {
                if syn.chars().any(char::is_uppercase) {
                    return Err(invalid(format!("synonym `{syn}` is not lowercase")));
                }
                insert(match_key(syn), idx, syn)?;
            }
        }
        if fallback.trim().is_empty() {
            return Err(invalid("empty fallback".into()));
        }
        if let Some(&idx) = lookup.get(&match_key(&fallback)) {
            if rules[idx].canonical != fallback {
                return Err(invalid(format!(
                    "fallback `{fallback}` collides with `{}`",
                    rules[idx].canonical
                )));
            }
        }
        Ok(CategoryMap {
            attribute,
            rules,
            fallback,
            lookup,
        })
    }

    pub fn attribute(&self) -> Attribute {
        self.attribute
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn fallback(&self) -> &str {
        &self.fallback
    }

    /// Canonical labels in rule order, with the fallback last if it is not
    /// already a rule.
    pub fn categories(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.rules.iter().map(|r| r.canonical.as_str()).collect();
        if !out.contains(&self.fallback.as_str()) {
            out.push(&self.fallback);
        }
        out
    }

    pub fn normalize(&self, raw: &str) -> &str {
        let key = match_key(raw);
        if key == match_key(&self.fallback) {
            return &self.fallback;
        }
        match self.lookup.get(&key) {
            Some(&idx) => &self.rules[idx].canonical,
            None => &self.fallback,
        }
    }
}

/// One [`CategoryMap`] per audited attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMaps {
    maps: Vec<CategoryMap>,
}

impl CategoryMaps {
    /// The shipped defaults.
    pub fn builtin() -> CategoryMaps {
        Self::from_json(DEFAULT_MAPS).expect("compiled-in category maps are valid")
    }

    /// Parses a complete set of maps; every attribute must be present.
    pub fn from_json(text: &str) -> Result<CategoryMaps, NormalizationError> {
        let maps = parse_maps(text)?;
        let mut out = Vec::with_capacity(Attribute::ALL.len());
        for attribute in Attribute::ALL {
            let map = maps
                .iter()
                .find(|m| m.attribute == attribute)
                .ok_or_else(|| NormalizationError::Invalid {
                    attribute,
                    message: "no category map".into(),
                })?;
            out.push(map.clone());
        }
        Ok(CategoryMaps { maps: out })
    }

    /// Replaces the maps for every attribute present in `text`.
    pub fn with_overrides(mut self, text: &str) -> Result<CategoryMaps, NormalizationError> {
        for map in parse_maps(text)? {
            let slot = self
                .maps
                .iter_mut()
                .find(|m| m.attribute == map.attribute)
                .expect("all attributes present");
            *slot = map;
        }
        Ok(self)
    }

    pub fn load_overrides(self, path: &Path) -> Result<CategoryMaps, NormalizationError> {
        let text = std::fs::read_to_string(path)?;
        self.with_overrides(&text)
    }

    pub fn get(&self, attribute: Attribute) -> &CategoryMap {
        self.maps
            .iter()
            .find(|m| m.attribute == attribute)
            .expect("all attributes present")
    }

    pub fn to_json(&self) -> String {
        let raw = RawMaps {
            format_version: 1,
            maps: self
                .maps
                .iter()
                .map(|m| RawMap {
                    attribute: m.attribute,
                    rules: m.rules.clone(),
                    fallback: m.fallback.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("maps serialize")
    }
}

fn parse_maps(text: &str) -> Result<Vec<CategoryMap>, NormalizationError> {
    let raw: RawMaps = serde_json::from_str(text).map_err(|e| NormalizationError::Malformed(e.to_string()))?;
    if raw.format_version != 1 {
        return Err(NormalizationError::Malformed(format!(
            "unsupported format_version {}",
            raw.format_version
        )));
    }
    raw.maps
        .into_iter()
        .map(|m| CategoryMap::new(m.attribute, m.rules, m.fallback))
        .collect()
}

pub fn normalize_value<'m>(attribute: Attribute, raw: &str, maps: &'m CategoryMaps) -> &'m str {
    maps.get(attribute).normalize(raw)
}

/// Canonicalized audited attributes of one persona.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedAttributes {
    pub age: u32,
    pub gender: String,
    pub sexual_orientation: String,
    pub race: String,
    pub religious_belief: String,
    pub occupation: String,
    pub political_orientation: String,
    pub location: String,
}

impl NormalizedAttributes {
    pub fn get(&self, attribute: Attribute) -> &str {
        match attribute {
            Attribute::Gender => &self.gender,
            Attribute::PoliticalOrientation => &self.political_orientation,
            Attribute::Race => &self.race,
            Attribute::ReligiousBelief => &self.religious_belief,
            Attribute::SexualOrientation => &self.sexual_orientation,
            Attribute::Occupation => &self.occupation,
            Attribute::Location => &self.location,
        }
    }
}

pub fn normalize_persona(p: &PersonaRecord, maps: &CategoryMaps) -> NormalizedAttributes {
    let n = |a: Attribute| normalize_value(a, p.attribute(a.field()).expect("audited field"), maps).to_string();
    NormalizedAttributes {
        age: p.age,
        gender: n(Attribute::Gender),
        sexual_orientation: n(Attribute::SexualOrientation),
        race: n(Attribute::Race),
        religious_belief: n(Attribute::ReligiousBelief),
        occupation: n(Attribute::Occupation),
        political_orientation: n(Attribute::PoliticalOrientation),
        location: n(Attribute::Location),
    }
}
