//! Auditing sociodemographic bias in LLM-generated personas.
//!
//! Personas are generated from psychometric questionnaire answers, re-administered
//! the same questionnaires, normalized into canonical categories and compared
//! across manipulation conditions.

pub mod generation;
pub mod manipulation;
pub mod normalization;
pub mod pipeline;
pub mod questionnaire;
pub mod report;
pub mod statistics;
