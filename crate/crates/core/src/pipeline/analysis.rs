//! Turns a run into the table-shaped results: sociodemographic
//! distributions, questionnaire scores, cross-instrument correlations,
//! reliability and reconstruction error.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CellArtifact, PipelineError, RunArtifact};
use crate::manipulation::ConditionKind;
use crate::normalization::{normalize_persona, Attribute, CategoryMaps, NormalizedAttributes};
use crate::questionnaire::{score, AnswerSheet, Instrument, Questionnaire};
use crate::statistics::{
    compare_conditions, compare_samples, cronbach_alpha, error_metrics, mean, pearson, population_distribution,
    std_dev, t_test, DistributionRow, ErrorMetrics, ScoreMatrix, Significance, StatsError, TestResult,
};

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub maps: CategoryMaps,
    /// Mark conditions against Base. Fails with [`PipelineError::MissingBase`]
    /// if a model has other conditions but no Base cells.
    pub significance: bool,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            maps: CategoryMaps::builtin(),
            significance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeRow {
    pub mean: f64,
    pub std: f64,
    pub per_trial: Vec<f64>,
    pub significance: Option<Significance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub model_id: String,
    pub condition: ConditionKind,
    pub trials: usize,
    pub age: AgeRow,
    pub rows: Vec<DistributionRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// The original input sheets.
    Input,
    /// Input sheets after a condition was applied.
    ConditionInput,
    /// Sheets answered by generated personas.
    Regenerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCell {
    pub scale: String,
    pub mean: f64,
    pub std: f64,
    /// Paired test against the same respondents' reference answers.
    pub paired: Option<Significance>,
    /// Unpaired test against the whole input population.
    pub unpaired: Option<Significance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub instrument: Instrument,
    pub model_id: Option<String>,
    pub population: String,
    pub condition: Option<ConditionKind>,
    pub source: ScoreSource,
    pub n: usize,
    pub cells: Vec<ScoreCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub model_id: String,
    pub n: usize,
    /// EPQR-A scales.
    pub rows: Vec<String>,
    /// BFI scales.
    pub columns: Vec<String>,
    pub cells: Vec<Vec<Option<TestResult>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, row: &str, column: &str) -> Option<&TestResult> {
        let i = self.rows.iter().position(|r| r == row)?;
        let j = self.columns.iter().position(|c| c == column)?;
        self.cells[i][j].as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaCell {
    pub scale: String,
    /// `None` when reliability is undefined.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub instrument: Instrument,
    pub model_id: Option<String>,
    pub population: String,
    pub n: usize,
    pub values: Vec<AlphaCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub model_id: String,
    pub condition: ConditionKind,
    pub metrics: ErrorMetrics,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub model_id: String,
    pub condition: ConditionKind,
    pub trial: u32,
    pub input: usize,
    pub personas: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub run_id: String,
    pub config_hash: String,
    pub distributions: Vec<DistributionTable>,
    pub scores: Vec<ScoreRow>,
    pub correlations: Vec<CorrelationMatrix>,
    pub alphas: Vec<AlphaRow>,
    pub errors: Vec<ErrorRow>,
    pub failures: Vec<FailureSummary>,
}

impl AnalysisBundle {
    pub fn distribution(&self, model_id: &str, condition: ConditionKind) -> Option<&DistributionTable> {
        self.distributions
            .iter()
            .find(|d| d.model_id == model_id && d.condition == condition)
    }

    pub fn correlation(&self, model_id: &str) -> Option<&CorrelationMatrix> {
        self.correlations.iter().find(|c| c.model_id == model_id)
    }
}

fn questionnaire(instrument: Instrument) -> Questionnaire {
    Questionnaire::builtin(instrument)
}

fn model_ids(run: &RunArtifact) -> Vec<String> {
    let mut ids: Vec<String> = Vec::new();
    for c in &run.cells {
        if !ids.contains(&c.model_id) {
            ids.push(c.model_id.clone());
        }
    }
    ids
}

fn kinds_for(run: &RunArtifact, model_id: &str) -> Vec<ConditionKind> {
    let mut kinds = Vec::new();
    for c in run.cells.iter().filter(|c| c.model_id == model_id) {
        if !kinds.contains(&c.kind()) {
            kinds.push(c.kind());
        }
    }
    kinds
}

/// The cell whose personas answered the questionnaires: the configured
/// representative trial, or else the first cell with any answers.
fn representative<'a>(run: &'a RunArtifact, model_id: &str, kind: ConditionKind) -> Option<&'a CellArtifact> {
    let cells = run.cells_for(model_id, kind);
    cells
        .iter()
        .find(|c| c.trial == run.config.representative_trial && !c.administered.is_empty())
        .or_else(|| cells.iter().find(|c| !c.administered.is_empty()))
        .copied()
}

/// Reference answers for a regenerated sheet: the original input, except
/// under Random, whose sheets have no original counterpart.
fn reference<'a>(
    cell: &'a CellArtifact,
    respondent: &'a super::RespondentResult,
    originals: &HashMap<&str, &'a AnswerSheet>,
    instrument: Instrument,
) -> Option<&'a AnswerSheet> {
    match (instrument, cell.kind()) {
        (Instrument::Epqra, ConditionKind::Random) => Some(&respondent.input),
        _ => originals.get(respondent.respondent_id.as_str()).copied(),
    }
}

fn scale_values(sheets: &[&AnswerSheet], q: &Questionnaire, scale: &str) -> Vec<f64> {
    sheets
        .iter()
        .map(|s| score(s, q).expect("validated sheet").get(scale).expect("known scale"))
        .collect()
}

fn paired_mark(x: &[f64], y: &[f64]) -> Option<Significance> {
    match t_test(x, y, true) {
        Ok(t) => Some(Significance::from_p(t.p_value)),
        Err(StatsError::Degenerate) => Some(if x.iter().zip(y).all(|(a, b)| a == b) {
            Significance::Ns
        } else {
            Significance::Separated
        }),
        Err(_) => None,
    }
}

fn score_row(
    instrument: Instrument,
    model_id: Option<String>,
    population: String,
    condition: Option<ConditionKind>,
    source: ScoreSource,
    sheets: &[&AnswerSheet],
    references: Option<(&[&AnswerSheet], &[&AnswerSheet])>,
) -> Option<ScoreRow> {
    if sheets.is_empty() {
        return None;
    }
    let q = questionnaire(instrument);
    let cells = q
        .scales()
        .iter()
        .map(|scale| {
            let values = scale_values(sheets, &q, &scale.label);
            let (paired, unpaired) = match references {
                Some((paired_ref, population_ref)) => (
                    paired_mark(&values, &scale_values(paired_ref, &q, &scale.label)),
                    compare_samples(&values, &scale_values(population_ref, &q, &scale.label))
                        .ok()
                        .map(|c| c.mark),
                ),
                None => (None, None),
            };
            ScoreCell {
                scale: scale.label.clone(),
                mean: mean(&values),
                std: std_dev(&values),
                paired,
                unpaired,
            }
        })
        .collect();
    Some(ScoreRow {
        instrument,
        model_id,
        population,
        condition,
        source,
        n: sheets.len(),
        cells,
    })
}

fn alpha_row(
    instrument: Instrument,
    model_id: Option<String>,
    population: String,
    sheets: &[AnswerSheet],
) -> Option<AlphaRow> {
    if sheets.is_empty() {
        return None;
    }
    let q = questionnaire(instrument);
    let values = q
        .scales()
        .iter()
        .map(|scale| AlphaCell {
            scale: scale.label.clone(),
            alpha: ScoreMatrix::from_sheets(sheets, &q, &scale.label)
                .ok()
                .and_then(|m| cronbach_alpha(&m).ok()),
        })
        .collect();
    Some(AlphaRow {
        instrument,
        model_id,
        population,
        n: sheets.len(),
        values,
    })
}

fn distribution_table(
    model_id: &str,
    kind: ConditionKind,
    cells: &[&CellArtifact],
    maps: &CategoryMaps,
) -> Result<Option<(DistributionTable, TrialAttributes)>, PipelineError> {
    let trials: Vec<Vec<NormalizedAttributes>> = cells
        .iter()
        .map(|c| {
            c.respondents
                .iter()
                .map(|r| normalize_persona(&r.persona, maps))
                .collect()
        })
        .filter(|t: &Vec<NormalizedAttributes>| !t.is_empty())
        .collect();
    if trials.is_empty() {
        return Ok(None);
    }
    let mut rows = Vec::new();
    for attribute in Attribute::ALL {
        rows.extend(population_distribution(&trials, attribute, maps.get(attribute))?);
    }
    let ages: Vec<f64> = trials
        .iter()
        .map(|t| t.iter().map(|a| a.age as f64).sum::<f64>() / t.len() as f64)
        .collect();
    let table = DistributionTable {
        model_id: model_id.to_string(),
        condition: kind,
        trials: trials.len(),
        age: AgeRow {
            mean: mean(&ages),
            std: std_dev(&ages),
            per_trial: ages,
            significance: None,
        },
        rows,
    };
    Ok(Some((table, trials)))
}

fn mark_against(base: &DistributionTable, variant: &mut DistributionTable) -> Result<(), PipelineError> {
    if base.trials < 2 || variant.trials < 2 {
        return Ok(());
    }
    let mut marked = Vec::with_capacity(variant.rows.len());
    for attribute in Attribute::ALL {
        let b: Vec<DistributionRow> = base.rows.iter().filter(|r| r.attribute == attribute).cloned().collect();
        let v: Vec<DistributionRow> = variant
            .rows
            .iter()
            .filter(|r| r.attribute == attribute)
            .cloned()
            .collect();
        marked.extend(compare_conditions(&b, &v)?);
    }
    variant.rows = marked;
    variant.age.significance = Some(compare_samples(&base.age.per_trial, &variant.age.per_trial)?.mark);
    Ok(())
}

/// Computes every table over a run.
pub fn analyze(run: &RunArtifact, options: &AnalyzeOptions) -> Result<AnalysisBundle, PipelineError> {
    let epq = questionnaire(Instrument::Epqra);
    let bfi = questionnaire(Instrument::Bfi);
    let originals: HashMap<&str, &AnswerSheet> = run.input.iter().map(|s| (s.respondent_id.as_str(), s)).collect();
    let originals_bfi: HashMap<&str, &AnswerSheet> =
        run.input_bfi.iter().map(|s| (s.respondent_id.as_str(), s)).collect();
    let input_refs: Vec<&AnswerSheet> = run.input.iter().collect();
    let input_bfi_refs: Vec<&AnswerSheet> = run.input_bfi.iter().collect();
    let models = model_ids(run);

    let mut bundle = AnalysisBundle {
        run_id: run.manifest.run_id.clone(),
        config_hash: run.manifest.config_hash.clone(),
        distributions: Vec::new(),
        scores: Vec::new(),
        correlations: Vec::new(),
        alphas: Vec::new(),
        errors: Vec::new(),
        failures: run
            .cells
            .iter()
            .map(|c| FailureSummary {
                model_id: c.model_id.clone(),
                condition: c.kind(),
                trial: c.trial,
                input: c.accounted(),
                personas: c.respondents.len(),
                failures: c.failures.len(),
            })
            .collect(),
    };

    for model in &models {
        let kinds = kinds_for(run, model);

        // Sociodemographic distributions.
        let mut tables = Vec::new();
        for &kind in &kinds {
            if let Some((table, _)) = distribution_table(model, kind, &run.cells_for(model, kind), &options.maps)? {
                tables.push(table);
            }
        }
        if options.significance {
            let base = tables.iter().find(|t| t.condition == ConditionKind::Base).cloned();
            match base {
                Some(base) => {
                    for t in tables.iter_mut().filter(|t| t.condition != ConditionKind::Base) {
                        mark_against(&base, t)?;
                    }
                }
                None if tables.iter().any(|t| t.condition != ConditionKind::Base) => {
                    return Err(PipelineError::MissingBase)
                }
                None => {}
            }
        }
        bundle.distributions.extend(tables);

        // Regenerated questionnaire scores, reliability and error.
        for &kind in &kinds {
            let Some(cell) = representative(run, model, kind) else {
                continue;
            };
            for (instrument, q, origin) in [
                (Instrument::Epqra, &epq, &originals),
                (Instrument::Bfi, &bfi, &originals_bfi),
            ] {
                let pairs: Vec<(&AnswerSheet, Option<&AnswerSheet>)> = cell
                    .regenerated(instrument)
                    .map(|(r, s)| (s, reference(cell, r, origin, instrument)))
                    .collect();
                if pairs.is_empty() {
                    continue;
                }
                let regen: Vec<&AnswerSheet> = pairs.iter().map(|p| p.0).collect();
                let matched: Vec<(&AnswerSheet, &AnswerSheet)> =
                    pairs.iter().filter_map(|(s, r)| r.map(|r| (*s, r))).collect();
                let population_ref: Vec<&AnswerSheet> = match (instrument, kind) {
                    (Instrument::Epqra, ConditionKind::Random) => cell.respondents.iter().map(|r| &r.input).collect(),
                    (Instrument::Epqra, _) => input_refs.clone(),
                    (Instrument::Bfi, _) => input_bfi_refs.clone(),
                };
                let refs = if matched.len() == regen.len() && !population_ref.is_empty() {
                    Some(matched.iter().map(|p| p.1).collect::<Vec<_>>())
                } else {
                    None
                };
                bundle.scores.extend(score_row(
                    instrument,
                    Some(model.clone()),
                    kind.label().to_string(),
                    Some(kind),
                    ScoreSource::Regenerated,
                    &regen,
                    refs.as_deref().map(|r| (r, population_ref.as_slice())),
                ));
                let owned: Vec<AnswerSheet> = regen.iter().map(|s| (*s).clone()).collect();
                bundle.alphas.extend(alpha_row(
                    instrument,
                    Some(model.clone()),
                    kind.label().to_string(),
                    &owned,
                ));
                if !matched.is_empty() {
                    let (r, i): (Vec<AnswerSheet>, Vec<AnswerSheet>) =
                        matched.iter().map(|(s, r)| ((*s).clone(), (*r).clone())).unzip();
                    bundle.errors.push(ErrorRow {
                        model_id: model.clone(),
                        condition: kind,
                        metrics: error_metrics(&i, &r, q)?,
                    });
                }
            }
        }

        // Cross-instrument correlations on Base.
        if let Some(cell) = representative(run, model, ConditionKind::Base) {
            let both: Vec<(ScoreMap, ScoreMap)> = cell
                .respondents
                .iter()
                .filter_map(|r| Some((r.scores.get(&Instrument::Epqra)?, r.scores.get(&Instrument::Bfi)?)))
                .map(|(e, b)| (e.scores.clone(), b.scores.clone()))
                .collect();
            if !both.is_empty() {
                let rows: Vec<String> = epq.scales().iter().map(|s| s.label.clone()).collect();
                let columns: Vec<String> = bfi.scales().iter().map(|s| s.label.clone()).collect();
                let cells = rows
                    .iter()
                    .map(|r| {
                        let x: Vec<f64> = both.iter().map(|(e, _)| e[r]).collect();
                        columns
                            .iter()
                            .map(|c| {
                                let y: Vec<f64> = both.iter().map(|(_, b)| b[c]).collect();
                                pearson(&x, &y).ok()
                            })
                            .collect()
                    })
                    .collect();
                bundle.correlations.push(CorrelationMatrix {
                    model_id: model.clone(),
                    n: both.len(),
                    rows,
                    columns,
                    cells,
                });
            }
        }
    }

    // Input rows.
    bundle.scores.extend(score_row(
        Instrument::Epqra,
        None,
        "Input".into(),
        None,
        ScoreSource::Input,
        &input_refs,
        None,
    ));
    bundle
        .alphas
        .extend(alpha_row(Instrument::Epqra, None, "Input".into(), &run.input));
    if let Some(model) = models.first() {
        for kind in [ConditionKind::MaxN, ConditionKind::MaxP, ConditionKind::Random] {
            let Some(cell) = run.cells_for(model, kind).into_iter().next() else {
                continue;
            };
            let inputs: Vec<AnswerSheet> = condition_inputs(run, cell);
            let refs: Vec<&AnswerSheet> = inputs.iter().collect();
            let label = match kind {
                ConditionKind::Random => "Random".to_string(),
                k => format!("{} input", k.label()),
            };
            bundle.scores.extend(score_row(
                Instrument::Epqra,
                None,
                label.clone(),
                Some(kind),
                ScoreSource::ConditionInput,
                &refs,
                None,
            ));
            if kind == ConditionKind::Random {
                bundle.alphas.extend(alpha_row(Instrument::Epqra, None, label, &inputs));
            }
        }
    }
    bundle.scores.extend(score_row(
        Instrument::Bfi,
        None,
        "Input".into(),
        None,
        ScoreSource::Input,
        &input_bfi_refs,
        None,
    ));
    bundle
        .alphas
        .extend(alpha_row(Instrument::Bfi, None, "Input".into(), &run.input_bfi));
    Ok(bundle)
}

type ScoreMap = std::collections::BTreeMap<String, f64>;

/// Normalized attributes per trial, per respondent.
type TrialAttributes = Vec<Vec<NormalizedAttributes>>;

/// The full transformed input population of a cell, including respondents
/// whose persona generation failed.
fn condition_inputs(run: &RunArtifact, cell: &CellArtifact) -> Vec<AnswerSheet> {
    crate::manipulation::apply_condition(cell.condition, &run.input, &Questionnaire::epqra())
        .unwrap_or_else(|_| cell.respondents.iter().map(|r| r.input.clone()).collect())
}
