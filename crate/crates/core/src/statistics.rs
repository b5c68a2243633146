//! Reliability, correlation, significance tests, error metrics and
//! population descriptives.
//!
//! Variances use the n-1 denominator throughout. p-values are two-sided and
//! come from a Student-t CDF built on the regularized incomplete beta
//! function.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normalization::{Attribute, CategoryMap, NormalizedAttributes};
use crate::questionnaire::{Answer, AnswerSheet, Instrument, Questionnaire, QuestionnaireError, ResponseDomain};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("score matrix is not rectangular (row {row} has {got} columns, expected {expected})")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("reliability undefined: total scores have zero variance")]
    UndefinedReliability,
    #[error("correlation undefined: zero variance")]
    UndefinedCorrelation,
    #[error("degenerate test: zero variance")]
    Degenerate,
    #[error("respondent `{0}` has no counterpart")]
    UnmatchedRespondent(String),
    #[error("respondent `{0}` appears more than once")]
    DuplicateRespondent(String),
    #[error("unknown scale `{0}`")]
    UnknownScale(String),
    #[error(transparent)]
    Questionnaire(#[from] QuestionnaireError),
}

// ---------------------------------------------------------------------------
// Special functions

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Student-t cumulative distribution function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * reg_inc_beta(df / 2.0, 0.5, df / (df + t * t));
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Two-sided p-value of a t statistic.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Descriptives

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (n-1); zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// Mean and sample standard deviation; `None` for an empty slice.
    pub fn of(xs: &[f64]) -> Option<Summary> {
        if xs.is_empty() {
            return None;
        }
        Some(Summary {
            mean: mean(xs),
            std: std_dev(xs),
            n: xs.len(),
        })
    }
}

fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

// ---------------------------------------------------------------------------
// Reliability

/// Respondents (rows) by items (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: Vec<Vec<f64>>,
    cols: usize,
}

impl ScoreMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<ScoreMatrix, StatsError> {
        let cols = rows.first().map_or(0, Vec::len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(StatsError::Ragged {
                    row: i,
                    got: row.len(),
                    expected: cols,
                });
            }
            check_finite(row)?;
        }
        Ok(ScoreMatrix { rows, cols })
    }

    /// Keyed item values of one scale for each sheet.
    pub fn from_sheets(sheets: &[AnswerSheet], q: &Questionnaire, scale: &str) -> Result<ScoreMatrix, StatsError> {
        let scale = q
            .scale(scale)
            .ok_or_else(|| StatsError::UnknownScale(scale.to_string()))?;
        let mut rows = Vec::with_capacity(sheets.len());
        for sheet in sheets {
            q.check_sheet(sheet)?;
            rows.push(
                scale
                    .items
                    .iter()
                    .map(|&id| q.keyed_value(id, sheet.answers[&id]).expect("checked sheet"))
                    .collect(),
            );
        }
        ScoreMatrix::new(rows)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn row_totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Cronbach's alpha: `k/(k-1) * (1 - sum(item variances) / var(totals))`.
pub fn cronbach_alpha(m: &ScoreMatrix) -> Result<f64, StatsError> {
    if m.n_rows() < 2 {
        return Err(StatsError::TooFew {
            what: "respondents",
            needed: 2,
            got: m.n_rows(),
        });
    }
    if m.n_cols() < 2 {
        return Err(StatsError::TooFew {
            what: "items",
            needed: 2,
            got: m.n_cols(),
        });
    }
    let total_var = variance(&m.row_totals());
    if total_var <= 0.0 {
        return Err(StatsError::UndefinedReliability);
    }
    let item_var: f64 = (0..m.n_cols()).map(|j| variance(&m.column(j))).sum();
    let k = m.n_cols() as f64;
    Ok(k / (k - 1.0) * (1.0 - item_var / total_var))
}

// ---------------------------------------------------------------------------
// Tests of association and difference

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    PairedT,
    UnpairedT,
    Pearson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    /// t for the t-tests, r for Pearson.
    pub statistic: f64,
    pub p_value: f64,
    pub df: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew {
            what: "pairs",
            needed: 3,
            got: x.len(),
        });
    }
    check_finite(x)?;
    check_finite(y)?;
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(StatsError::UndefinedCorrelation);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (x.len() - 2) as f64;
    let p_value = if r.abs() >= 1.0 {
        0.0
    } else {
        two_sided_p(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    Ok(TestResult {
        kind: TestKind::Pearson,
        statistic: r,
        p_value,
        df,
    })
}

/// Paired: one-sample t on `x - y`. Unpaired: Welch's unequal-variance t.
pub fn t_test(x: &[f64], y: &[f64], paired: bool) -> Result<TestResult, StatsError> {
    check_finite(x)?;
    check_finite(y)?;
    if paired {
        if x.len() != y.len() {
            return Err(StatsError::LengthMismatch {
                left: x.len(),
                right: y.len(),
            });
        }
        if x.len() < 2 {
            return Err(StatsError::TooFew {
                what: "pairs",
                needed: 2,
                got: x.len(),
            });
        }
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let var = variance(&d);
        if var <= 0.0 {
            return Err(StatsError::Degenerate);
        }
        let n = d.len() as f64;
        let t = mean(&d) / (var / n).sqrt();
        let df = n - 1.0;
        return Ok(TestResult {
            kind: TestKind::PairedT,
            statistic: t,
            p_value: two_sided_p(t, df),
            df,
        });
    }
    for xs in [x, y] {
        if xs.len() < 2 {
            return Err(StatsError::TooFew {
                what: "observations per group",
                needed: 2,
                got: xs.len(),
            });
        }
    }
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let (a, b) = (variance(x) / n1, variance(y) / n2);
    let se2 = a + b;
    if se2 <= 0.0 {
        return Err(StatsError::Degenerate);
    }
    let t = (mean(x) - mean(y)) / se2.sqrt();
    let df = se2 * se2 / (a * a / (n1 - 1.0) + b * b / (n2 - 1.0));
    Ok(TestResult {
        kind: TestKind::UnpairedT,
        statistic: t,
        p_value: two_sided_p(t, df),
        df,
    })
}

// ---------------------------------------------------------------------------
// Significance marks

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    Ns,
    P05,
    P01,
    P001,
    /// Both samples have zero variance and different means.
    Separated,
}

impl Significance {
    pub fn from_p(p: f64) -> Significance {
        if p < 0.001 {
            Significance::P001
        } else if p < 0.01 {
            Significance::P01
        } else if p < 0.05 {
            Significance::P05
        } else {
            Significance::Ns
        }
    }

    pub fn is_significant(self) -> bool {
        self != Significance::Ns
    }
}

impl fmt::Display for Significance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Significance::Ns => "ns",
            Significance::P05 => "p<0.05",
            Significance::P01 => "p<0.01",
            Significance::P001 => "p<0.001",
            Significance::Separated => "separated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `None` when both sides are constant.
    pub test: Option<TestResult>,
    pub mark: Significance,
}

/// Welch test of per-trial values of one category.
pub fn compare_samples(base: &[f64], variant: &[f64]) -> Result<Comparison, StatsError> {
    match t_test(base, variant, false) {
        Ok(test) => Ok(Comparison {
            test: Some(test),
            mark: Significance::from_p(test.p_value),
        }),
        Err(StatsError::Degenerate) => {
            let mark = if mean(base) == mean(variant) {
                Significance::Ns
            } else {
                Significance::Separated
            };
            Ok(Comparison { test: None, mark })
        }
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// Error metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleError {
    pub scale: String,
    pub mae: f64,
    pub rmse: f64,
    /// Item-level percentages; `None` for Likert instruments or an empty
    /// denominator.
    pub acc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub instrument: Instrument,
    pub respondents: usize,
    pub scales: Vec<ScaleError>,
}

impl ErrorMetrics {
    pub fn scale(&self, label: &str) -> Option<&ScaleError> {
        self.scales.iter().find(|s| s.scale == label)
    }
}

fn pct(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Compares regenerated sheets with the reference sheets they derive from.
///
/// MAE and RMSE are over per-respondent scale scores. For dichotomous
/// instruments the classification rates treat each item answer as a
/// prediction, with the literal TRUE answer as the positive class and the
/// reference sheet as ground truth.
pub fn error_metrics(
    input_sheets: &[AnswerSheet],
    regen_sheets: &[AnswerSheet],
    q: &Questionnaire,
) -> Result<ErrorMetrics, StatsError> {
    let mut by_id: HashMap<&str, &AnswerSheet> = HashMap::new();
    for s in input_sheets {
        q.check_sheet(s)?;
        if by_id.insert(&s.respondent_id, s).is_some() {
            return Err(StatsError::DuplicateRespondent(s.respondent_id.clone()));
        }
    }
    let mut pairs = Vec::with_capacity(regen_sheets.len());
    let mut seen = std::collections::HashSet::new();
    for r in regen_sheets {
        q.check_sheet(r)?;
        let input = by_id
            .get(r.respondent_id.as_str())
            .ok_or_else(|| StatsError::UnmatchedRespondent(r.respondent_id.clone()))?;
        if !seen.insert(r.respondent_id.as_str()) {
            return Err(StatsError::DuplicateRespondent(r.respondent_id.clone()));
        }
        pairs.push((*input, r));
    }
    if let Some(s) = input_sheets.iter().find(|s| !seen.contains(s.respondent_id.as_str())) {
        return Err(StatsError::UnmatchedRespondent(s.respondent_id.clone()));
    }
    if pairs.is_empty() {
        return Err(StatsError::TooFew {
            what: "respondents",
            needed: 1,
            got: 0,
        });
    }

    let dichotomous = q.response_domain() == ResponseDomain::Dichotomous;
    let mut scales = Vec::with_capacity(q.scales().len());
    for scale in q.scales() {
        let scale_score = |s: &AnswerSheet| -> f64 {
            let total: f64 = scale
                .items
                .iter()
                .map(|&id| q.keyed_value(id, s.answers[&id]).expect("checked sheet"))
                .sum();
            if dichotomous {
                total
            } else {
                total / scale.items.len() as f64
            }
        };
        let (mut abs, mut sq) = (0.0, 0.0);
        let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
        for (input, regen) in &pairs {
            let d = scale_score(regen) - scale_score(input);
            abs += d.abs();
            sq += d * d;
            if dichotomous {
                for &id in &scale.items {
                    match (input.answers[&id], regen.answers[&id]) {
                        (Answer::Bool(true), Answer::Bool(true)) => tp += 1,
                        (Answer::Bool(false), Answer::Bool(false)) => tn += 1,
                        (Answer::Bool(false), Answer::Bool(true)) => fp += 1,
                        _ => fneg += 1,
                    }
                }
            }
        }
        let n = pairs.len() as f64;
        let (acc, precision, recall, specificity) = if dichotomous {
            (
                pct(tp + tn, tp + tn + fp + fneg),
                pct(tp, tp + fp),
                pct(tp, tp + fneg),
                pct(tn, tn + fp),
            )
        } else {
            (None, None, None, None)
        };
        scales.push(ScaleError {
            scale: scale.label.clone(),
            mae: abs / n,
            rmse: (sq / n).sqrt(),
            acc,
            precision,
            recall,
            specificity,
        });
    }
    Ok(ErrorMetrics {
        instrument: q.instrument(),
        respondents: pairs.len(),
        scales,
    })
}

// ---------------------------------------------------------------------------
// Population distributions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub attribute: Attribute,
    pub category: String,
    pub mean_pct: f64,
    pub std_pct: f64,
    /// Percentage in each trial, in trial order.
    pub per_trial: Vec<f64>,
    /// Mark relative to the Base condition; `None` for Base itself or when
    /// no comparison was made.
    pub significance: Option<Significance>,
}

/// Category percentages of one population, in `categories` order. Values
/// outside `categories` are counted under an extra trailing entry if any
/// occur.
pub fn category_percentages(
    trial: &[NormalizedAttributes],
    attribute: Attribute,
    categories: &[&str],
) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = categories.iter().map(|c| (c.to_string(), 0)).collect();
    for p in trial {
        *counts.entry(p.get(attribute).to_string()).or_default() += 1;
    }
    let n = trial.len().max(1) as f64;
    counts.into_iter().map(|(c, k)| (c, 100.0 * k as f64 / n)).collect()
}

/// Per-category mean and standard deviation across trials of the
/// within-trial percentage. Empty trials are skipped.
pub fn population_distribution(
    trials: &[Vec<NormalizedAttributes>],
    attribute: Attribute,
    map: &CategoryMap,
) -> Result<Vec<DistributionRow>, StatsError> {
    let trials: Vec<&Vec<NormalizedAttributes>> = trials.iter().filter(|t| !t.is_empty()).collect();
    if trials.is_empty() {
        return Err(StatsError::TooFew {
            what: "non-empty trials",
            needed: 1,
            got: 0,
        });
    }
    let mut categories: Vec<String> = map.categories().into_iter().map(str::to_string).collect();
    for t in &trials {
        for p in t.iter() {
            let c = p.get(attribute);
            if !categories.iter().any(|k| k == c) {
                categories.push(c.to_string());
            }
        }
    }
    let refs: Vec<&str> = categories.iter().map(String::as_str).collect();
    let per_trial: Vec<BTreeMap<String, f64>> = trials
        .iter()
        .map(|t| category_percentages(t, attribute, &refs))
        .collect();
    Ok(categories
        .iter()
        .map(|c| {
            let values: Vec<f64> = per_trial.iter().map(|m| m[c]).collect();
            DistributionRow {
                attribute,
                category: c.clone(),
                mean_pct: mean(&values),
                std_pct: std_dev(&values),
                per_trial: values,
                significance: None,
            }
        })
        .collect())
}

/// Marks each variant row against the Base row of the same category. Needs
/// at least two trials per side.
pub fn compare_conditions(
    base: &[DistributionRow],
    variant: &[DistributionRow],
) -> Result<Vec<DistributionRow>, StatsError> {
    variant
        .iter()
        .map(|row| {
            let zeros;
            let base_values = match base.iter().find(|b| b.category == row.category) {
                Some(b) => &b.per_trial,
                None => {
                    zeros = vec![0.0; base.first().map_or(0, |b| b.per_trial.len())];
                    &zeros
                }
            };
            let cmp = compare_samples(base_values, &row.per_trial)?;
            Ok(DistributionRow {
                significance: Some(cmp.mark),
                ..row.clone()
            })
        })
        .collect()
}
