//! Rendering analysis results as CSV, Markdown or JSON tables, and lexical
//! comparison of persona descriptions across conditions.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manipulation::ConditionKind;
use crate::normalization::Attribute;
use crate::pipeline::{AnalysisBundle, RunArtifact, ScoreRow};
use crate::questionnaire::Instrument;
use crate::statistics::Significance;

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("empty corpus: {0}")]
    EmptyCorpus(&'static str),
    #[error("unsupported format `{0}` (expected csv, markdown or structured)")]
    UnsupportedFormat(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Word frequencies

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn builtin() -> Stopwords {
        Stopwords::parse(DEFAULT_STOPWORDS)
    }

    pub fn none() -> Stopwords {
        Stopwords(HashSet::new())
    }

    /// One word per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Stopwords {
        Stopwords(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Stopwords, ReportError> {
        let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Stopwords::parse(&text))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }
}

/// Lowercased runs of letters and digits.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordFreqDiff {
    pub token: String,
    /// Occurrences per 1000 tokens in corpus A.
    pub freq_a: f64,
    pub freq_b: f64,
    /// `freq_a - freq_b`.
    pub delta: f64,
}

fn frequencies(docs: &[String], stop: &Stopwords) -> (BTreeMap<String, usize>, usize) {
    let mut counts = BTreeMap::new();
    let mut total = 0;
    for doc in docs {
        for token in tokenize(doc) {
            if stop.contains(&token) {
                continue;
            }
            total += 1;
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    (counts, total)
}

/// Per-1000-token frequency differences between two corpora, sorted by
/// absolute difference (largest first), ties by token.
pub fn word_freq_diff(a: &[String], b: &[String], stop: &Stopwords) -> Result<Vec<WordFreqDiff>, ReportError> {
    let (ca, na) = frequencies(a, stop);
    let (cb, nb) = frequencies(b, stop);
    if na == 0 {
        return Err(ReportError::EmptyCorpus("A"));
    }
    if nb == 0 {
        return Err(ReportError::EmptyCorpus("B"));
    }
    let tokens: std::collections::BTreeSet<&String> = ca.keys().chain(cb.keys()).collect();
    let mut out: Vec<WordFreqDiff> = tokens
        .into_iter()
        .map(|t| {
            let freq_a = 1000.0 * *ca.get(t).unwrap_or(&0) as f64 / na as f64;
            let freq_b = 1000.0 * *cb.get(t).unwrap_or(&0) as f64 / nb as f64;
            WordFreqDiff {
                token: t.clone(),
                freq_a,
                freq_b,
                delta: freq_a - freq_b,
            }
        })
        .collect();
    // Deltas within 1e-9 count as ties so rounding noise does not decide order.
    out.sort_by(|x, y| {
        let (dx, dy) = (x.delta.abs(), y.delta.abs());
        if (dx - dy).abs() <= 1e-9 {
            x.token.cmp(&y.token)
        } else {
            dy.partial_cmp(&dx).expect("finite")
        }
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Cell {
    Text {
        text: String,
    },
    Value {
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        std: Option<f64>,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        marks: String,
    },
    Missing,
}

impl Cell {
    pub fn text(s: impl Into<String>) -> Cell {
        Cell::Text { text: s.into() }
    }

    pub fn value(v: f64) -> Cell {
        Cell::Value {
            value: v,
            std: None,
            marks: String::new(),
        }
    }

    pub fn opt(v: Option<f64>) -> Cell {
        v.map_or(Cell::Missing, Cell::value)
    }

    pub fn mean_std(mean: f64, std: f64, marks: String) -> Cell {
        Cell::Value {
            value: mean,
            std: Some(std),
            marks,
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Text { text } => f.write_str(text),
            Cell::Value { value, std, marks } => {
                write!(f, "{value:.2}")?;
                if let Some(s) = std {
                    write!(f, " ± {s:.2}")?;
                }
                f.write_str(marks)
            }
            Cell::Missing => f.write_str("-"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub legend: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Markdown,
    Structured,
}

impl FromStr for Format {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "markdown" | "md" => Ok(Format::Markdown),
            "structured" | "json" => Ok(Format::Structured),
            other => Err(ReportError::UnsupportedFormat(other.to_string())),
        }
    }
}

const DISTRIBUTION_LEGEND: &str =
    "Different from Base (two-sided unpaired t-test over trials): * p<0.05, † p<0.01, ‡ p<0.001 (‡ also marks zero-variance separation).";
const SCORE_LEGEND: &str = "Different from input at the individual level (two-sided paired t-test): * p<0.05, † p<0.01; at the population level (two-sided unpaired t-test): § p<0.05, ¶ p<0.01.";
const CORRELATION_LEGEND: &str = "Pearson r; significance * p<0.05, † p<0.01, ‡ p<0.001.";
const ALPHA_LEGEND: &str = "Cronbach's alpha; - marks undefined reliability (zero total-score variance).";

/// Mark printed next to a distribution cell.
pub fn distribution_mark(s: Option<Significance>) -> &'static str {
    match s {
        Some(Significance::P05) => "*",
        Some(Significance::P01) => "†",
        Some(Significance::P001) | Some(Significance::Separated) => "‡",
        _ => "",
    }
}

fn score_marks(paired: Option<Significance>, unpaired: Option<Significance>) -> String {
    let p = match paired {
        Some(Significance::P05) => "*",
        Some(Significance::P01 | Significance::P001 | Significance::Separated) => "†",
        _ => "",
    };
    let u = match unpaired {
        Some(Significance::P05) => "§",
        Some(Significance::P01 | Significance::P001 | Significance::Separated) => "¶",
        _ => "",
    };
    match (p.is_empty(), u.is_empty()) {
        (false, false) => format!("{p},{u}"),
        _ => format!("{p}{u}"),
    }
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

fn distribution_tables(bundle: &AnalysisBundle) -> Vec<Table> {
    let mut models: Vec<&str> = Vec::new();
    for d in &bundle.distributions {
        if !models.contains(&d.model_id.as_str()) {
            models.push(&d.model_id);
        }
    }
    models
        .into_iter()
        .map(|model| {
            let tables: Vec<_> = ConditionKind::ALL
                .iter()
                .filter_map(|&k| bundle.distribution(model, k))
                .collect();
            let mut columns = vec!["Attribute".to_string(), "Category".to_string()];
            columns.extend(
                tables
                    .iter()
                    .map(|t| format!("{} ({} trials)", t.condition.label(), t.trials)),
            );
            let mut rows =
                vec![{
                    let mut row = vec![Cell::text("Age"), Cell::text("mean")];
                    row.extend(tables.iter().map(|t| {
                        Cell::mean_std(t.age.mean, t.age.std, distribution_mark(t.age.significance).to_string())
                    }));
                    row
                }];
            for attribute in Attribute::ALL {
                let mut categories: Vec<&str> = Vec::new();
                for t in &tables {
                    for r in t.rows.iter().filter(|r| r.attribute == attribute) {
                        if !categories.contains(&r.category.as_str()) {
                            categories.push(&r.category);
                        }
                    }
                }
                for category in categories {
                    let mut row = vec![Cell::text(attribute.label()), Cell::text(category)];
                    row.extend(tables.iter().map(|t| {
                        t.rows
                            .iter()
                            .find(|r| r.attribute == attribute && r.category == category)
                            .map_or(Cell::Missing, |r| {
                                Cell::mean_std(r.mean_pct, r.std_pct, distribution_mark(r.significance).to_string())
                            })
                    }));
                    rows.push(row);
                }
            }
            Table {
                id: format!("distribution_{}", slug(model)),
                title: format!("Sociodemographic distribution (%), {model}"),
                columns,
                rows,
                legend: Some(DISTRIBUTION_LEGEND.into()),
            }
        })
        .collect()
}

fn score_table(bundle: &AnalysisBundle, instrument: Instrument) -> Option<Table> {
    let rows: Vec<&ScoreRow> = bundle.scores.iter().filter(|r| r.instrument == instrument).collect();
    let first = rows.first()?;
    let mut columns = vec!["Model".to_string(), "Pop.".to_string(), "n".to_string()];
    columns.extend(first.cells.iter().map(|c| c.scale.clone()));
    Some(Table {
        id: format!("scores_{}", slug(instrument.as_str())),
        title: format!("{instrument} scores (mean ± std)"),
        columns,
        rows: rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    Cell::text(r.model_id.clone().unwrap_or_default()),
                    Cell::text(&r.population),
                    Cell::text(r.n.to_string()),
                ];
                row.extend(
                    r.cells
                        .iter()
                        .map(|c| Cell::mean_std(c.mean, c.std, score_marks(c.paired, c.unpaired))),
                );
                row
            })
            .collect(),
        legend: Some(SCORE_LEGEND.into()),
    })
}

fn correlation_table(bundle: &AnalysisBundle) -> Option<Table> {
    let first = bundle.correlations.first()?;
    let mut columns = vec!["Model".to_string(), "EPQR-A".to_string(), "n".to_string()];
    columns.extend(first.columns.iter().cloned());
    let mut rows = Vec::new();
    for m in &bundle.correlations {
        for (i, r) in m.rows.iter().enumerate() {
            let mut row = vec![Cell::text(&m.model_id), Cell::text(r), Cell::text(m.n.to_string())];
            row.extend(m.cells[i].iter().map(|c| match c {
                Some(t) => Cell::Value {
                    value: t.statistic,
                    std: None,
                    marks: distribution_mark(Some(Significance::from_p(t.p_value))).to_string(),
                },
                None => Cell::Missing,
            }));
            rows.push(row);
        }
    }
    Some(Table {
        id: "correlation".into(),
        title: "Pearson correlation between EPQR-A and BFI scores (Base)".into(),
        columns,
        rows,
        legend: Some(CORRELATION_LEGEND.into()),
    })
}

fn alpha_table(bundle: &AnalysisBundle, instrument: Instrument) -> Option<Table> {
    let rows: Vec<_> = bundle.alphas.iter().filter(|r| r.instrument == instrument).collect();
    let first = rows.first()?;
    let mut columns = vec!["Model".to_string(), "Pop.".to_string(), "n".to_string()];
    columns.extend(first.values.iter().map(|v| v.scale.clone()));
    Some(Table {
        id: format!("alpha_{}", slug(instrument.as_str())),
        title: format!("Cronbach's alpha, {instrument}"),
        columns,
        rows: rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    Cell::text(r.model_id.clone().unwrap_or_default()),
                    Cell::text(&r.population),
                    Cell::text(r.n.to_string()),
                ];
                row.extend(r.values.iter().map(|v| Cell::opt(v.alpha)));
                row
            })
            .collect(),
        legend: Some(ALPHA_LEGEND.into()),
    })
}

fn error_table(bundle: &AnalysisBundle) -> Option<Table> {
    if bundle.errors.is_empty() {
        return None;
    }
    let columns = [
        "Model",
        "Population",
        "Instrument",
        "Scale",
        "Acc",
        "Precision",
        "Recall",
        "Specificity",
        "MAE",
        "RMSE",
    ]
    .map(String::from)
    .to_vec();
    let mut rows = Vec::new();
    for e in &bundle.errors {
        for s in &e.metrics.scales {
            rows.push(vec![
                Cell::text(&e.model_id),
                Cell::text(e.condition.label()),
                Cell::text(e.metrics.instrument.as_str()),
                Cell::text(&s.scale),
                Cell::opt(s.acc),
                Cell::opt(s.precision),
                Cell::opt(s.recall),
                Cell::opt(s.specificity),
                Cell::value(s.mae),
                Cell::value(s.rmse),
            ]);
        }
    }
    Some(Table {
        id: "errors".into(),
        title: "Accuracy and error of regenerated answers against the input answers".into(),
        columns,
        rows,
        legend: Some("Item-level rates in %, positive class = TRUE answer; MAE and RMSE over scale scores.".into()),
    })
}

fn failure_table(bundle: &AnalysisBundle) -> Table {
    Table {
        id: "failures".into(),
        title: "Generation failures per cell".into(),
        columns: ["Model", "Population", "Trial", "Input", "Personas", "Failures"]
            .map(String::from)
            .to_vec(),
        rows: bundle
            .failures
            .iter()
            .map(|f| {
                vec![
                    Cell::text(&f.model_id),
                    Cell::text(f.condition.label()),
                    Cell::text(f.trial.to_string()),
                    Cell::text(f.input.to_string()),
                    Cell::text(f.personas.to_string()),
                    Cell::text(f.failures.to_string()),
                ]
            })
            .collect(),
        legend: None,
    }
}

/// Every table derivable from an analysis, in reporting order.
pub fn tables(bundle: &AnalysisBundle) -> Vec<Table> {
    let mut out = distribution_tables(bundle);
    out.extend(score_table(bundle, Instrument::Epqra));
    out.extend(score_table(bundle, Instrument::Bfi));
    out.extend(correlation_table(bundle));
    out.extend(alpha_table(bundle, Instrument::Epqra));
    out.extend(alpha_table(bundle, Instrument::Bfi));
    out.extend(error_table(bundle));
    out.push(failure_table(bundle));
    out
}

pub fn render_csv(table: &Table) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&table.columns)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|c| c.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 cells"))
}

pub fn render_markdown(table: &Table) -> String {
    let esc = |s: &str| s.replace('|', "\\|");
    let mut out = format!("### {}\n\n", table.title);
    out.push_str(&format!(
        "| {} |\n",
        table.columns.iter().map(|c| esc(c)).collect::<Vec<_>>().join(" | ")
    ));
    out.push_str(&format!("|{}\n", "---|".repeat(table.columns.len())));
    for row in &table.rows {
        out.push_str(&format!(
            "| {} |\n",
            row.iter().map(|c| esc(&c.to_string())).collect::<Vec<_>>().join(" | ")
        ));
    }
    if let Some(legend) = &table.legend {
        out.push_str(&format!("\n{legend}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// Report bundle

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordDiffSet {
    pub model_id: String,
    /// Corpus A.
    pub condition: ConditionKind,
    /// Corpus B.
    pub baseline: ConditionKind,
    pub diffs: Vec<WordFreqDiff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub run_id: String,
    pub config_hash: String,
    pub tables: Vec<Table>,
    pub word_diffs: Vec<WordDiffSet>,
}

/// Collects tables and, for every model, the description word differences
/// of each manipulated condition against Base (top `top_n` tokens).
pub fn build_report(
    run: &RunArtifact,
    analysis: &AnalysisBundle,
    stop: &Stopwords,
    top_n: usize,
) -> Result<ReportBundle, ReportError> {
    let mut word_diffs = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for c in &run.cells {
        if !models.contains(&c.model_id.as_str()) {
            models.push(&c.model_id);
        }
    }
    let corpus = |model: &str, kind: ConditionKind| -> Vec<String> {
        run.cells_for(model, kind)
            .iter()
            .flat_map(|c| c.respondents.iter().map(|r| r.persona.description.clone()))
            .collect()
    };
    for model in models {
        let base = corpus(model, ConditionKind::Base);
        if base.is_empty() {
            continue;
        }
        for kind in [ConditionKind::MaxN, ConditionKind::MaxP] {
            let variant = corpus(model, kind);
            if variant.is_empty() {
                continue;
            }
            let mut diffs = word_freq_diff(&variant, &base, stop)?;
            diffs.truncate(top_n);
            word_diffs.push(WordDiffSet {
                model_id: model.to_string(),
                condition: kind,
                baseline: ConditionKind::Base,
                diffs,
            });
        }
    }
    Ok(ReportBundle {
        run_id: analysis.run_id.clone(),
        config_hash: analysis.config_hash.clone(),
        tables: tables(analysis),
        word_diffs,
    })
}

fn word_diff_table(sets: &[WordDiffSet]) -> Table {
    Table {
        id: "word_diffs".into(),
        title: "Description word frequency differences (per 1000 tokens)".into(),
        columns: [
            "Model",
            "Population",
            "Baseline",
            "Token",
            "Freq",
            "Baseline freq",
            "Delta",
        ]
        .map(String::from)
        .to_vec(),
        rows: sets
            .iter()
            .flat_map(|s| {
                s.diffs.iter().map(move |d| {
                    vec![
                        Cell::text(&s.model_id),
                        Cell::text(s.condition.label()),
                        Cell::text(s.baseline.label()),
                        Cell::text(&d.token),
                        Cell::value(d.freq_a),
                        Cell::value(d.freq_b),
                        Cell::value(d.delta),
                    ]
                })
            })
            .collect(),
        legend: None,
    }
}

/// Writes the report into `dir`: one CSV per table, a single Markdown
/// document, or one JSON document. Returns the files written.
pub fn write_report(report: &ReportBundle, dir: &Path, format: Format) -> Result<Vec<PathBuf>, ReportError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut tables = report.tables.clone();
    if !report.word_diffs.is_empty() {
        tables.push(word_diff_table(&report.word_diffs));
    }
    let mut written = Vec::new();
    match format {
        Format::Csv => {
            for t in &tables {
                let path = dir.join(format!("{}.csv", t.id));
                fs::write(&path, render_csv(t)?).map_err(io(&path))?;
                written.push(path);
            }
        }
        Format::Markdown => {
            let mut doc = format!(
                "# Run {}\n\nConfiguration hash: `{}`\n\n",
                report.run_id, report.config_hash
            );
            for t in &tables {
                doc.push_str(&render_markdown(t));
                doc.push('\n');
            }
            let path = dir.join("report.md");
            fs::write(&path, doc).map_err(io(&path))?;
            written.push(path);
        }
        Format::Structured => {
            let path = dir.join("report.json");
            let text = serde_json::to_string_pretty(report).expect("report serializes");
            fs::write(&path, text).map_err(io(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn docs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hand_counted_frequencies() {
        let d = word_freq_diff(&docs(&["alpha alpha beta"]), &docs(&["beta"]), &Stopwords::none()).unwrap();
        assert_eq!(d[0].token, "alpha");
        assert!((d[0].freq_a - 666.666_666_666_666_6).abs() < 1e-9);
        assert_eq!(d[0].freq_b, 0.0);
        assert!((d[0].delta - 666.67).abs() < 0.005);
        assert_eq!(d[1].token, "beta");
        assert!((d[1].delta - (333.333_333_333_333_3 - 1000.0)).abs() < 1e-9);
    }

    #[test]
    fn identical_corpora_have_zero_deltas() {
        let a = docs(&["She writes novels, and she loves the quiet.", "Writes poems."]);
        assert!(word_freq_diff(&a, &a, &Stopwords::builtin())
            .unwrap()
            .iter()
            .all(|d| d.delta == 0.0));
    }

    #[test]
    fn stopwords_and_punctuation_are_removed() {
        let stop = Stopwords::builtin();
        assert!(stop.contains("the") && stop.contains("and") && !stop.contains("writer"));
        let d = word_freq_diff(&docs(&["The writer -- and THE editor!"]), &docs(&["editor"]), &stop).unwrap();
        let tokens: Vec<&str> = d.iter().map(|d| d.token.as_str()).collect();
        assert_eq!(tokens, ["editor", "writer"]);
        assert!(matches!(
            word_freq_diff(&docs(&["the and"]), &docs(&["x"]), &stop),
            Err(ReportError::EmptyCorpus("A"))
        ));
        assert!(word_freq_diff(&[], &docs(&["x"]), &stop).is_err());
    }

    #[test]
    fn cells_render_two_decimals() {
        assert_eq!(Cell::mean_std(25.714, 1.356, "‡".into()).to_string(), "25.71 ± 1.36‡");
        assert_eq!(Cell::opt(None).to_string(), "-");
        assert_eq!(Cell::value(0.0).to_string(), "0.00");
        assert_eq!(score_marks(Some(Significance::P01), Some(Significance::P05)), "†,§");
        assert_eq!(score_marks(None, Some(Significance::P001)), "¶");
        assert!("xml".parse::<Format>().is_err());
        assert_eq!("md".parse::<Format>().unwrap(), Format::Markdown);
    }

    #[test]
    fn csv_and_markdown_carry_same_text() {
        let t = Table {
            id: "t".into(),
            title: "T".into(),
            columns: vec!["a".into(), "b|c".into()],
            rows: vec![vec![Cell::text("x, y"), Cell::mean_std(1.0, 0.5, "*".into())]],
            legend: Some("legend".into()),
        };
        let csv = render_csv(&t).unwrap();
        assert_eq!(csv, "a,b|c\n\"x, y\",1.00 ± 0.50*\n");
        let md = render_markdown(&t);
        assert!(md.contains("| x, y | 1.00 ± 0.50* |"));
        assert!(md.contains("b\\|c"));
        assert!(md.ends_with("legend\n"));
    }

    proptest! {
        #[test]
        fn antisymmetric(a in prop::collection::vec("[a-e ]{1,20}", 1..5), b in prop::collection::vec("[a-e ]{1,20}", 1..5)) {
            let stop = Stopwords::none();
            if let (Ok(ab), Ok(ba)) = (word_freq_diff(&a, &b, &stop), word_freq_diff(&b, &a, &stop)) {
                let m: BTreeMap<_, _> = ba.iter().map(|d| (d.token.clone(), d.delta)).collect();
                for d in &ab {
                    prop_assert!((d.delta + m[&d.token]).abs() < 1e-9);
                }
                let sum: f64 = ab.iter().map(|d| d.freq_a).sum();
                prop_assert!((sum - 1000.0).abs() < 1e-6);
            }
        }

        #[test]
        fn csv_round_trip_within_rounding(values in prop::collection::vec((-1000.0f64..1000.0, 0.0f64..100.0), 1..20)) {
            let t = Table {
                id: "t".into(),
                title: "T".into(),
                columns: vec!["v".into()],
                rows: values.iter().map(|&(m, s)| vec![Cell::mean_std(m, s, String::new())]).collect(),
                legend: None,
            };
            let csv = render_csv(&t).unwrap();
            let mut reader = csv::Reader::from_reader(csv.as_bytes());
            for (rec, &(m, s)) in reader.records().zip(&values) {
                let rec = rec.unwrap();
                let (pm, ps) = rec[0].split_once(" ± ").unwrap();
                prop_assert!((pm.parse::<f64>().unwrap() - m).abs() <= 0.005 + 1e-9);
                prop_assert!((ps.parse::<f64>().unwrap() - s).abs() <= 0.005 + 1e-9);
            }
        }
    }
}
