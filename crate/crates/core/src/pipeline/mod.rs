//! Experiment orchestration: models x conditions x trials, persisted
//! incrementally to a run directory and resumable from it.
//!
//! Run directory layout:
//!
//! ```text
//! config.json            experiment configuration snapshot
//! manifest.json          run id, config hash, input hash
//! input.jsonl            copy of the input sheets
//! records.jsonl          one GenerationRecord per line, appended per cell
//! cells/*.json           one file per completed (model, condition, trial)
//! cache/responses.jsonl  raw backend responses
//! quarantine/            unreadable cell files moved aside on resume
//! analysis/              analysis and report outputs
//! ```

mod analysis;

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use analysis::{
    analyze, AgeRow, AlphaRow, AnalysisBundle, AnalyzeOptions, CorrelationMatrix, DistributionTable, ErrorRow,
    FailureSummary, ScoreCell, ScoreRow, ScoreSource,
};

use crate::generation::cache::ResponseCache;
use crate::generation::mock::{FixtureBackend, SimulatedBackend};
use crate::generation::{Backend, BackendConfig, BackendKind, GenerationRecord, Generator, PersonaRecord, Task};
use crate::manipulation::{apply_condition, Condition, ConditionKind, ManipulationError};
use crate::normalization::{normalize_persona, CategoryMaps, NormalizationError, NormalizedAttributes};
use crate::questionnaire::{score, AnswerSheet, Instrument, Questionnaire, QuestionnaireError, ScaleScores};
use crate::statistics::StatsError;

pub const RUN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Input {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("input contains no EPQR-A sheets")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run directory {dir} was created with a different configuration (hash {existing}, now {current}); use a new output directory")]
    ConfigMismatch {
        dir: PathBuf,
        existing: String,
        current: String,
    },
    #[error("{0} is not a run directory (no manifest.json)")]
    NotARun(PathBuf),
    #[error("no Base condition in run; significance marks need it")]
    MissingBase,
    #[error("backend setup failed for {model}: {message}")]
    Backend { model: String, message: String },
    #[error(transparent)]
    Manipulation(#[from] ManipulationError),
    #[error(transparent)]
    Questionnaire(#[from] QuestionnaireError),
    #[error(transparent)]
    Normalization(#[from] NormalizationError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub condition: ConditionKind,
    pub trials: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// JSONL answer sheets. EPQR-A sheets drive generation; BFI sheets, if
    /// present, are only used as the input row of BFI tables.
    pub input_path: PathBuf,
    pub output_dir: PathBuf,
    pub models: Vec<BackendConfig>,
    pub conditions: Vec<ConditionSpec>,
    /// Instruments administered to generated personas. BFI is only
    /// administered under the Base condition.
    pub instruments: Vec<Instrument>,
    /// Trial whose personas answer the questionnaires.
    pub representative_trial: u32,
    /// Administer questionnaires in every trial instead.
    pub administer_all_trials: bool,
    pub seed: u64,
    /// Maximum concurrent backend calls.
    pub concurrency: usize,
    /// Replay file used by mock-kind models instead of the simulator.
    pub fixtures: Option<PathBuf>,
    /// Category map overrides merged over the built-in maps.
    pub category_maps: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            input_path: PathBuf::from("input.jsonl"),
            output_dir: PathBuf::from("runs/default"),
            models: vec![BackendConfig::mock("mock")],
            conditions: vec![
                ConditionSpec {
                    condition: ConditionKind::Base,
                    trials: 10,
                },
                ConditionSpec {
                    condition: ConditionKind::MaxN,
                    trials: 5,
                },
                ConditionSpec {
                    condition: ConditionKind::MaxP,
                    trials: 5,
                },
            ],
            instruments: vec![Instrument::Epqra, Instrument::Bfi],
            representative_trial: 0,
            administer_all_trials: false,
            seed: 0,
            concurrency: 4,
            fixtures: None,
            category_maps: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, PipelineError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.models.is_empty() {
            return bad("no models configured".into());
        }
        let mut ids = HashSet::new();
        for m in &self.models {
            m.validate()
                .map_err(|e| PipelineError::Config(format!("model {}: {e}", m.model_id)))?;
            if !ids.insert(cell_slug(&m.model_id)) {
                return bad(format!("duplicate model id `{}`", m.model_id));
            }
        }
        if self.conditions.is_empty() {
            return bad("no conditions configured".into());
        }
        let mut kinds = HashSet::new();
        for c in &self.conditions {
            if c.trials == 0 {
                return bad(format!("{}: trials must be at least 1", c.condition));
            }
            if !kinds.insert(c.condition) {
                return bad(format!("condition {} listed twice", c.condition));
            }
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        Ok(())
    }

    /// Hash of everything that affects results. Output location and
    /// concurrency are excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            obj.remove("concurrency");
            obj.remove("input_path");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn trials(&self, kind: ConditionKind) -> u32 {
        self.conditions
            .iter()
            .find(|c| c.condition == kind)
            .map_or(0, |c| c.trials)
    }

    fn administers(&self, kind: ConditionKind, trial: u32, instrument: Instrument) -> bool {
        let trial_ok = self.administer_all_trials || trial == self.representative_trial;
        let condition_ok = instrument == Instrument::Epqra || kind == ConditionKind::Base;
        trial_ok && condition_ok && self.instruments.contains(&instrument)
    }

    pub fn category_maps(&self) -> Result<CategoryMaps, PipelineError> {
        let maps = CategoryMaps::builtin();
        Ok(match &self.category_maps {
            Some(path) => maps.load_overrides(path)?,
            None => maps,
        })
    }
}

/// Derives a 64-bit seed from labelled parts.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn trial_seed(run_seed: u64, model_id: &str, kind: ConditionKind, trial: u32) -> u64 {
    derive_seed(&[&run_seed.to_string(), model_id, kind.as_str(), &trial.to_string()])
}

/// The condition instance for a trial. Random populations depend on the run
/// seed and trial only, so every model sees the same random sheets.
pub fn trial_condition(run_seed: u64, kind: ConditionKind, trial: u32) -> Condition {
    Condition::new(
        kind,
        derive_seed(&[&run_seed.to_string(), "random-population", &trial.to_string()]),
    )
}

// ---------------------------------------------------------------------------
// Input

/// Reads JSONL answer sheets, validating each against its instrument.
pub fn read_sheets(path: &Path) -> Result<Vec<AnswerSheet>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let epq = Questionnaire::epqra();
    let bfi = Questionnaire::bfi();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| PipelineError::Input {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let sheet: AnswerSheet = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let q = match sheet.instrument {
            Instrument::Epqra => &epq,
            Instrument::Bfi => &bfi,
        };
        q.check_sheet(&sheet).map_err(|e| err(e.to_string()))?;
        if !seen.insert((sheet.instrument, sheet.respondent_id.clone())) {
            return Err(err(format!("duplicate respondent `{}`", sheet.respondent_id)));
        }
        out.push(sheet);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("serializable"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Artifacts

/// Everything produced for one respondent in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RespondentResult {
    pub respondent_id: String,
    /// The sheet after the condition was applied.
    pub input: AnswerSheet,
    pub input_scores: ScaleScores,
    pub persona: PersonaRecord,
    pub attributes: NormalizedAttributes,
    #[serde(default)]
    pub regenerated: BTreeMap<Instrument, AnswerSheet>,
    #[serde(default)]
    pub scores: BTreeMap<Instrument, ScaleScores>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub respondent_id: String,
    #[serde(flatten)]
    pub task: Task,
    pub attempts: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellArtifact {
    pub format_version: u32,
    pub model_id: String,
    pub condition: Condition,
    pub trial: u32,
    /// Sample index handed to the backend and used in cache keys.
    pub sample: u64,
    pub administered: Vec<Instrument>,
    pub respondents: Vec<RespondentResult>,
    pub failures: Vec<FailureEntry>,
}

impl CellArtifact {
    pub fn kind(&self) -> ConditionKind {
        self.condition.kind()
    }

    /// Respondents whose persona was generated plus persona failures.
    pub fn accounted(&self) -> usize {
        self.respondents.len() + self.failures.iter().filter(|f| f.task == Task::Persona).count()
    }

    pub fn regenerated(&self, instrument: Instrument) -> impl Iterator<Item = (&RespondentResult, &AnswerSheet)> {
        self.respondents
            .iter()
            .filter_map(move |r| r.regenerated.get(&instrument).map(|s| (r, s)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub input_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub config: ExperimentConfig,
    /// Original EPQR-A input sheets.
    pub input: Vec<AnswerSheet>,
    /// Optional BFI sheets of the same respondents.
    pub input_bfi: Vec<AnswerSheet>,
    /// Cells in configuration order: model, condition, trial.
    pub cells: Vec<CellArtifact>,
}

impl RunArtifact {
    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn cells_for(&self, model_id: &str, kind: ConditionKind) -> Vec<&CellArtifact> {
        self.cells
            .iter()
            .filter(|c| c.model_id == model_id && c.kind() == kind)
            .collect()
    }

    pub fn failure_count(&self) -> usize {
        self.cells.iter().map(|c| c.failures.len()).sum()
    }

    /// Loads a run directory without executing anything. Missing cells are
    /// simply absent.
    pub fn load(run_dir: &Path) -> Result<RunArtifact, PipelineError> {
        let (manifest, config) = read_manifest(run_dir)?;
        let (input, input_bfi) = split_input(read_sheets(&run_dir.join("input.jsonl"))?);
        let mut cells = Vec::new();
        for (model, kind, trial) in cell_plan(&config) {
            let path = cell_path(run_dir, &model.model_id, kind, trial);
            if path.exists() {
                cells.push(read_cell(&path)?);
            }
        }
        Ok(RunArtifact {
            run_dir: run_dir.to_path_buf(),
            manifest,
            config,
            input,
            input_bfi,
            cells,
        })
    }
}

fn split_input(sheets: Vec<AnswerSheet>) -> (Vec<AnswerSheet>, Vec<AnswerSheet>) {
    sheets.into_iter().partition(|s| s.instrument == Instrument::Epqra)
}

fn read_manifest(run_dir: &Path) -> Result<(RunManifest, ExperimentConfig), PipelineError> {
    let mpath = run_dir.join("manifest.json");
    if !mpath.exists() {
        return Err(PipelineError::NotARun(run_dir.to_path_buf()));
    }
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| PipelineError::Input {
        path: mpath.clone(),
        line: 1,
        message: e.to_string(),
    })?;
    let config = ExperimentConfig::load(&run_dir.join("config.json"))?;
    if config.hash() != manifest.config_hash {
        return Err(PipelineError::ConfigMismatch {
            dir: run_dir.to_path_buf(),
            existing: manifest.config_hash,
            current: config.hash(),
        });
    }
    Ok((manifest, config))
}

fn cell_slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn cell_path(run_dir: &Path, model_id: &str, kind: ConditionKind, trial: u32) -> PathBuf {
    run_dir
        .join("cells")
        .join(format!("{}__{}__{trial:03}.json", cell_slug(model_id), kind.as_str()))
}

fn cell_plan(config: &ExperimentConfig) -> Vec<(&BackendConfig, ConditionKind, u32)> {
    let mut plan = Vec::new();
    for model in &config.models {
        for spec in &config.conditions {
            for trial in 0..spec.trials {
                plan.push((model, spec.condition, trial));
            }
        }
    }
    plan
}

fn read_cell(path: &Path) -> Result<CellArtifact, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let cell: CellArtifact = serde_json::from_str(&text).map_err(|e| PipelineError::Input {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if cell.format_version != RUN_FORMAT_VERSION {
        return Err(PipelineError::Input {
            path: path.to_path_buf(),
            line: 1,
            message: format!("unsupported format_version {}", cell.format_version),
        });
    }
    Ok(cell)
}

// ---------------------------------------------------------------------------
// Execution

/// Builds the backend for one model.
pub type BackendFactory<'a> = dyn Fn(&BackendConfig) -> Result<Box<dyn Backend + 'a>, PipelineError> + 'a;

/// Default backends: HTTP chat for `http_chat` models; for `mock` models,
/// fixture replay if a fixture file is configured, else the simulator.
pub fn default_backend(config: &BackendConfig, fixtures: Option<&Path>) -> Result<Box<dyn Backend>, PipelineError> {
    let fail = |message: String| PipelineError::Backend {
        model: config.model_id.clone(),
        message,
    };
    match config.kind {
        BackendKind::Mock => match fixtures {
            Some(path) => Ok(Box::new(
                FixtureBackend::open(path).map_err(|e| fail(format!("{}: {e}", path.display())))?,
            )),
            None => Ok(Box::new(SimulatedBackend::default())),
        },
        #[cfg(feature = "http")]
        BackendKind::HttpChat => Ok(Box::new(
            crate::generation::http::HttpChatBackend::new(config).map_err(|e| fail(e.to_string()))?,
        )),
        #[cfg(not(feature = "http"))]
        BackendKind::HttpChat => Err(fail("built without HTTP support".into())),
    }
}

/// Runs (or continues) the experiment described by `config` in
/// `config.output_dir` with the default backends.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifact, PipelineError> {
    let fixtures = config.fixtures.clone();
    run_experiment_with(config, &|m| default_backend(m, fixtures.as_deref()))
}

pub fn run_experiment_with(
    config: &ExperimentConfig,
    factory: &BackendFactory<'_>,
) -> Result<RunArtifact, PipelineError> {
    config.validate()?;
    let run_dir = config.output_dir.clone();
    let manifest = prepare_run_dir(config, &run_dir)?;
    execute(config, &run_dir, manifest, factory)
}

/// Completes the missing cells of an existing run.
pub fn resume(run_dir: &Path) -> Result<RunArtifact, PipelineError> {
    let (_, config) = read_manifest(run_dir)?;
    let fixtures = config.fixtures.clone();
    resume_with(run_dir, &|m| default_backend(m, fixtures.as_deref()))
}

pub fn resume_with(run_dir: &Path, factory: &BackendFactory<'_>) -> Result<RunArtifact, PipelineError> {
    let (manifest, config) = read_manifest(run_dir)?;
    execute(&config, run_dir, manifest, factory)
}

fn prepare_run_dir(config: &ExperimentConfig, run_dir: &Path) -> Result<RunManifest, PipelineError> {
    let current = config.hash();
    if run_dir.join("manifest.json").exists() {
        let (manifest, _) = read_manifest(run_dir)?;
        if manifest.config_hash != current {
            return Err(PipelineError::ConfigMismatch {
                dir: run_dir.to_path_buf(),
                existing: manifest.config_hash,
                current,
            });
        }
        let input_bytes = fs::read(&config.input_path).map_err(io_err(&config.input_path))?;
        let input_hash = hex::encode(Sha256::digest(&input_bytes));
        if input_hash != manifest.input_hash {
            return Err(PipelineError::ConfigMismatch {
                dir: run_dir.to_path_buf(),
                existing: format!("input {}", manifest.input_hash),
                current: format!("input {input_hash}"),
            });
        }
        return Ok(manifest);
    }
    let sheets = read_sheets(&config.input_path)?;
    if !sheets.iter().any(|s| s.instrument == Instrument::Epqra) {
        return Err(PipelineError::EmptyInput);
    }
    let input_bytes = fs::read(&config.input_path).map_err(io_err(&config.input_path))?;
    let manifest = RunManifest {
        format_version: RUN_FORMAT_VERSION,
        run_id: current[..12].to_string(),
        config_hash: current,
        input_hash: hex::encode(Sha256::digest(&input_bytes)),
    };
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    write_atomic(&run_dir.join("input.jsonl"), &input_bytes)?;
    write_atomic(&run_dir.join("config.json"), config.to_json().as_bytes())?;
    write_atomic(
        &run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest").as_bytes(),
    )?;
    Ok(manifest)
}

struct Shared<'a> {
    config: &'a ExperimentConfig,
    maps: CategoryMaps,
    epq: Questionnaire,
    bfi: Questionnaire,
    cache: ResponseCache,
}

fn execute<'f>(
    config: &ExperimentConfig,
    run_dir: &Path,
    manifest: RunManifest,
    factory: &BackendFactory<'f>,
) -> Result<RunArtifact, PipelineError> {
    let (input, input_bfi) = split_input(read_sheets(&run_dir.join("input.jsonl"))?);
    if input.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    let cache_path = run_dir.join("cache").join("responses.jsonl");
    let shared = Shared {
        config,
        maps: config.category_maps()?,
        epq: Questionnaire::epqra(),
        bfi: Questionnaire::bfi(),
        cache: ResponseCache::open(&cache_path).map_err(io_err(&cache_path))?,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let records_path = run_dir.join("records.jsonl");
    let records = Mutex::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&records_path)
            .map_err(io_err(&records_path))?,
    );

    let mut cells = Vec::new();
    let mut current_model: Option<(String, Box<dyn Backend + 'f>)> = None;
    for (model, kind, trial) in cell_plan(config) {
        let path = cell_path(run_dir, &model.model_id, kind, trial);
        if path.exists() {
            match read_cell(&path) {
                Ok(cell) => {
                    cells.push(cell);
                    continue;
                }
                Err(e) => quarantine(run_dir, &path, &e.to_string())?,
            }
        }
        if current_model
            .as_ref()
            .map(|(id, _)| id != &model.model_id)
            .unwrap_or(true)
        {
            current_model = Some((model.model_id.clone(), factory(model)?));
        }
        let backend = &*current_model.as_ref().expect("backend built").1;
        log::info!("running {} / {} / trial {trial}", model.model_id, kind);
        let (cell, cell_records) = run_cell(&shared, &pool, backend, model, kind, trial, &input)?;
        {
            let mut file = records.lock().expect("records lock");
            let mut text = String::new();
            for r in &cell_records {
                text.push_str(&serde_json::to_string(r).expect("record serializes"));
                text.push('\n');
            }
            file.write_all(text.as_bytes()).map_err(io_err(&records_path))?;
            file.flush().map_err(io_err(&records_path))?;
        }
        write_atomic(
            &path,
            serde_json::to_string_pretty(&cell).expect("cell serializes").as_bytes(),
        )?;
        cells.push(cell);
    }
    shared.cache.compact().map_err(io_err(&cache_path))?;
    Ok(RunArtifact {
        run_dir: run_dir.to_path_buf(),
        manifest,
        config: config.clone(),
        input,
        input_bfi,
        cells,
    })
}

fn quarantine(run_dir: &Path, path: &Path, diagnostic: &str) -> Result<(), PipelineError> {
    let dir = run_dir.join("quarantine");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let name = path.file_name().expect("cell file name").to_string_lossy().to_string();
    let target = dir.join(&name);
    log::warn!("quarantining {}: {diagnostic}", path.display());
    fs::rename(path, &target).map_err(io_err(path))?;
    fs::write(dir.join(format!("{name}.error.txt")), diagnostic).map_err(io_err(&dir))?;
    Ok(())
}

struct RespondentOutcome {
    result: Option<RespondentResult>,
    failures: Vec<FailureEntry>,
    records: Vec<GenerationRecord>,
}

fn run_cell(
    shared: &Shared<'_>,
    pool: &rayon::ThreadPool,
    backend: &dyn Backend,
    model: &BackendConfig,
    kind: ConditionKind,
    trial: u32,
    input: &[AnswerSheet],
) -> Result<(CellArtifact, Vec<GenerationRecord>), PipelineError> {
    let config = shared.config;
    let condition = trial_condition(config.seed, kind, trial);
    let sheets = apply_condition(condition, input, &shared.epq)?;
    let sample = trial_seed(config.seed, &model.model_id, kind, trial);
    let administered: Vec<Instrument> = Instrument::ALL
        .into_iter()
        .filter(|&i| config.administers(kind, trial, i))
        .collect();
    let generator = Generator::new(backend, model)
        .with_cache(&shared.cache)
        .with_sample(sample);

    let outcomes: Vec<RespondentOutcome> = pool.install(|| {
        sheets
            .par_iter()
            .map(|sheet| run_respondent(shared, &generator, sheet, &administered))
            .collect()
    });

    let mut respondents = Vec::new();
    let mut failures = Vec::new();
    let mut records = Vec::new();
    for o in outcomes {
        respondents.extend(o.result);
        failures.extend(o.failures);
        records.extend(o.records);
    }
    if !failures.is_empty() {
        log::warn!(
            "{} / {} / trial {trial}: {} failed generations",
            model.model_id,
            kind,
            failures.len()
        );
    }
    Ok((
        CellArtifact {
            format_version: RUN_FORMAT_VERSION,
            model_id: model.model_id.clone(),
            condition,
            trial,
            sample,
            administered,
            respondents,
            failures,
        },
        records,
    ))
}

fn run_respondent(
    shared: &Shared<'_>,
    generator: &Generator<'_>,
    sheet: &AnswerSheet,
    administered: &[Instrument],
) -> RespondentOutcome {
    let mut out = RespondentOutcome {
        result: None,
        failures: Vec::new(),
        records: Vec::new(),
    };
    let fail = |f: &crate::generation::GenerationFailure| FailureEntry {
        respondent_id: f.record.respondent_id.clone(),
        task: f.record.task,
        attempts: f.record.attempts,
        error: f.error.to_string(),
    };
    let persona = match generator.generate_persona(sheet, &shared.epq) {
        Ok((persona, record)) => {
            out.records.push(record);
            persona
        }
        Err(f) => {
            out.failures.push(fail(&f));
            out.records.push(f.record);
            return out;
        }
    };
    let input_scores = score(sheet, &shared.epq).expect("input sheets are validated");
    let mut result = RespondentResult {
        respondent_id: sheet.respondent_id.clone(),
        input: sheet.clone(),
        input_scores,
        attributes: normalize_persona(&persona, &shared.maps),
        persona,
        regenerated: BTreeMap::new(),
        scores: BTreeMap::new(),
    };
    for &instrument in administered {
        let q = match instrument {
            Instrument::Epqra => &shared.epq,
            Instrument::Bfi => &shared.bfi,
        };
        match generator.administer_questionnaire(&sheet.respondent_id, &result.persona, q) {
            Ok((regen, record)) => {
                out.records.push(record);
                let s = score(&regen, q).expect("parsed sheets are complete");
                result.scores.insert(instrument, s);
                result.regenerated.insert(instrument, regen);
            }
            Err(f) => {
                out.failures.push(fail(&f));
                out.records.push(f.record);
            }
        }
    }
    out.result = Some(result);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::mock::CountingBackend;
    use crate::questionnaire::tests::worked_example;

    pub(crate) fn write_input(dir: &Path, n: usize) -> PathBuf {
        let base = worked_example();
        let sheets: Vec<AnswerSheet> = (0..n)
            .map(|i| {
                let mut s = base.clone();
                s.respondent_id = format!("r{i:03}");
                for (k, (_, a)) in s.answers.iter_mut().enumerate() {
                    if (k * 7 + i * 3) % 5 == 0 {
                        *a = crate::questionnaire::Answer::Bool(!a.as_bool().unwrap());
                    }
                }
                s
            })
            .collect();
        let path = dir.join("input.jsonl");
        write_jsonl(&path, &sheets).unwrap();
        path
    }

    fn small_config(dir: &Path, trials: u32) -> ExperimentConfig {
        ExperimentConfig {
            input_path: write_input(dir, 3),
            output_dir: dir.join("run"),
            conditions: vec![ConditionSpec {
                condition: ConditionKind::Base,
                trials,
            }],
            instruments: vec![Instrument::Epqra],
            ..ExperimentConfig::default()
        }
    }

    fn factory<'a>(b: &'a dyn Backend) -> impl Fn(&BackendConfig) -> Result<Box<dyn Backend + 'a>, PipelineError> + 'a {
        move |_| Ok(Box::new(b))
    }

    #[test]
    fn smoke_and_idempotent_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), 1);
        let counting = CountingBackend::new(SimulatedBackend::default());
        let run = run_experiment_with(&cfg, &factory(&counting)).unwrap();
        assert_eq!(run.cells.len(), 1);
        let cell = &run.cells[0];
        assert_eq!(cell.respondents.len(), 3);
        assert_eq!(cell.regenerated(Instrument::Epqra).count(), 3);
        assert_eq!(counting.calls(), 6);
        let ids: Vec<_> = cell.respondents.iter().map(|r| r.respondent_id.as_str()).collect();
        assert_eq!(ids, ["r000", "r001", "r002"]);

        let again = run_experiment_with(&cfg, &factory(&counting)).unwrap();
        assert_eq!(counting.calls(), 6);
        assert_eq!(again.cells, run.cells);
        let loaded = RunArtifact::load(&cfg.output_dir).unwrap();
        assert_eq!(loaded.cells, run.cells);
    }

    #[test]
    fn resume_runs_only_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), 10);
        let first = CountingBackend::new(SimulatedBackend::default());
        run_experiment_with(&cfg, &factory(&first)).unwrap();
        let run_dir = &cfg.output_dir;
        let kept: Vec<Vec<u8>> = (0..3)
            .map(|t| fs::read(cell_path(run_dir, "mock", ConditionKind::Base, t)).unwrap())
            .collect();
        for t in 3..10 {
            fs::remove_file(cell_path(run_dir, "mock", ConditionKind::Base, t)).unwrap();
        }
        fs::remove_file(run_dir.join("cache/responses.jsonl")).unwrap();

        let second = CountingBackend::new(SimulatedBackend::default());
        let run = resume_with(run_dir, &factory(&second)).unwrap();
        assert_eq!(run.cells.len(), 10);
        // Representative trial 0 is kept, so only persona calls remain.
        assert_eq!(second.calls(), 7 * 3);
        for t in 0..3 {
            assert_eq!(
                fs::read(cell_path(run_dir, "mock", ConditionKind::Base, t)).unwrap(),
                kept[t as usize]
            );
        }

        let third = CountingBackend::new(SimulatedBackend::default());
        resume_with(run_dir, &factory(&third)).unwrap();
        assert_eq!(third.calls(), 0);
    }

    #[test]
    fn changed_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), 1);
        let b = SimulatedBackend::default();
        run_experiment_with(&cfg, &factory(&b)).unwrap();
        let changed = ExperimentConfig {
            seed: 99,
            ..cfg.clone()
        };
        assert!(matches!(
            run_experiment_with(&changed, &factory(&b)),
            Err(PipelineError::ConfigMismatch { .. })
        ));
        let more_threads = ExperimentConfig { concurrency: 9, ..cfg };
        assert!(run_experiment_with(&more_threads, &factory(&b)).is_ok());
    }

    #[test]
    fn corrupt_cell_is_quarantined_and_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), 1);
        let b = SimulatedBackend::default();
        let run = run_experiment_with(&cfg, &factory(&b)).unwrap();
        let path = cell_path(&cfg.output_dir, "mock", ConditionKind::Base, 0);
        fs::write(&path, "{ not json").unwrap();
        let rerun = resume_with(&cfg.output_dir, &factory(&b)).unwrap();
        assert_eq!(rerun.cells, run.cells);
        assert!(cfg.output_dir.join("quarantine/mock__base__000.json").exists());
        assert!(cfg
            .output_dir
            .join("quarantine/mock__base__000.json.error.txt")
            .exists());
    }

    #[test]
    fn failures_are_ledgered_not_imputed() {
        use crate::generation::mock::FnBackend;
        use crate::generation::BackendError;
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path(), 1);
        cfg.models = vec![BackendConfig {
            max_retries: 1,
            ..BackendConfig::mock("down")
        }];
        let down = FnBackend::new(|_: &str, _: &crate::generation::CompletionParams<'_>| {
            Err(BackendError::Transport("connection refused".into()))
        });
        let run = run_experiment_with(&cfg, &factory(&down)).unwrap();
        let cell = &run.cells[0];
        assert!(cell.respondents.is_empty());
        assert_eq!(cell.failures.len(), 3);
        assert_eq!(cell.accounted(), 3);
        assert_eq!(run.failure_count(), 3);
        let records = fs::read_to_string(cfg.output_dir.join("records.jsonl")).unwrap();
        assert_eq!(records.lines().count(), 3);
        assert!(records.contains("\"status\":\"failure\""));
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path(), 1);
        cfg.instruments = vec![Instrument::Epqra, Instrument::Bfi];
        let b = SimulatedBackend::default();
        let run = run_experiment_with(&cfg, &factory(&b)).unwrap();
        assert_eq!(run.cells[0].administered, vec![Instrument::Epqra, Instrument::Bfi]);
        let text = fs::read_to_string(cfg.output_dir.join("records.jsonl")).unwrap();
        let records: Vec<GenerationRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 9);
        assert_eq!(records[0].task, Task::Persona);
        assert_eq!(records[2].task, Task::Questionnaire(Instrument::Bfi));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.conditions[0].trials = 0;
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            models: vec![BackendConfig::mock("a"), BackendConfig::mock("a")],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let parsed = ExperimentConfig::from_json(&ExperimentConfig::default().to_json()).unwrap();
        assert_eq!(parsed, ExperimentConfig::default());
    }
}
