use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use persona_audit::generation::{parse_persona, BackendConfig, BackendKind};
use persona_audit::manipulation::{apply_condition, Condition, ConditionKind};
use persona_audit::normalization::{normalize_persona, CategoryMaps};
use persona_audit::pipeline::{
    analyze, read_sheets, run_experiment, AnalysisBundle, AnalyzeOptions, ConditionSpec, ExperimentConfig, RunArtifact,
};
use persona_audit::questionnaire::{score, Instrument, Questionnaire};
use persona_audit::report::{build_report, write_report, Format, Stopwords};

/// Persona generation from personality questionnaires, with demographic
/// bias and trait fidelity auditing.
#[derive(Parser)]
#[command(name = "persona-audit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or continue) a full experiment.
    Run(RunArgs),
    /// Score answer sheets (JSONL) and print one score line per sheet.
    Score(IoArgs),
    /// Apply a condition (maxn, maxp, random) to EPQR-A sheets.
    Manipulate(ManipulateArgs),
    /// Map persona attributes (JSONL personas or a run directory) to categories.
    Normalize(NormalizeArgs),
    /// Compute every analysis table for a run directory.
    Analyze(AnalyzeArgs),
    /// Render tables and word-frequency differences for a run directory.
    Report(ReportArgs),
    /// Run an experiment against recorded responses instead of a live model.
    Replay(RunArgs),
}

#[derive(Args)]
struct IoArgs {
    /// Input JSONL file.
    #[arg(long)]
    input: PathBuf,
    /// Write results here instead of stdout.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ManipulateArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long)]
    condition: ConditionKind,
    /// Seed for the random condition.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct NormalizeArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Category map overrides (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directory.
    #[arg(long)]
    input: PathBuf,
    /// Category map overrides (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to <run>/analysis.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Skip significance marks (allows runs without Base).
    #[arg(long)]
    no_marks: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    analyze: AnalyzeArgs,
    /// csv, markdown or structured.
    #[arg(long, default_value = "markdown")]
    format: String,
    /// Stopword list replacing the built-in English list.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Tokens kept per word-difference list.
    #[arg(long, default_value_t = 50)]
    top: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON). Flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated conditions, e.g. base,maxn,maxp.
    #[arg(long, value_delimiter = ',')]
    condition: Vec<ConditionKind>,
    /// Trials for every selected condition, or per condition as base=10,maxn=5.
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// mock or http.
    #[arg(long)]
    backend: Option<String>,
    /// Comma-separated model ids.
    #[arg(long, value_delimiter = ',')]
    model: Vec<String>,
    /// Recorded responses (JSONL of prompt_hash, response_text).
    #[arg(long)]
    fixtures: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run(args) => run(args, false),
        Command::Replay(args) => run(args, true),
        Command::Score(args) => score_cmd(args),
        Command::Manipulate(args) => manipulate_cmd(args),
        Command::Normalize(args) => normalize_cmd(args),
        Command::Analyze(args) => {
            let (run, bundle) = analyze_run(&args)?;
            let dir = args.output_dir.unwrap_or_else(|| run.run_dir.join("analysis"));
            let path = write_analysis(&dir, &bundle)?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report(args) => report_cmd(args),
    }
}

fn emit(lines: Vec<String>, output_dir: Option<&Path>, file_name: &str) -> Result<()> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    match output_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(file_name);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("{}", path.display());
        }
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn parse_trials(spec: &str, kinds: &[ConditionKind]) -> Result<Vec<ConditionSpec>> {
    if let Ok(n) = spec.trim().parse::<u32>() {
        return Ok(kinds
            .iter()
            .map(|&condition| ConditionSpec { condition, trials: n })
            .collect());
    }
    let mut out = Vec::new();
    for part in spec.split(',') {
        let (k, n) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("bad --trials entry `{part}` (expected N or condition=N)"))?;
        let condition: ConditionKind = k.parse().map_err(|e: String| anyhow!(e))?;
        let trials = n
            .trim()
            .parse()
            .with_context(|| format!("bad trial count in `{part}`"))?;
        out.push(ConditionSpec { condition, trials });
    }
    if !kinds.is_empty() {
        out.retain(|s| kinds.contains(&s.condition));
    }
    Ok(out)
}

fn build_config(args: &RunArgs, replay: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &args.input {
        cfg.input_path = p.clone();
    }
    if let Some(p) = &args.output_dir {
        cfg.output_dir = p.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if !args.condition.is_empty() {
        let existing = cfg.conditions.clone();
        cfg.conditions = args
            .condition
            .iter()
            .map(|&condition| ConditionSpec {
                condition,
                trials: existing
                    .iter()
                    .find(|s| s.condition == condition)
                    .map_or(1, |s| s.trials),
            })
            .collect();
    }
    if let Some(t) = &args.trials {
        let kinds: Vec<ConditionKind> = cfg.conditions.iter().map(|c| c.condition).collect();
        cfg.conditions = parse_trials(t, &kinds)?;
    }
    let kind = match args.backend.as_deref() {
        None => None,
        Some("mock") => Some(BackendKind::Mock),
        Some("http") | Some("http_chat") => Some(BackendKind::HttpChat),
        Some(other) => bail!("unknown backend `{other}` (expected mock or http)"),
    };
    if !args.model.is_empty() {
        let template = cfg.models.first().cloned().unwrap_or_default();
        cfg.models = args
            .model
            .iter()
            .map(|m| BackendConfig {
                model_id: m.clone(),
                ..template.clone()
            })
            .collect();
    }
    if let Some(kind) = kind {
        for m in &mut cfg.models {
            m.kind = kind;
        }
    }
    if let Some(f) = &args.fixtures {
        cfg.fixtures = Some(f.clone());
    }
    if replay {
        if cfg.fixtures.is_none() {
            bail!("replay needs --fixtures or a config with `fixtures`");
        }
        for m in &mut cfg.models {
            m.kind = BackendKind::Mock;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs, replay: bool) -> Result<ExitCode> {
    let cfg = build_config(&args, replay)?;
    let run = run_experiment(&cfg)?;
    let failures = run.failure_count();
    println!(
        "run {} in {}: {} cells, {} failed generations",
        run.run_id(),
        run.run_dir.display(),
        run.cells.len(),
        failures
    );
    Ok(if failures > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn score_cmd(args: IoArgs) -> Result<ExitCode> {
    let sheets = read_sheets(&args.input)?;
    let mut lines = Vec::with_capacity(sheets.len());
    for sheet in &sheets {
        let q = Questionnaire::builtin(sheet.instrument);
        let s = score(sheet, &q)?;
        lines.push(
            json!({"respondent_id": sheet.respondent_id, "instrument": s.instrument, "scores": s.scores}).to_string(),
        );
    }
    emit(lines, args.output_dir.as_deref(), "scores.jsonl")?;
    Ok(ExitCode::SUCCESS)
}

fn manipulate_cmd(args: ManipulateArgs) -> Result<ExitCode> {
    let sheets: Vec<_> = read_sheets(&args.io.input)?
        .into_iter()
        .filter(|s| s.instrument == Instrument::Epqra)
        .collect();
    let condition = Condition::new(args.condition, args.seed);
    let out = apply_condition(condition, &sheets, &Questionnaire::epqra())?;
    let lines = out
        .iter()
        .map(|s| serde_json::to_string(s).expect("sheet serializes"))
        .collect();
    emit(
        lines,
        args.io.output_dir.as_deref(),
        &format!("{}.jsonl", args.condition.as_str()),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn category_maps(path: Option<&Path>) -> Result<CategoryMaps> {
    let maps = CategoryMaps::builtin();
    Ok(match path {
        Some(p) => maps.load_overrides(p)?,
        None => maps,
    })
}

fn normalize_cmd(args: NormalizeArgs) -> Result<ExitCode> {
    let maps = category_maps(args.config.as_deref())?;
    let mut lines = Vec::new();
    if args.io.input.is_dir() {
        let run = RunArtifact::load(&args.io.input)?;
        for cell in &run.cells {
            for r in &cell.respondents {
                lines.push(
                    json!({
                        "model_id": cell.model_id,
                        "condition": cell.kind(),
                        "trial": cell.trial,
                        "respondent_id": r.respondent_id,
                        "attributes": normalize_persona(&r.persona, &maps),
                    })
                    .to_string(),
                );
            }
        }
    } else {
        let file = fs::File::open(&args.io.input).with_context(|| format!("opening {}", args.io.input.display()))?;
        for (i, line) in io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let persona = parse_persona(&line).with_context(|| format!("line {}", i + 1))?;
            let id = serde_json::from_str::<Value>(&line)
                .ok()
                .and_then(|v| v.get("respondent_id").cloned())
                .unwrap_or(Value::Null);
            lines.push(json!({"respondent_id": id, "attributes": normalize_persona(&persona, &maps)}).to_string());
        }
    }
    emit(lines, args.io.output_dir.as_deref(), "normalized.jsonl")?;
    Ok(ExitCode::SUCCESS)
}

fn analyze_run(args: &AnalyzeArgs) -> Result<(RunArtifact, AnalysisBundle)> {
    let run = RunArtifact::load(&args.input)?;
    let maps = match &args.config {
        Some(p) => category_maps(Some(p))?,
        None => run.config.category_maps()?,
    };
    let options = AnalyzeOptions {
        maps,
        significance: !args.no_marks,
    };
    let bundle = analyze(&run, &options)?;
    Ok((run, bundle))
}

fn write_analysis(dir: &Path, bundle: &AnalysisBundle) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("analysis.json");
    fs::write(&path, serde_json::to_string_pretty(bundle)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn report_cmd(args: ReportArgs) -> Result<ExitCode> {
    let format: Format = args.format.parse()?;
    let stop = match &args.stopwords {
        Some(p) => Stopwords::load(p)?,
        None => Stopwords::builtin(),
    };
    let (run, bundle) = analyze_run(&args.analyze)?;
    let dir = args
        .analyze
        .output_dir
        .clone()
        .unwrap_or_else(|| run.run_dir.join("analysis"));
    write_analysis(&dir, &bundle)?;
    let report = build_report(&run, &bundle, &stop, args.top)?;
    for path in write_report(&report, &dir, format)? {
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
