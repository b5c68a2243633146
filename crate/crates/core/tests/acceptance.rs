//! Acceptance criteria 1-10. Runs without the libtest harness so every
//! criterion prints a single PASS/FAIL line regardless of capture settings.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use persona_audit::generation::mock::{FixtureBackend, FixtureLine};
use persona_audit::generation::prompt::{build_persona_prompt, build_questionnaire_prompt, json_object};
use persona_audit::generation::{Backend, BackendConfig, PersonaRecord};
use persona_audit::manipulation::{apply_condition, compute_marginals, Condition, ConditionKind};
use persona_audit::normalization::{Attribute, CategoryMaps};
use persona_audit::pipeline::{
    analyze, run_experiment, run_experiment_with, write_jsonl, AnalyzeOptions, ConditionSpec, ExperimentConfig,
    PipelineError,
};
use persona_audit::questionnaire::{score, Answer, AnswerSheet, Instrument, Keying, Questionnaire};
use persona_audit::report::{distribution_mark, tables};
use persona_audit::statistics::{
    compare_samples, cronbach_alpha, error_metrics, mean, pearson, std_dev, student_t_cdf, t_test, ScoreMatrix,
    Significance,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

fn epqra_scores(sheet: &AnswerSheet) -> [f64; 4] {
    let s = score(sheet, &Questionnaire::epqra()).expect("valid sheet");
    ["E", "N", "P", "L"].map(|l| s.get(l).unwrap())
}

/// The worked example sheet: items 3, 8, 14, 15, 16, 20 and 24 answered TRUE.
fn worked_example() -> AnswerSheet {
    let trues = [3, 8, 14, 15, 16, 20, 24];
    let answers: Vec<bool> = (1..=24).map(|i| trues.contains(&i)).collect();
    AnswerSheet::from_bools("example", Instrument::Epqra, &answers)
}

// 1 -------------------------------------------------------------------------

fn scoring_vector() -> Outcome {
    let q = Questionnaire::epqra();
    let sheet = worked_example();
    let got = epqra_scores(&sheet);
    ensure!(got == [0.0, 1.0, 2.0, 6.0], "scores {got:?}, want E=0 N=1 P=2 L=6");
    let mut fastest = Duration::MAX;
    for _ in 0..200 {
        let t = Instant::now();
        let s = score(&sheet, &q).unwrap();
        fastest = fastest.min(t.elapsed());
        std::hint::black_box(s);
    }
    ensure!(fastest < Duration::from_millis(1), "scoring took {fastest:?}");
    Ok(format!("E=0 N=1 P=2 L=6 in {fastest:?}"))
}

// 2 -------------------------------------------------------------------------

fn manipulation() -> Outcome {
    let q = Questionnaire::epqra();
    let input = vec![worked_example()];
    for (kind, want) in [
        (ConditionKind::MaxN, [0.0, 6.0, 2.0, 6.0]),
        (ConditionKind::MaxP, [0.0, 1.0, 6.0, 6.0]),
    ] {
        let once = apply_condition(Condition::new(kind, 0), &input, &q).map_err(|e| e.to_string())?;
        let got = epqra_scores(&once[0]);
        ensure!(got == want, "{kind:?} scores {got:?}, want {want:?}");
        let twice = apply_condition(Condition::new(kind, 0), &once, &q).map_err(|e| e.to_string())?;
        ensure!(twice == once, "{kind:?} is not idempotent");
    }
    Ok("MaxN E=0 N=6 P=2 L=6, MaxP P=6, both idempotent".into())
}

// 3 -------------------------------------------------------------------------

/// 826 sheets with a per-respondent latent level on each scale, so items
/// within a scale are correlated.
fn structured_population(n: usize, seed: u64) -> Vec<AnswerSheet> {
    let q = Questionnaire::epqra();
    // Typical keyed rates per scale, roughly those of an adult sample.
    let centre = [("E", 0.38), ("N", 0.51), ("P", 0.14), ("L", 0.9)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|r| {
            let levels: BTreeMap<&str, f64> = centre
                .iter()
                .map(|&(s, c)| (s, (c + rng.gen_range(-0.35..0.35_f64)).clamp(0.02, 0.98)))
                .collect();
            let answers: Vec<bool> = q
                .items()
                .iter()
                .map(|item| {
                    let hit = rng.gen_bool(levels[item.scale.as_str()]);
                    match item.keyed {
                        Keying::Dichotomous(k) => {
                            if hit {
                                k
                            } else {
                                !k
                            }
                        }
                        Keying::Likert { .. } => unreachable!(),
                    }
                })
                .collect();
            AnswerSheet::from_bools(format!("p{r:04}"), Instrument::Epqra, &answers)
        })
        .collect()
}

fn random_baseline() -> Outcome {
    let q = Questionnaire::epqra();
    let input = structured_population(826, 7);
    let start = Instant::now();
    let random = apply_condition(Condition::random(42), &input, &q).map_err(|e| e.to_string())?;
    let mut report = Vec::new();
    ensure!(random.len() == 826, "{} sheets generated", random.len());
    compute_marginals(&random).map_err(|e| e.to_string())?;
    for (j, label) in ["E", "N", "P", "L"].iter().enumerate() {
        let input_scores: Vec<f64> = input.iter().map(|s| epqra_scores(s)[j]).collect();
        let random_scores: Vec<f64> = random.iter().map(|s| epqra_scores(s)[j]).collect();
        let se = std_dev(&random_scores) / (random_scores.len() as f64).sqrt();
        let gap = (mean(&random_scores) - mean(&input_scores)).abs();
        ensure!(
            gap <= 3.0 * se,
            "{label}: mean gap {gap:.4} exceeds 3 SE ({:.4})",
            3.0 * se
        );
        let alpha = cronbach_alpha(&ScoreMatrix::from_sheets(&random, &q, label).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure!(alpha.abs() <= 0.2, "{label}: alpha {alpha:.3}");
        let input_alpha = cronbach_alpha(&ScoreMatrix::from_sheets(&input, &q, label).unwrap()).unwrap();
        report.push(format!("{label} alpha {alpha:+.3} (input {input_alpha:.2})"));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("{} in {elapsed:.2?}", report.join(", ")))
}

// 4 -------------------------------------------------------------------------

fn naive_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let s: f64 = xs.iter().sum();
    let ss: f64 = xs.iter().map(|x| x * x).sum();
    (ss - s * s / n) / (n - 1.0)
}

fn naive_alpha(rows: &[Vec<f64>]) -> f64 {
    let k = rows[0].len();
    let item_var: f64 = (0..k)
        .map(|j| naive_var(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .sum();
    let totals: Vec<f64> = rows.iter().map(|r| r.iter().sum()).collect();
    let k = k as f64;
    k / (k - 1.0) * (1.0 - item_var / naive_var(&totals))
}

fn t_ref_p(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).unwrap();
    2.0 * dist.cdf(-t.abs())
}

fn naive_pearson(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let r = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
    let t = r * ((n - 2.0) / (1.0 - r * r)).sqrt();
    (r, t_ref_p(t, n - 2.0))
}

fn naive_welch(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (vx, vy) = (naive_var(x) / nx, naive_var(y) / ny);
    let mx = x.iter().sum::<f64>() / nx;
    let my = y.iter().sum::<f64>() / ny;
    let t = (mx - my) / (vx + vy).sqrt();
    let df = (vx + vy).powi(2) / (vx * vx / (nx - 1.0) + vy * vy / (ny - 1.0));
    (t, t_ref_p(t, df))
}

fn naive_paired(x: &[f64], y: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let t = d.iter().sum::<f64>() / n / (naive_var(&d) / n).sqrt();
    (t, t_ref_p(t, n - 1.0))
}

fn statistics_oracle() -> Outcome {
    // Exact closed forms: df=1 is Cauchy, df=2 has an algebraic CDF.
    let cauchy = |t: f64| 0.5 + t.atan() / std::f64::consts::PI;
    let df2 = |t: f64| 0.5 + t / (2.0 * (2.0 + t * t).sqrt());
    for t in [-4.0, -1.5, -0.3, 0.0, 0.7, 1.0, 3f64.sqrt(), 2.5, 12.706] {
        ensure!((student_t_cdf(t, 1.0) - cauchy(t)).abs() < 1e-6, "t cdf df=1 at {t}");
        ensure!((student_t_cdf(t, 2.0) - df2(t)).abs() < 1e-6, "t cdf df=2 at {t}");
    }
    // Critical values from the usual t table, to the table's 3 decimals.
    for (t, df, p) in [
        (2.571, 5.0, 0.975),
        (2.042, 30.0, 0.975),
        (2.626, 100.0, 0.995),
        (3.385, 30.0, 0.999),
    ] {
        ensure!((student_t_cdf(t, df) - p).abs() < 2e-4, "table point t={t} df={df}");
        let reference = StudentsT::new(0.0, 1.0, df).unwrap().cdf(t);
        ensure!(
            (student_t_cdf(t, df) - reference).abs() < 1e-6,
            "t cdf at t={t} df={df}"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_stat = 0f64;
    let mut worst_p = 0f64;
    for case in 0..100 {
        let n = rng.gen_range(4..=50);
        let k = rng.gen_range(2..=10);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let base: f64 = rng.gen_range(0.0..2.0);
                (0..k).map(|_| (base + rng.gen_range(0.0..3.0_f64)).round()).collect()
            })
            .collect();
        let matrix = ScoreMatrix::new(rows.clone()).map_err(|e| e.to_string())?;
        if let Ok(a) = cronbach_alpha(&matrix) {
            let want = naive_alpha(&rows);
            worst_stat = worst_stat.max((a - want).abs());
            ensure!(close(a, want, 1e-9), "case {case}: alpha {a} vs {want}");
        }

        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.4 * v + rng.gen_range(-4.0..4.0)).collect();
        let m = rng.gen_range(3..=50);
        let z: Vec<f64> = (0..m).map(|_| rng.gen_range(-4.0..6.0)).collect();

        let checks = [
            ("pearson", pearson(&x, &y), naive_pearson(&x, &y)),
            ("welch", t_test(&x, &z, false), naive_welch(&x, &z)),
            ("paired", t_test(&x, &y, true), naive_paired(&x, &y)),
        ];
        for (name, got, (stat_ref, p_ref)) in checks {
            let got = got.map_err(|e| format!("case {case} {name}: {e}"))?;
            ensure!(
                close(got.statistic, stat_ref, 1e-9),
                "case {case} {name}: statistic {} vs {stat_ref}",
                got.statistic
            );
            ensure!(
                (got.p_value - p_ref).abs() < 1e-6,
                "case {case} {name}: p {} vs {p_ref}",
                got.p_value
            );
            worst_stat = worst_stat.max((got.statistic - stat_ref).abs());
            worst_p = worst_p.max((got.p_value - p_ref).abs());
        }
    }
    Ok(format!(
        "100 instances, max |Δstat| {worst_stat:.1e}, max |Δp| {worst_p:.1e}"
    ))
}

// 5 -------------------------------------------------------------------------

fn error_metric_checks() -> Outcome {
    let q = Questionnaire::epqra();
    let input = structured_population(40, 3);
    let same = error_metrics(&input, &input, &q).map_err(|e| e.to_string())?;
    for s in &same.scales {
        ensure!(s.mae == 0.0 && s.rmse == 0.0 && s.acc == Some(100.0), "identity: {s:?}");
    }

    // Respondent a matches exactly; b misses two E points.
    let a = AnswerSheet::from_bools("a", Instrument::Epqra, &[false; 24]);
    let b = AnswerSheet::from_bools("b", Instrument::Epqra, &[false; 24]);
    let mut b_regen = b.clone();
    for item in [2, 4] {
        b_regen.answers.insert(item, Answer::Bool(true));
    }
    let m = error_metrics(&[a.clone(), b], &[a, b_regen], &q).map_err(|e| e.to_string())?;
    let e = m.scale("E").unwrap();
    ensure!(e.mae == 1.0, "MAE {}", e.mae);
    ensure!((e.rmse - 2f64.sqrt()).abs() < 1e-12, "RMSE {}", e.rmse);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=12);
        let truth: Vec<AnswerSheet> = (0..n)
            .map(|i| {
                let answers: Vec<bool> = (0..24).map(|_| rng.gen_bool(0.5)).collect();
                AnswerSheet::from_bools(format!("r{i}"), Instrument::Epqra, &answers)
            })
            .collect();
        let flip = rng.gen_range(0.0..0.6);
        let regen: Vec<AnswerSheet> = truth
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for a in s.answers.values_mut() {
                    if rng.gen_bool(flip) {
                        *a = Answer::Bool(!a.as_bool().unwrap());
                    }
                }
                s
            })
            .collect();
        let m = error_metrics(&truth, &regen, &q).map_err(|e| e.to_string())?;
        for s in &m.scales {
            ensure!(
                s.rmse + 1e-12 >= s.mae,
                "population {trial} {}: RMSE {} < MAE {}",
                s.scale,
                s.rmse,
                s.mae
            );
        }
    }
    Ok("identity 0/0/100, MAE=1 RMSE=√2, RMSE ≥ MAE on 1000 populations".into())
}

// 6 -------------------------------------------------------------------------

/// The aggregation lists, transcribed independently of the shipped map file.
const SYNONYMS: &[(Attribute, &str, &[&str])] = &[
    (Attribute::Gender, "Female", &["female"]),
    (Attribute::Gender, "Male", &["male", "man"]),
    (
        Attribute::Gender,
        "Non-binary",
        &[
            "genderfluid",
            "gender-fluid",
            "nonbinary",
            "non-binary",
            "gender non-binary",
            "non-conforming",
        ],
    ),
    (
        Attribute::Gender,
        "Other",
        &["gender-neutral", "neutral", "genderqueer"],
    ),
    (
        Attribute::PoliticalOrientation,
        "Centre",
        &["center", "centre", "centrist", "independent", "moderate"],
    ),
    (Attribute::PoliticalOrientation, "Conservative", &["conservative"]),
    (
        Attribute::PoliticalOrientation,
        "Progressive",
        &["liberal", "left-leaning", "moderate-progressive"],
    ),
    (Attribute::Race, "Asian", &["asian", "asian-american"]),
    (
        Attribute::Race,
        "Black",
        &["black", "african american", "black/african descent"],
    ),
    (
        Attribute::Race,
        "Latin",
        &["hispanic", "latino", "latina", "latinx", "latine", "hispanic or latino"],
    ),
    (Attribute::Race, "White", &["white", "caucasian", "white/caucasian"]),
    (Attribute::ReligiousBelief, "Christian", &["christian", "catholicism"]),
    (Attribute::ReligiousBelief, "Agnostic", &["agnostic"]),
    (Attribute::ReligiousBelief, "Atheist", &["atheist"]),
    (Attribute::ReligiousBelief, "Other", &["islam", "buddhist", "hinduist"]),
    (
        Attribute::SexualOrientation,
        "Heterosexual",
        &["heterosexual", "straight"],
    ),
    (
        Attribute::SexualOrientation,
        "LGBTQ+",
        &[
            "gay",
            "lesbian",
            "bisexual",
            "pansexual",
            "queer",
            "lgbtq+",
            "asexual",
            "demisexual",
        ],
    ),
    (
        Attribute::SexualOrientation,
        "Unspecified",
        &["unknown", "unspecified", "undisclosed", "empty"],
    ),
];

fn normalization() -> Outcome {
    let maps = CategoryMaps::builtin();
    let mut checked = 0;
    for &(attr, canonical, synonyms) in SYNONYMS {
        let map = maps.get(attr);
        for raw in synonyms {
            // Case and surrounding whitespace must not matter.
            for variant in [raw.to_string(), raw.to_uppercase(), format!("  {raw} ")] {
                let got = map.normalize(&variant);
                ensure!(got == canonical, "{attr:?} `{variant}` -> `{got}`, want `{canonical}`");
                checked += 1;
            }
        }
    }
    for raw in ["two-spirit", "agender-ish", "xyz", ""] {
        let got = maps.get(Attribute::Gender).normalize(raw);
        ensure!(got == "Other", "unmapped gender `{raw}` -> `{got}`");
    }
    for &attr in Attribute::ALL.iter() {
        let map = maps.get(attr);
        for c in map.categories() {
            ensure!(map.normalize(c) == c, "{attr:?} canonical `{c}` is not a fixed point");
        }
    }
    Ok(format!(
        "{checked} synonym spellings, unmapped gender -> Other, canonicals fixed"
    ))
}

// 7 -------------------------------------------------------------------------

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn sample_persona() -> PersonaRecord {
    PersonaRecord {
        name: "Maya Ortiz".into(),
        age: 34,
        gender: "Female".into(),
        sexual_orientation: "Heterosexual".into(),
        race: "Hispanic".into(),
        ethnicity: "Mexican-American".into(),
        religious_belief: "Catholic".into(),
        occupation: "Freelance writer".into(),
        political_orientation: "Liberal".into(),
        location: "Austin, Texas".into(),
        description: "Maya is quiet and even-tempered.\n\nShe keeps a tidy schedule.".into(),
    }
}

/// Compares with a golden file; `BLESS=1` rewrites it instead.
fn golden(name: &str, actual: &str) -> Result<(), String> {
    let path = fixtures_dir().join("golden").join(name);
    if std::env::var_os("BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, actual).unwrap();
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    ensure!(expected == actual, "{name} differs from its golden file");
    Ok(())
}

fn prompt_fidelity() -> Outcome {
    let persona_prompt = build_persona_prompt(&worked_example(), &Questionnaire::epqra());
    let epqra_prompt = build_questionnaire_prompt(&sample_persona(), &Questionnaire::epqra());
    let bfi_prompt = build_questionnaire_prompt(&sample_persona(), &Questionnaire::bfi());
    ensure!(
        persona_prompt.contains("Output only JSON."),
        "persona prompt lacks the JSON-only line"
    );
    ensure!(
        epqra_prompt.contains(r#"answer only with "True" or "False""#),
        "EPQR-A prompt lacks the True/False line"
    );
    ensure!(
        bfi_prompt.contains("1 = Disagree strongly"),
        "BFI prompt lacks the scale anchor"
    );
    golden("persona_prompt.txt", &persona_prompt)?;
    golden("epqra_prompt.txt", &epqra_prompt)?;
    golden("bfi_prompt.txt", &bfi_prompt)?;
    Ok("instruction lines present, 3 prompts match golden files".into())
}

// 8 -------------------------------------------------------------------------

fn write_input(dir: &Path, sheets: &[AnswerSheet]) -> PathBuf {
    let path = dir.join("input.jsonl");
    write_jsonl(&path, sheets).unwrap();
    path
}

fn full_config(input: PathBuf, output: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        input_path: input,
        output_dir: output,
        models: vec![BackendConfig::mock("sim")],
        conditions: vec![
            ConditionSpec {
                condition: ConditionKind::Base,
                trials: 2,
            },
            ConditionSpec {
                condition: ConditionKind::MaxN,
                trials: 1,
            },
            ConditionSpec {
                condition: ConditionKind::MaxP,
                trials: 1,
            },
            ConditionSpec {
                condition: ConditionKind::Random,
                trials: 1,
            },
        ],
        seed: 11,
        ..ExperimentConfig::default()
    }
}

/// File contents with timestamps and the run directory itself blanked.
fn normalized_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let text = fs::read_to_string(&path)
                .unwrap()
                .replace(root.to_str().unwrap(), "<run>");
            let text = blank_timestamps(&text);
            out.insert(path.strip_prefix(root).unwrap().display().to_string(), text);
        }
    }
    out
}

fn blank_timestamps(text: &str) -> String {
    let key = "\"timestamp_ms\":";
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find(key) {
        out.push_str(&rest[..i + key.len()]);
        rest = rest[i + key.len()..].trim_start_matches(|c: char| c.is_ascii_digit() || c == ' ');
        out.push('0');
    }
    out.push_str(rest);
    out
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let input = write_input(dir.path(), &structured_population(10, 8));
    let start = Instant::now();
    let run = run_experiment(&full_config(input.clone(), dir.path().join("a"))).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "run took {elapsed:?}");
    ensure!(run.cells.len() == 5, "{} cells", run.cells.len());
    ensure!(run.failure_count() == 0, "{} failures", run.failure_count());

    run_experiment(&full_config(input, dir.path().join("b"))).map_err(|e| e.to_string())?;
    let (a, b) = (
        normalized_tree(&dir.path().join("a")),
        normalized_tree(&dir.path().join("b")),
    );
    ensure!(a.keys().eq(b.keys()), "file sets differ");
    for (name, text) in &a {
        ensure!(&b[name] == text, "{name} differs between identical runs");
    }

    let bundle = analyze(&run, &AnalyzeOptions::default()).map_err(|e| e.to_string())?;
    let ids: Vec<String> = tables(&bundle).into_iter().map(|t| t.id).collect();
    for want in [
        "distribution_sim",
        "scores_epqra",
        "scores_bfi",
        "correlation",
        "alpha_epqra",
        "alpha_bfi",
        "errors",
        "failures",
    ] {
        ensure!(ids.iter().any(|id| id == want), "table {want} missing from {ids:?}");
    }
    for table in &bundle.distributions {
        for attr in Attribute::ALL.iter() {
            for t in 0..table.trials {
                let total: f64 = table
                    .rows
                    .iter()
                    .filter(|r| r.attribute == *attr)
                    .map(|r| r.per_trial[t])
                    .sum();
                ensure!(
                    (total - 100.0).abs() <= 0.01,
                    "{:?} {attr:?} trial {t} sums to {total}",
                    table.condition
                );
            }
        }
    }
    Ok(format!(
        "5 cells in {elapsed:.2?}, rerun identical over {} files, {} tables",
        a.len(),
        ids.len()
    ))
}

// 9 -------------------------------------------------------------------------

/// `n` values with exactly the given mean and sample standard deviation.
fn with_moments(n: usize, m: f64, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64).collect();
    let (rm, rs) = (mean(&raw), std_dev(&raw));
    raw.iter().map(|x| m + (x - rm) / rs * s).collect()
}

fn significance_marking() -> Outcome {
    let base = with_moments(10, 25.71, 1.36);
    let maxp = with_moments(5, 4.67, 0.79);
    let cmp = compare_samples(&base, &maxp).map_err(|e| e.to_string())?;
    ensure!(cmp.mark == Significance::P001, "mark {:?}", cmp.mark);
    let symbol = distribution_mark(Some(cmp.mark));
    ensure!(symbol == "‡", "rendered `{symbol}`");
    Ok(format!("p = {:.2e} -> {symbol}", cmp.test.unwrap().p_value))
}

// 10 ------------------------------------------------------------------------

fn likert(v: i64) -> Answer {
    Answer::Likert(v.clamp(1, 5) as u8)
}

/// Fixture responses for one respondent: a persona whose extraversion level
/// `e` (0..=6) carries through to both questionnaires.
fn fixture_lines(sheet: &AnswerSheet, e: usize, idx: usize) -> Vec<FixtureLine> {
    let epqra = Questionnaire::epqra();
    let bfi = Questionnaire::bfi();
    let persona = PersonaRecord {
        name: format!("Person {idx}"),
        description: format!("Person {idx} is outgoing at level {e} of 6."),
        ..sample_persona()
    };
    let persona_json = serde_json::to_string(&persona).unwrap();

    let e_items = &epqra.scale("E").unwrap().items;
    let epqra_answers: Vec<(String, String)> = epqra
        .items()
        .iter()
        .map(|item| {
            let mut a = sheet.answer(item.id).unwrap();
            if let Some(pos) = e_items.iter().position(|&i| i == item.id) {
                let Keying::Dichotomous(k) = item.keyed else {
                    unreachable!()
                };
                a = Answer::Bool(if pos < e { k } else { !k });
            }
            (item.id.to_string(), a.document_value())
        })
        .collect();

    let level = 1 + (4 * e as i64 + 3) / 6;
    let bfi_answers: Vec<(String, String)> = bfi
        .items()
        .iter()
        .map(|item| {
            let v = if item.scale == "E" {
                let jitter = [0, 1, 0, -1][(item.id as usize + idx) % 4];
                let v = likert(level + jitter);
                match item.keyed {
                    Keying::Likert { reversed: true } => likert(6 - v.document_value().parse::<i64>().unwrap()),
                    _ => v,
                }
            } else {
                likert(3 + (item.id as i64 + idx as i64) % 2)
            };
            (item.id.to_string(), v.document_value())
        })
        .collect();

    vec![
        FixtureLine::for_prompt(&build_persona_prompt(sheet, &epqra), persona_json),
        FixtureLine::for_prompt(
            &build_questionnaire_prompt(&persona, &epqra),
            json_object(&epqra_answers),
        ),
        FixtureLine::for_prompt(&build_questionnaire_prompt(&persona, &bfi), json_object(&bfi_answers)),
    ]
}

fn cross_instrument() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let epqra = Questionnaire::epqra();
    let base = structured_population(28, 10);
    let mut lines = Vec::new();
    let mut sheets = Vec::new();
    for (idx, sheet) in base.into_iter().enumerate() {
        let e = idx % 7;
        let mut sheet = sheet;
        let e_items = epqra.scale("E").unwrap().items.clone();
        for (pos, id) in e_items.iter().enumerate() {
            let Keying::Dichotomous(k) = epqra.item(*id).unwrap().keyed else {
                unreachable!()
            };
            sheet.answers.insert(*id, Answer::Bool(if pos < e { k } else { !k }));
        }
        lines.extend(fixture_lines(&sheet, e, idx));
        sheets.push(sheet);
    }
    let backend = FixtureBackend::from_lines(lines);
    let config = ExperimentConfig {
        input_path: write_input(dir.path(), &sheets),
        output_dir: dir.path().join("run"),
        models: vec![BackendConfig::mock("fixture")],
        conditions: vec![ConditionSpec {
            condition: ConditionKind::Base,
            trials: 1,
        }],
        ..ExperimentConfig::default()
    };
    let factory = |_: &BackendConfig| -> Result<Box<dyn Backend + '_>, PipelineError> { Ok(Box::new(&backend)) };
    let run = run_experiment_with(&config, &factory).map_err(|e| e.to_string())?;
    ensure!(run.failure_count() == 0, "{} failures", run.failure_count());
    let bundle = analyze(&run, &AnalyzeOptions::default()).map_err(|e| e.to_string())?;
    let matrix = bundle.correlation("fixture").ok_or("no correlation matrix")?;
    let r = matrix.get("E", "E").ok_or("E/E correlation undefined")?;
    ensure!(matrix.n == 28, "correlated over {} respondents", matrix.n);
    ensure!(r.statistic > 0.9, "r = {:.3}", r.statistic);
    Ok(format!(
        "EPQR-A E vs BFI E r = {:.3} (p = {:.1e}, n = {})",
        r.statistic, r.p_value, matrix.n
    ))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("scoring vector", scoring_vector),
        ("manipulation", manipulation),
        ("random baseline", random_baseline),
        ("statistics oracle", statistics_oracle),
        ("error metrics", error_metric_checks),
        ("normalization", normalization),
        ("prompt fidelity", prompt_fidelity),
        ("end-to-end determinism", end_to_end),
        ("significance marking", significance_marking),
        ("cross-instrument correlation", cross_instrument),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
