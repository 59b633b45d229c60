//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use causal_themes::completeness::completeness_estimate;
use causal_themes::inference::{
    analytic_variance, combined_estimator, combined_variance, diff_in_means, estimate_analytic, estimate_bootstrap,
    label_cost_curve, wald_test, BootstrapConfig, IntervalKind, LabelCostConfig,
};
use causal_themes::llm::{ChatMessage, FnBackend, LlmClient, LlmConfig, LlmError};
use causal_themes::losses::LossSpec;
use causal_themes::permtest::{exhaustive_test_aligned, permutation_test_aligned, PermutationConfig};
use causal_themes::themes::{numeric_view, NumericScoreView, ScalePoint, ScoreProvenance, ThemeProvenance};
use causal_themes::{rng, GroupLabel, LabelMap, Metric, ScoreMatrix, Theme, ThemeSet};
use causal_themes_cli::project::Project;
use causal_themes_cli::synthetic::{SyntheticCorpus, LLM_STEPS};
use causal_themes_cli::{config::Config, run_args, Runtime};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant) -> Result<String, String> {
    let took = started.elapsed();
    let text = format!("{:.1}s", took.as_secs_f64());
    if took <= limit {
        Ok(text)
    } else {
        Err(format!("took {text}, limit {}s", limit.as_secs()))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

fn id(i: usize) -> String {
    format!("d{i:04}")
}

fn group(treated: bool) -> GroupLabel {
    if treated {
        GroupLabel::Treatment
    } else {
        GroupLabel::Control
    }
}

/// Labels for `h1` treated documents followed by `h0` control ones.
fn block_labels(h1: usize, h0: usize) -> LabelMap {
    (0..h1 + h0).map(|i| (id(i), group(i < h1))).collect()
}

fn view(rows: Vec<Vec<f64>>, columns: &[&str]) -> NumericScoreView {
    NumericScoreView::from_rows((0..rows.len()).map(id).collect(), columns, rows)
}

/// Draws from `{0, 1, 2, 3}` with the given probabilities.
fn level<R: Rng>(probs: &[f64; 4], r: &mut R) -> f64 {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as f64;
        }
    }
    3.0
}

const HIGH: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
const LOW: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
const FLAT: [f64; 4] = [0.25; 4];

/// Ordinal scores on three themes with effects `1, 0, -1`.
fn ordinal_scores<R: Rng>(h1: usize, h0: usize, r: &mut R) -> (NumericScoreView, [f64; 3]) {
    let rows = (0..h1 + h0)
        .map(|i| {
            if i < h1 {
                vec![level(&HIGH, r), level(&FLAT, r), level(&LOW, r)]
            } else {
                vec![level(&LOW, r), level(&FLAT, r), level(&HIGH, r)]
            }
        })
        .collect();
    (view(rows, &["A", "B", "C"]), [1.0, 0.0, -1.0])
}

/// Human scores plus `+bias1` (treated) or `-bias0` (control) and noise.
fn biased_machine<R: Rng>(human: &NumericScoreView, labels: &LabelMap, bias1: f64, bias0: f64, sd: f64, r: &mut R) -> NumericScoreView {
    let noise = Normal::new(0.0, sd).unwrap();
    let rows = human
        .document_ids()
        .iter()
        .zip(human.rows())
        .map(|(d, row)| {
            let shift = if labels[d].is_treatment() { bias1 } else { -bias0 };
            row.iter().map(|y| y + shift + noise.sample(r)).collect()
        })
        .collect();
    let cols: Vec<&str> = human.columns().iter().map(|c| c.theme_id.as_str()).collect();
    NumericScoreView::from_rows(human.document_ids().to_vec(), &cols, rows)
}

fn permutation_exactness() -> Outcome {
    let started = Instant::now();
    let b = 50_000;
    let mut worst: f64 = 0.0;
    for c in 0..20u64 {
        let mut r = rng::stream(101, c);
        let h = r.random_range(4..=8);
        let h1 = r.random_range(1..h);
        let mut labels: Vec<GroupLabel> = (0..h).map(|i| group(i < h1)).collect();
        labels.shuffle(&mut r);
        let predictions: Vec<GroupLabel> = (0..h).map(|_| group(r.random_bool(0.5))).collect();
        let metric = if c % 2 == 0 { Metric::Accuracy } else { Metric::F1 };
        let spec = LossSpec::new(metric, GroupLabel::Treatment);
        let trivial = group(c % 3 != 0);
        let exact = exhaustive_test_aligned(&labels, &predictions, trivial, spec).map_err(|e| e.to_string())?;
        let mc = permutation_test_aligned(&labels, &predictions, trivial, &PermutationConfig::new(spec, b, c))
            .map_err(|e| e.to_string())?;
        worst = worst.max((mc.p_value - exact.p_value).abs());
    }
    let time = within(Duration::from_secs(60), started)?;
    ensure(worst < 0.01, format!("max |p_mc - p_exact| = {worst:.4} over 20 configurations, B = {b}, {time}"))
}

fn permutation_size() -> Outcome {
    let started = Instant::now();
    let reps = 2000;
    let (h1, h0) = (20, 20);
    let labels: Vec<GroupLabel> = (0..h1 + h0).map(|i| group(i < h1)).collect();
    let spec = LossSpec::accuracy();
    let rejections = (0..reps as u64)
        .into_par_iter()
        .filter(|&i| {
            let mut r = rng::stream(202, i);
            let predictions: Vec<GroupLabel> = (0..h1 + h0).map(|_| group(r.random_bool(0.5))).collect();
            let cfg = PermutationConfig::new(spec, 499, 10_000 + i);
            let t = permutation_test_aligned(&labels, &predictions, GroupLabel::Treatment, &cfg).unwrap();
            t.p_value <= 0.05
        })
        .count();
    let rate = rejections as f64 / reps as f64;
    let time = within(Duration::from_secs(300), started)?;
    ensure(rate <= 0.06, format!("rejection rate {rate:.4} at alpha 0.05 over {reps} null replications, {time}"))
}

fn completeness_arithmetic() -> Outcome {
    let cases = [(0.71, 0.85, 0.86, 93), (0.71, 0.81, 0.86, 67), (0.71, 0.73, 0.86, 13)];
    let mut got = Vec::new();
    for (trivial, theme, full, expected) in cases {
        let c = completeness_estimate(1.0 - trivial, 1.0 - theme, 1.0 - full).map_err(|e| e.to_string())?;
        let pct = (c * 100.0).round() as i64;
        got.push(format!("{pct}%"));
        if pct != expected {
            return Err(format!("({trivial}, {theme}, {full}) gave {pct}%, expected {expected}%"));
        }
    }
    Ok(got.join(", "))
}

fn algebraic_reductions() -> Outcome {
    let mut r = rng::seeded(303);
    let labels = block_labels(37, 29);
    let (human, _) = ordinal_scores(37, 29, &mut r);
    let machine = biased_machine(&human, &labels, 0.7, 0.4, 1.0, &mut r);
    let tau_dagger = combined_estimator(&machine, &human, &labels).map_err(|e| e.to_string())?;
    let tau = diff_in_means(&human, &labels).map_err(|e| e.to_string())?;
    let d_tau = tau_dagger.iter().zip(&tau).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let v_dagger = combined_variance(&machine, &human, &labels).map_err(|e| e.to_string())?;
    let v = analytic_variance(&human, &labels).map_err(|e| e.to_string())?;
    let d_var = v_dagger.iter().zip(&v).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);

    let themes = ThemeSet::new(
        vec![
            Theme {
                theme_id: "ORD".into(),
                theme_name: "Ordinal".into(),
                theme_description: "An ordinal theme.".into(),
                theme_scale: (0..=2).map(ScalePoint::Int).collect(),
            },
            Theme {
                theme_id: "CAT".into(),
                theme_name: "Categorical".into(),
                theme_description: "A categorical theme.".into(),
                theme_scale: ["theory", "empirics", "methods", "review"]
                    .into_iter()
                    .map(|c| ScalePoint::Category(c.into()))
                    .collect(),
            },
        ],
        ThemeProvenance::HumanEdited,
    )
    .map_err(|e| e.to_string())?;
    let mut matrix = ScoreMatrix::new(ScoreProvenance::Human);
    let ids: Vec<String> = (0..200).map(id).collect();
    let cats = ["theory", "empirics", "methods", "review"];
    for d in &ids {
        let line = format!("ORD{},CAT{}", r.random_range(0..=2), cats[r.random_range(0..4)]);
        let parsed = themes.parse_score_line(&line).map_err(|e| e.to_string())?;
        matrix.insert(d, parsed, None, &themes).map_err(|e| e.to_string())?;
    }
    let onehot = numeric_view(&matrix, &themes, &ids).map_err(|e| e.to_string())?;
    let range = onehot.column_range("CAT").ok_or("no CAT columns")?;
    let bad_rows = (0..onehot.n_rows())
        .filter(|&i| onehot.row(i)[range.clone()].iter().sum::<f64>() != 1.0)
        .count();
    ensure(
        d_tau < 1e-12 && d_var < 1e-12 && bad_rows == 0,
        format!("|tau_dagger - tau| = {d_tau:.1e}, relative variance gap {d_var:.1e}, {bad_rows} one-hot rows off 1"),
    )
}

fn combined_unbiased() -> Outcome {
    let started = Instant::now();
    let reps = 5000;
    let (h1, h0, l1, l0) = (200, 200, 50, 50);
    let labels = block_labels(h1, h0);
    let labeled: Vec<String> = (0..l1).chain(h1..h1 + l0).map(id).collect();
    let draws: Vec<Vec<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(404, i);
            let (human, _) = ordinal_scores(h1, h0, &mut r);
            let machine = biased_machine(&human, &labels, 0.5, 0.3, 0.7, &mut r);
            combined_estimator(&machine, &human.select(&labeled).unwrap(), &labels).unwrap()
        })
        .collect();
    let tau = [1.0, 0.0, -1.0];
    let mut lines = Vec::new();
    let mut ok = true;
    for (j, t) in tau.iter().enumerate() {
        let xs: Vec<f64> = draws.iter().map(|d| d[j]).collect();
        let se = (variance(&xs) / reps as f64).sqrt();
        let z = (mean(&xs) - t) / se;
        ok &= z.abs() < 3.0;
        lines.push(format!("{z:+.2}"));
    }
    let time = within(Duration::from_secs(300), started)?;
    ensure(ok, format!("bias in Monte Carlo SEs per theme: {}, {reps} reps, h = 400, l = 100, {time}", lines.join(" ")))
}

fn ci_coverage() -> Outcome {
    let reps = 2000;
    let labels = block_labels(100, 100);
    let covered: Vec<[bool; 3]> = (0..reps as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(505, i);
            let (human, tau) = ordinal_scores(100, 100, &mut r);
            let table = estimate_analytic(&human, &labels, 0.95).unwrap();
            let mut out = [false; 3];
            for (j, row) in table.rows.iter().enumerate() {
                out[j] = row.ci_low <= tau[j] && tau[j] <= row.ci_high;
            }
            out
        })
        .collect();
    let rates: Vec<f64> = (0..3).map(|j| covered.iter().filter(|c| c[j]).count() as f64 / reps as f64).collect();
    let ok = rates.iter().all(|r| (0.93..=0.97).contains(r));
    let shown: Vec<String> = rates.iter().map(|r| format!("{:.1}%", r * 100.0)).collect();
    ensure(ok, format!("coverage {} at h = 200 over {reps} replications", shown.join(", ")))
}

fn bootstrap_consistency() -> Outcome {
    let mut r = rng::seeded(606);
    let labels = block_labels(250, 250);
    let (human, _) = ordinal_scores(250, 250, &mut r);
    let analytic = estimate_analytic(&human, &labels, 0.95).map_err(|e| e.to_string())?;
    let boot = estimate_bootstrap(&human, &labels, &BootstrapConfig { draws: 10_000, seed: 7 }, 0.95, IntervalKind::Normal)
        .map_err(|e| e.to_string())?;
    let ratios: Vec<f64> = analytic.rows.iter().zip(&boot.rows).map(|(a, b)| b.std_error / a.std_error).collect();
    let ok = ratios.iter().all(|q| (q - 1.0).abs() < 0.1);
    let shown: Vec<String> = ratios.iter().map(|q| format!("{q:.3}")).collect();
    ensure(ok, format!("bootstrap/analytic SE ratios {} at h = 500, 10000 draws", shown.join(", ")))
}

fn label_cost_monotone() -> Outcome {
    let mut r = rng::seeded(707);
    let labels = block_labels(100, 100);
    let (human, _) = ordinal_scores(100, 100, &mut r);
    let machine = biased_machine(&human, &labels, 0.5, 0.3, 1.0, &mut r);
    let cfg = LabelCostConfig {
        ells: vec![20, 40, 60, 80, 100],
        outer: 200,
        inner: 50,
        seed: 8,
    };
    let curve = label_cost_curve(&machine, &human, &labels, &cfg).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for theme in curve.theme_ids() {
        let s = curve.series(&theme);
        for w in s.windows(2) {
            worst = worst.max(w[1].1 / w[0].1 - 1.0);
        }
    }
    ensure(worst <= 0.05, format!("largest relative increase between successive grid points {:+.3}", worst))
}

fn wald() -> Outcome {
    let one = DMatrix::from_element(1, 1, 0.5);
    let zero = wald_test(&[1.0], &[1.0], &one, &one).map_err(|e| e.to_string())?;
    let four = wald_test(&[2.0], &[0.0], &one, &one).map_err(|e| e.to_string())?;
    ensure(
        zero.p_value == 1.0 && (four.statistic - 4.0).abs() < 1e-12 && (four.p_value - 0.0455).abs() < 1e-3,
        format!("Z = 0 gives p = {}, Z = {} gives p = {:.6}", zero.p_value, four.statistic, four.p_value),
    )
}

// ---- end-to-end ----

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic")
}

fn new_project() -> anyhow::Result<tempfile::TempDir> {
    let dir = tempfile::tempdir()?;
    for f in ["corpus.jsonl", "causal-themes.toml"] {
        std::fs::copy(fixtures().join(f), dir.path().join(f))?;
    }
    std::fs::create_dir_all(dir.path().join("transcripts"))?;
    std::fs::copy(
        fixtures().join("transcripts/transcript.jsonl"),
        dir.path().join("transcripts/transcript.jsonl"),
    )?;
    Ok(dir)
}

fn cli(dir: &Path, args: &[&str]) -> anyhow::Result<String> {
    let mut argv = vec!["-C", dir.to_str().expect("utf-8 path")];
    argv.extend_from_slice(args);
    run_args(argv, Runtime::default())
}

fn project(dir: &Path) -> anyhow::Result<Project> {
    Ok(Project::open(dir, Config::load(dir)?))
}

/// Scores every hold-out document through the HTTP service with the true
/// levels and returns every response body.
fn scripted_annotation(dir: &Path, truth: &SyntheticCorpus) -> anyhow::Result<Vec<String>> {
    let store = causal_themes_cli::commands::annotation_store(&project(dir)?)?;
    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let base = format!("http://{}", listener.local_addr()?);
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = rt.spawn(causal_themes_annotate::serve_listener(listener, store, async {
        let _ = stopped.await;
    }));
    let http = reqwest::blocking::Client::new();
    let mut bodies = Vec::new();
    let get = |path: &str, bodies: &mut Vec<String>| -> anyhow::Result<Value> {
        let text = http.get(format!("{base}{path}")).send()?.error_for_status()?.text()?;
        bodies.push(text.clone());
        Ok(serde_json::from_str(&text)?)
    };
    get("/themes", &mut bodies)?;
    get("/session/expert", &mut bodies)?;
    loop {
        let next = get("/session/expert/next", &mut bodies)?;
        if next["status"] == "complete" {
            break;
        }
        let doc = next["document_id"].as_str().unwrap_or_default().to_string();
        let t = truth.truth_of(&doc).ok_or_else(|| anyhow::anyhow!("no truth for {doc}"))?;
        let body = json!({"document_id": doc, "scores": t.scores});
        let text = http
            .post(format!("{base}/session/expert/score"))
            .json(&body)
            .send()?
            .error_for_status()?
            .text()?;
        bodies.push(text);
    }
    get("/progress", &mut bodies)?;
    let _ = stop.send(());
    rt.block_on(server)??;
    Ok(bodies)
}

fn full_pipeline(truth: &SyntheticCorpus) -> anyhow::Result<BTreeMap<String, Vec<u8>>> {
    let dir = new_project()?;
    for step in LLM_STEPS {
        cli(dir.path(), &[step])?;
    }
    let bodies = scripted_annotation(dir.path(), truth)?;
    let leaks = bodies
        .iter()
        .filter(|b| ["\"group\"", "Treatment", "treatment", "Control\"", "control\""].iter().any(|w| b.contains(w)))
        .count();
    anyhow::ensure!(leaks == 0, "{leaks} annotation responses mention group labels");
    for step in ["register", "reveal", "report", "verify-audit"] {
        cli(dir.path(), &[step])?;
    }
    let mut reports = BTreeMap::new();
    for entry in std::fs::read_dir(dir.path().join("reports"))? {
        let entry = entry?;
        reports.insert(entry.file_name().to_string_lossy().into_owned(), std::fs::read(entry.path())?);
    }
    Ok(reports)
}

fn end_to_end_replay() -> Outcome {
    let truth = SyntheticCorpus::read(&fixtures().join("corpus.jsonl"), &fixtures().join("truth.jsonl"))
        .map_err(|e| e.to_string())?;
    let first = full_pipeline(&truth).map_err(|e| format!("first run: {e:#}"))?;
    let second = full_pipeline(&truth).map_err(|e| format!("second run: {e:#}"))?;
    let names: Vec<&String> = first.keys().collect();
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    if first.len() != second.len() || !differing.is_empty() {
        return Err(format!("reports differ between runs: {differing:?}"));
    }
    for needed in ["report.txt", "test.json", "estimate.json", "completeness.json", "tradeoff.csv"] {
        if !first.contains_key(needed) {
            return Err(format!("missing report {needed}"));
        }
    }
    let negatives = firewall_negatives().map_err(|e| format!("firewall: {e:#}"))?;
    Ok(format!("{} report files byte-identical across two replays; {negatives}", names.len()))
}

fn refused(result: anyhow::Result<String>, what: &str) -> anyhow::Result<()> {
    match result {
        Ok(out) => anyhow::bail!("{what} was allowed: {out}"),
        Err(_) => Ok(()),
    }
}

fn firewall_negatives() -> anyhow::Result<String> {
    let dir = new_project()?;
    let d = dir.path();
    cli(d, &["split"])?;
    // early label access
    refused(cli(d, &["test"]), "testing before reveal")?;
    refused(cli(d, &["estimate"]), "estimating before reveal")?;
    anyhow::ensure!(project(d)?.holdout_labels().is_err(), "hold-out labels readable before reveal");
    // stage skips
    refused(cli(d, &["release-holdout"]), "releasing the hold-out before freezing themes")?;
    refused(cli(d, &["classify"]), "classifying before release")?;
    refused(cli(d, &["reveal"]), "revealing before registration")?;
    // payload leakage
    let p = project(d)?;
    let fw = p.firewall()?;
    let holdout = p.holdout_documents()?;
    let client = LlmClient::new(LlmConfig::default(), Box::new(FnBackend(|_: &_| Ok("ok".to_string()))))?
        .with_guard(p.journal_path(), p.llm_guard(&fw)?);
    let leak = format!("Please compare with this one: {}", holdout[0].text);
    match client.send(&[ChatMessage::user(leak)]) {
        Err(LlmError::Firewall(_)) => {}
        other => anyhow::bail!("leaking prompt was not blocked: {other:?}"),
    }
    let ciphertext = std::fs::read_to_string(d.join("sealed_labels.json"))?;
    match client.send(&[ChatMessage::user(ciphertext)]) {
        Err(LlmError::Firewall(_)) => {}
        other => anyhow::bail!("sealed labels in a prompt were not blocked: {other:?}"),
    }
    cli(d, &["verify-audit"])?;
    // tampering breaks the chain
    let journal = p.journal_path();
    let text = std::fs::read_to_string(&journal)?;
    anyhow::ensure!(text.contains("\"count\":100"), "unexpected journal layout");
    std::fs::write(&journal, text.replacen("\"count\":100", "\"count\":99", 1))?;
    refused(cli(d, &["verify-audit"]), "a tampered journal")?;
    Ok("8 firewall negatives fail closed".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("permutation test exactness", permutation_exactness),
        ("permutation test size", permutation_size),
        ("completeness arithmetic", completeness_arithmetic),
        ("algebraic reductions", algebraic_reductions),
        ("combined estimator unbiasedness", combined_unbiased),
        ("confidence interval coverage", ci_coverage),
        ("bootstrap and analytic variance agree", bootstrap_consistency),
        ("label-cost curve decreases", label_cost_monotone),
        ("Wald test calibration", wald),
        ("end-to-end replay and firewall", end_to_end_replay),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
