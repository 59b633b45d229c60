//! One function per subcommand. Each checks the firewall stage, reads its
//! inputs from the project directory and returns a short summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use causal_themes::completeness::{train_logistic, ReverseTable};
use causal_themes::corpus::split_sample;
use causal_themes::firewall::{seal, write_json, Evidence, Firewall, PipelineStage, SealedLabels};
use causal_themes::inference::{
    combined_estimate, estimate_analytic, estimate_bootstrap, label_cost_curve, BootstrapConfig,
    CombinedEffectEstimate, EstimateTable, LabelCostConfig, LabelCostCurve,
};
use causal_themes::llm::{
    classify_reverse, propose_themes, score_documents, summarize_differences, ChatBackend, DescribeSession, HttpBackend,
    IdMask, LlmClient, Provider, RecordingBackend, ReplayBackend, ReverseClassification,
};
use causal_themes::losses::{trivial_predictor, Confusion, LabelMap, LossSpec};
use causal_themes::permtest::{permutation_test, PermutationConfig, PermutationTestResult};
use causal_themes::rng::derive_seed;
use causal_themes::themes::{numeric_view, read_score_records, ThemeEdit, ThemeProvenance};
use causal_themes::{GroupLabel, Metric, PredictionSet, ThemeSet};
use causal_themes_annotate::{Store, StorePaths};
use serde::{Deserialize, Serialize};

use crate::project::*;

/// Runtime options that are not part of the hashed configuration.
#[derive(Default)]
pub struct Runtime {
    /// Answer LLM requests from this transcript directory.
    pub replay: Option<std::path::PathBuf>,
    /// Backend to use instead of the configured provider; its exchanges are
    /// recorded like live ones.
    pub backend: Option<Box<dyn ChatBackend>>,
}

fn seed(project: &Project, purpose: &str) -> u64 {
    derive_seed(project.config.seed, purpose)
}

fn client(project: &Project, runtime: &mut Runtime, fw: &Firewall) -> anyhow::Result<LlmClient> {
    let transcripts = project.transcripts_dir();
    let backend: Box<dyn ChatBackend> = match (runtime.backend.take(), &runtime.replay) {
        (Some(b), _) => Box::new(RecordingBackend::new(b, &transcripts)?),
        (None, Some(dir)) => Box::new(ReplayBackend::open(dir)?),
        (None, None) => match project.config.llm.provider {
            Provider::Replay => Box::new(ReplayBackend::open(&transcripts)?),
            Provider::HttpApi => Box::new(RecordingBackend::new(
                Box::new(HttpBackend::new(&project.config.llm)?),
                &transcripts,
            )?),
        },
    };
    Ok(LlmClient::new(project.config.llm.clone(), backend)?.with_guard(project.journal_path(), project.llm_guard(fw)?))
}

pub fn init(project: &Project) -> anyhow::Result<String> {
    let path = project.path(crate::config::CONFIG_FILE);
    if path.exists() {
        bail!("{} already exists", path.display());
    }
    project.write_text(crate::config::CONFIG_FILE, &project.config.to_toml())?;
    Ok(format!("wrote {}", path.display()))
}

pub fn split(project: &Project) -> anyhow::Result<String> {
    let mut fw = project.firewall()?;
    fw.require_before(PipelineStage::ThemesFrozen)?;
    if fw.seal_commitment().is_some() {
        bail!("the corpus is already split and its hold-out labels sealed");
    }
    let corpus = project.corpus()?;
    let cfg = &project.config.split;
    let split = split_sample(&corpus, cfg.h1, cfg.h0, seed(project, "split"))?;
    project.write("split.json", &split.manifest())?;
    let (sealed, key) = seal(&split.holdout_labels(), &mut rand::rng());
    project.write("sealed_labels.json", &sealed)?;
    write_json(project.escrow_path(), &key).context("writing the escrow key")?;
    fw.record_seal(&sealed)?;
    Ok(format!(
        "training {} documents; hold-out {} treated, {} control; labels sealed ({})",
        split.training_ids().len(),
        split.h1(),
        split.h0(),
        sealed.commitment
    ))
}

pub fn summarize(project: &Project, runtime: &mut Runtime) -> anyhow::Result<String> {
    let fw = project.firewall()?;
    fw.require_before(PipelineStage::ThemesFrozen)?;
    let training = project.training_documents()?;
    let holdout_ids = project.holdout_ids()?;
    let client = client(project, runtime, &fw)?;
    let session = summarize_differences(&client, &training, &holdout_ids, seed(project, "mask:describe"))?;
    let summary = session.summary.clone().unwrap_or_default();
    project.write(DESCRIBE_SESSION, &session)?;
    project.write_text("reports/summary.txt", &format!("{summary}\n"))?;
    Ok(summary)
}

pub fn propose(project: &Project, runtime: &mut Runtime) -> anyhow::Result<String> {
    let fw = project.firewall()?;
    fw.require_before(PipelineStage::ThemesFrozen)?;
    let mut session: DescribeSession = project.read(DESCRIBE_SESSION).context("run summarize first")?;
    let training_ids: Vec<String> = project.training_documents()?.into_iter().map(|d| d.document_id).collect();
    let client = client(project, runtime, &fw)?;
    let (themes, scores) = propose_themes(&client, &mut session, &training_ids)?;
    project.write(DESCRIBE_SESSION, &session)?;
    project.write("themes.json", &themes)?;
    project.write_scores(MACHINE_TRAINING_SCORES, &scores, &themes)?;
    Ok(render_themes(&themes))
}

pub fn edit_themes(project: &Project, edits: &Path) -> anyhow::Result<String> {
    let fw = project.firewall()?;
    fw.require_before(PipelineStage::ThemesFrozen)?;
    let edits: Vec<ThemeEdit> = causal_themes::firewall::read_json(edits)
        .with_context(|| format!("reading {}", edits.display()))?;
    let edited = project.themes()?.edit(&edits)?;
    project.write("themes.json", &edited)?;
    Ok(render_themes(&edited))
}

pub fn freeze(project: &Project) -> anyhow::Result<String> {
    let mut fw = project.firewall()?;
    if fw.seal_commitment().is_none() {
        bail!("split the corpus before freezing themes");
    }
    let frozen = project.themes()?.freeze()?;
    let commitment = frozen.commitment().expect("frozen sets carry a commitment").to_string();
    fw.advance(PipelineStage::ThemesFrozen, Evidence::ThemeCommitment { commitment: commitment.clone() })?;
    project.write("themes.json", &frozen)?;
    Ok(format!("themes frozen ({commitment})"))
}

pub fn release_holdout(project: &Project) -> anyhow::Result<String> {
    let mut fw = project.firewall()?;
    let sealed: SealedLabels = project.read("sealed_labels.json")?;
    fw.advance(
        PipelineStage::HoldoutTextAvailable,
        Evidence::SealedLabels { commitment: sealed.commitment },
    )?;
    Ok(format!("{} hold-out texts released", sealed.count))
}

#[derive(Serialize, Deserialize)]
struct ReverseRecord {
    conversation: causal_themes::llm::Conversation,
    mask: IdMask,
}

pub fn classify(project: &Project, runtime: &mut Runtime) -> anyhow::Result<String> {
    let fw = project.firewall()?;
    fw.require(PipelineStage::HoldoutTextAvailable)?;
    fw.require_before(PipelineStage::PredictionsRegistered)?;
    let training = project.training_documents()?;
    let holdout = project.holdout_documents()?;
    let mut client = client(project, runtime, &fw)?;
    let ReverseClassification {
        predictions,
        conversation,
        mask,
    } = classify_reverse(&mut client, &training, &holdout, seed(project, "mask:reverse"))?;
    project.write(LLM_PREDICTIONS, &predictions)?;
    project.write(REVERSE_CONVERSATION, &ReverseRecord { conversation, mask })?;
    Ok(format!("{} hold-out documents classified", predictions.len()))
}

pub fn score_machine(project: &Project, runtime: &mut Runtime) -> anyhow::Result<String> {
    let fw = project.firewall()?;
    fw.require(PipelineStage::HoldoutTextAvailable)?;
    fw.require_before(PipelineStage::PredictionsRegistered)?;
    let themes = project.frozen_themes()?;
    let holdout = project.holdout_documents()?;
    let holdout_ids: Vec<String> = holdout.iter().map(|d| d.document_id.clone()).collect();
    let mut session: DescribeSession = project.read(DESCRIBE_SESSION).context("run summarize first")?;
    let mut client = client(project, runtime, &fw)?;
    client.register_aliases(&session.mask, &holdout_ids);
    let revised = themes.provenance() == ThemeProvenance::HumanEdited;
    let scores = score_documents(&client, &mut session, &holdout, &themes, revised)?;
    project.write(DESCRIBE_SESSION, &session)?;
    project.write_scores(MACHINE_SCORES, &scores, &themes)?;
    Ok(format!("{} hold-out documents machine-scored", scores.len()))
}

/// Blinded annotation store over the project's hold-out.
pub fn annotation_store(project: &Project) -> anyhow::Result<Store> {
    let themes = project.frozen_themes()?;
    let paths = StorePaths {
        journal: project.journal_path(),
        scores: project.path(HUMAN_SCORES),
        sessions: project.path(SESSIONS),
    };
    Ok(Store::open(project.holdout_documents()?, themes, seed(project, "annotation"), paths)?)
}

pub fn serve(project: &Project, bind: Option<&str>) -> anyhow::Result<String> {
    project.firewall()?.require(PipelineStage::ThemesFrozen)?;
    let store = annotation_store(project)?;
    let addr: std::net::SocketAddr = bind.unwrap_or(&project.config.annotation.bind).parse()?;
    let runtime = tokio::runtime::Runtime::new()?;
    eprintln!("annotation service on http://{addr}");
    runtime.block_on(causal_themes_annotate::serve(addr, store))?;
    Ok("annotation service stopped".into())
}

pub fn register(project: &Project) -> anyhow::Result<String> {
    let mut fw = project.firewall()?;
    let names = project.registrable_artifacts()?;
    ensure!(!names.is_empty(), "nothing to register; write predictions or scores first");
    let artifacts = names
        .iter()
        .map(|n| Ok((n.clone(), project.artifact_digest(n)?)))
        .collect::<anyhow::Result<BTreeMap<_, _>>>()?;
    fw.advance(PipelineStage::PredictionsRegistered, Evidence::Registration { artifacts })?;
    Ok(format!("registered {}", names.join(", ")))
}

pub fn reveal(project: &Project) -> anyhow::Result<String> {
    let mut fw = project.firewall()?;
    let artifacts = fw
        .registered_artifacts()
        .keys()
        .map(|n| Ok((n.clone(), project.artifact_digest(n)?)))
        .collect::<anyhow::Result<BTreeMap<_, _>>>()?;
    let themes = project.themes()?;
    let theme_commitment = themes.commitment().unwrap_or_default().to_string();
    fw.advance(PipelineStage::LabelsRevealed, Evidence::Reveal { artifacts, theme_commitment })?;
    let labels = project.holdout_labels()?;
    Ok(format!("{} hold-out labels revealed", labels.len()))
}

fn revealed(project: &Project) -> anyhow::Result<LabelMap> {
    project.firewall()?.require(PipelineStage::LabelsRevealed)?;
    project.holdout_labels()
}

fn spec(project: &Project) -> anyhow::Result<LossSpec> {
    Ok(LossSpec::new(project.config.test.metric, project.positive_class()?))
}

fn trivial_label(project: &Project, spec: LossSpec) -> anyhow::Result<GroupLabel> {
    let training: Vec<GroupLabel> = project.training_labels()?.into_values().collect();
    Ok(trivial_predictor(&training, spec)?)
}

/// Result of the reverse-classification test.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestReport {
    pub config_hash: String,
    pub trivial_label: GroupLabel,
    pub positive_class: GroupLabel,
    pub accuracy: f64,
    pub f1: f64,
    pub test: PermutationTestResult,
}

impl TestReport {
    pub fn render(&self) -> String {
        format!(
            "reverse classification: accuracy {:.0}%, F1 {:.2}\nimprovement over constant {} ({}): {:.3}, p = {:.4} (B = {})\n",
            self.accuracy * 100.0,
            self.f1,
            self.trivial_label,
            self.test.metric,
            self.test.delta,
            self.test.p_value,
            self.test.permutations
        )
    }
}

pub fn test_report(project: &Project) -> anyhow::Result<TestReport> {
    let labels = revealed(project)?;
    let predictions = project.predictions(LLM_PREDICTIONS)?;
    let spec = spec(project)?;
    let trivial = trivial_label(project, spec)?;
    let cfg = PermutationConfig::new(spec, project.config.test.permutations, seed(project, "permutation"));
    let test = permutation_test(&labels, &predictions, trivial, &cfg)?;
    let aligned = causal_themes::losses::align(&labels, &predictions)?;
    let confusion = Confusion::tally(&aligned.labels, &aligned.predictions, spec.positive_class);
    Ok(TestReport {
        config_hash: project.config.hash(),
        trivial_label: trivial,
        positive_class: spec.positive_class,
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        test,
    })
}

pub fn test(project: &Project) -> anyhow::Result<String> {
    let report = test_report(project)?;
    project.write("reports/test.json", &report)?;
    let text = report.render();
    project.write_text("reports/test.txt", &text)?;
    Ok(text)
}

/// Ids of the human-scored subset, in scoring order, under the policy.
fn labeled_ids(project: &Project) -> anyhow::Result<Vec<String>> {
    let path = project.path(HUMAN_SCORES);
    if !path.exists() {
        bail!("missing artifact {HUMAN_SCORES}; score documents with `serve`");
    }
    let records = read_score_records(BufReader::new(fs::File::open(path)?))?;
    let mut out: Vec<String> = Vec::new();
    for r in records {
        if let causal_themes::themes::AnnotatorPolicy::Only(a) = &project.config.annotation.policy {
            if r.annotator_id.as_deref() != Some(a.as_str()) {
                continue;
            }
        }
        if !out.contains(&r.document_id) {
            out.push(r.document_id);
        }
    }
    if let Some(budget) = project.config.estimate.labeled_budget {
        out.truncate(budget);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateReport {
    pub config_hash: String,
    pub theme_commitment: String,
    /// Difference in means of human scores on the labeled subset.
    pub human: EstimateTable,
    pub human_bootstrap: EstimateTable,
    /// Machine scores on the hold-out, corrected with the human subset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combined: Option<CombinedEffectEstimate>,
}

impl EstimateReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "human scores, analytic standard errors");
        out.push_str(&self.human.render());
        let _ = writeln!(out, "\nhuman scores, bootstrap ({} intervals)", interval_name(&self.human_bootstrap));
        out.push_str(&self.human_bootstrap.render());
        if let Some(c) = &self.combined {
            let _ = writeln!(out, "\nmachine scores corrected by human scores");
            out.push_str(&c.render());
        }
        out
    }
}

fn interval_name(t: &EstimateTable) -> &'static str {
    match t.interval {
        causal_themes::inference::IntervalKind::Normal => "normal",
        causal_themes::inference::IntervalKind::Percentile => "percentile",
    }
}

pub fn estimate_report(project: &Project) -> anyhow::Result<EstimateReport> {
    let labels = revealed(project)?;
    let themes = project.frozen_themes()?;
    let policy = &project.config.annotation.policy;
    let labeled = labeled_ids(project)?;
    let human = project.scores(HUMAN_SCORES, &themes, policy)?;
    let human_view = numeric_view(&human, &themes, &labeled)?;
    let cfg = &project.config.estimate;
    let analytic = estimate_analytic(&human_view, &labels, cfg.level)?;
    let boot_cfg = BootstrapConfig {
        draws: cfg.bootstrap_draws,
        seed: seed(project, "bootstrap"),
    };
    let bootstrap = estimate_bootstrap(&human_view, &labels, &boot_cfg, cfg.level, cfg.interval)?;
    let combined = if project.exists(MACHINE_SCORES) {
        let machine = project.scores(MACHINE_SCORES, &themes, policy)?;
        let holdout: Vec<String> = labels.keys().cloned().collect();
        let machine_view = numeric_view(&machine, &themes, &holdout)?;
        Some(combined_estimate(&machine_view, &human_view, &labels, cfg.level)?)
    } else {
        None
    };
    Ok(EstimateReport {
        config_hash: project.config.hash(),
        theme_commitment: themes.commitment().unwrap_or_default().to_string(),
        human: analytic,
        human_bootstrap: bootstrap,
        combined,
    })
}

pub fn estimate(project: &Project) -> anyhow::Result<String> {
    let report = estimate_report(project)?;
    project.write("reports/estimate.json", &report)?;
    let text = report.render();
    project.write_text("reports/estimate.txt", &text)?;
    Ok(text)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompletenessOutput {
    pub config_hash: String,
    pub scores: crate::config::ScoreSource,
    pub table: ReverseTable,
}

pub fn completeness_report(project: &Project) -> anyhow::Result<CompletenessOutput> {
    let labels = revealed(project)?;
    let themes = project.frozen_themes()?;
    let policy = &project.config.annotation.policy;
    let training_labels = project.training_labels()?;
    let training_ids: Vec<String> = training_labels.keys().cloned().collect();
    let training_scores = project.scores(MACHINE_TRAINING_SCORES, &themes, policy)?;
    let training_view = numeric_view(&training_scores, &themes, &training_ids)?;
    let classifier = train_logistic(&training_view, &training_labels, project.config.completeness.ridge)?;

    let source = project.config.completeness.scores;
    let (eval_labels, holdout_view) = match source {
        crate::config::ScoreSource::Machine => {
            let machine = project.scores(MACHINE_SCORES, &themes, policy)?;
            let ids: Vec<String> = labels.keys().cloned().collect();
            (labels.clone(), numeric_view(&machine, &themes, &ids)?)
        }
        crate::config::ScoreSource::Human => {
            let human = project.scores(HUMAN_SCORES, &themes, policy)?;
            let ids = labeled_ids(project)?;
            let subset: LabelMap = ids.iter().filter_map(|id| labels.get(id).map(|g| (id.clone(), *g))).collect();
            (subset, numeric_view(&human, &themes, &ids)?)
        }
    };
    let theme_predictions = classifier.predict_view(&holdout_view)?;
    let full = project.predictions(LLM_PREDICTIONS)?;
    let full = PredictionSet::new(
        full.entries.into_iter().filter(|(id, _)| eval_labels.contains_key(id)).collect(),
        full.source,
    );
    let spec = spec(project)?;
    let cfg = PermutationConfig::new(spec, project.config.test.permutations, seed(project, "permutation"));
    let table = ReverseTable::build(
        &eval_labels,
        trivial_label(project, spec)?,
        ("LLM", &full),
        &[("Theme-based classification", &theme_predictions)],
        spec.positive_class,
        &cfg,
    )?;
    Ok(CompletenessOutput {
        config_hash: project.config.hash(),
        scores: source,
        table,
    })
}

pub fn completeness(project: &Project) -> anyhow::Result<String> {
    let out = completeness_report(project)?;
    project.write("reports/completeness.json", &out)?;
    let text = out.table.render();
    project.write_text("reports/completeness.txt", &text)?;
    Ok(text)
}

pub fn tradeoff_curve(project: &Project) -> anyhow::Result<LabelCostCurve> {
    let labels = revealed(project)?;
    let themes = project.frozen_themes()?;
    let policy = &project.config.annotation.policy;
    let holdout: Vec<String> = labels.keys().cloned().collect();
    let machine = project.scores(MACHINE_SCORES, &themes, policy)?;
    let human = project.scores(HUMAN_SCORES, &themes, policy)?;
    let missing = holdout.iter().filter(|id| human.get(id).is_none()).count();
    ensure!(
        missing == 0,
        "the label-cost curve needs human scores for the whole hold-out; {missing} documents are unscored"
    );
    let machine_view = numeric_view(&machine, &themes, &holdout)?;
    let human_view = numeric_view(&human, &themes, &holdout)?;
    let cfg = &project.config.tradeoff;
    let lc = LabelCostConfig {
        ells: cfg.ells.clone(),
        outer: cfg.outer,
        inner: cfg.inner,
        seed: seed(project, "tradeoff"),
    };
    Ok(label_cost_curve(&machine_view, &human_view, &labels, &lc)?)
}

pub fn tradeoff(project: &Project) -> anyhow::Result<String> {
    let curve = tradeoff_curve(project)?;
    let csv = curve.to_csv();
    project.write_text("reports/tradeoff.csv", &csv)?;
    Ok(csv)
}

/// Theme table: id, name, scale and description.
pub fn render_themes(themes: &ThemeSet) -> String {
    let mut out = String::new();
    for t in themes.themes() {
        let scale: Vec<String> = t.theme_scale.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(out, "{}  {}  [{}]", t.theme_id, t.theme_name, scale.join(", "));
        let _ = writeln!(out, "     {}", t.theme_description);
    }
    out
}

/// Writes every report and a combined `reports/report.txt`.
pub fn report(project: &Project) -> anyhow::Result<String> {
    let themes = project.frozen_themes()?;
    let mut out = String::new();
    let _ = writeln!(out, "config {}", project.config.hash());
    let _ = writeln!(out, "themes {}", themes.commitment().unwrap_or_default());
    let _ = writeln!(out, "metric {}\n", project.config.test.metric);

    let themes_text = render_themes(&themes);
    project.write_text("reports/themes.txt", &themes_text)?;
    let _ = writeln!(out, "== themes ==\n{themes_text}");

    let _ = writeln!(out, "== difference detection ==\n{}", test(project)?);
    let _ = writeln!(out, "== theme estimates ==\n{}", estimate(project)?);
    let _ = writeln!(out, "== completeness ==\n{}", completeness(project)?);
    match tradeoff(project) {
        Ok(csv) => {
            let _ = writeln!(out, "== label cost ==\n{csv}");
        }
        Err(e) => {
            let _ = writeln!(out, "== label cost ==\nskipped: {e}\n");
        }
    }
    project.write_text("reports/report.txt", &out)?;
    Ok(out)
}

pub fn verify_audit(project: &Project) -> anyhow::Result<String> {
    let summary = Firewall::audit(project.journal_path())?;
    Ok(format!(
        "journal ok: {} entries, {} transitions, {} violations, stage {}, head {}",
        summary.entries, summary.transitions, summary.violations, summary.stage, summary.head
    ))
}

pub fn metric_from_str(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: causal_themes::losses::LossError| e.to_string())
}
