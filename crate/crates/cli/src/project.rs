//! Project directory layout and firewall-aware loaders.
//!
//! ```text
//! causal-themes.toml   configuration
//! corpus.jsonl         input documents with groups
//! split.json           training and hold-out ids
//! sealed_labels.json   encrypted hold-out labels
//! escrow/key.json      decryption key (kept apart from the analysis)
//! journal.jsonl        hash-chained audit journal
//! themes.json          proposed, edited or frozen themes
//! llm/                 persisted LLM conversations
//! predictions/*.json   registered predictions
//! scores/*.jsonl       machine and human theme scores
//! reports/             outputs
//! ```

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use causal_themes::corpus::{load_corpus, HoldoutDocument, SplitManifest};
use causal_themes::firewall::{read_json, write_json, EscrowKey, Firewall, LeakageGuard, PipelineStage, SealedLabels};
use causal_themes::losses::{default_positive_class, LabelMap};
use causal_themes::themes::{AnnotatorPolicy, ScoreMatrix};
use causal_themes::{Corpus, Document, GroupLabel, PredictionSet, SampleSplit, ThemeSet};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::Config;

pub const HUMAN_SCORES: &str = "scores/human.jsonl";
pub const MACHINE_SCORES: &str = "scores/machine.jsonl";
pub const MACHINE_TRAINING_SCORES: &str = "scores/machine_training.jsonl";
pub const SESSIONS: &str = "scores/sessions.json";
pub const LLM_PREDICTIONS: &str = "predictions/llm.json";
pub const REVERSE_CONVERSATION: &str = "llm/reverse.json";
pub const DESCRIBE_SESSION: &str = "llm/describe.json";

pub struct Project {
    pub root: PathBuf,
    pub config: Config,
}

impl Project {
    pub fn open(root: impl Into<PathBuf>, config: Config) -> Project {
        Project {
            root: root.into(),
            config,
        }
    }

    pub fn path(&self, relative: impl AsRef<Path>) -> PathBuf {
        self.root.join(relative)
    }

    pub fn journal_path(&self) -> PathBuf {
        self.path("journal.jsonl")
    }

    pub fn escrow_path(&self) -> PathBuf {
        self.root.join(&self.config.paths.escrow_dir).join("key.json")
    }

    pub fn transcripts_dir(&self) -> PathBuf {
        self.root.join(&self.config.paths.transcripts_dir)
    }

    pub fn firewall(&self) -> anyhow::Result<Firewall> {
        Ok(Firewall::open(self.journal_path())?)
    }

    pub fn read<T: DeserializeOwned>(&self, relative: &str) -> anyhow::Result<T> {
        let path = self.path(relative);
        if !path.exists() {
            bail!("missing artifact {relative}");
        }
        read_json(&path).with_context(|| format!("reading {relative}"))
    }

    pub fn write<T: Serialize>(&self, relative: &str, value: &T) -> anyhow::Result<()> {
        write_json(self.path(relative), value).with_context(|| format!("writing {relative}"))
    }

    pub fn write_text(&self, relative: &str, text: &str) -> anyhow::Result<()> {
        let path = self.path(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, text).with_context(|| format!("writing {relative}"))
    }

    pub fn exists(&self, relative: &str) -> bool {
        self.path(relative).exists()
    }

    pub fn corpus(&self) -> anyhow::Result<Corpus> {
        load_corpus(self.path("corpus.jsonl")).context("loading corpus.jsonl")
    }

    pub fn split(&self, corpus: &Corpus) -> anyhow::Result<SampleSplit> {
        let manifest: SplitManifest = self.read("split.json")?;
        Ok(SampleSplit::from_manifest(&manifest, corpus)?)
    }

    pub fn training_documents(&self) -> anyhow::Result<Vec<Document>> {
        let corpus = self.corpus()?;
        let split = self.split(&corpus)?;
        Ok(corpus.training_documents(&split))
    }

    /// Hold-out texts, without groups.
    pub fn holdout_documents(&self) -> anyhow::Result<Vec<HoldoutDocument>> {
        let corpus = self.corpus()?;
        let split = self.split(&corpus)?;
        Ok(corpus.holdout_documents(&split))
    }

    pub fn holdout_ids(&self) -> anyhow::Result<Vec<String>> {
        Ok(self.read::<SplitManifest>("split.json")?.holdout_ids)
    }

    pub fn training_labels(&self) -> anyhow::Result<LabelMap> {
        Ok(self
            .training_documents()?
            .into_iter()
            .map(|d| (d.document_id, d.group))
            .collect())
    }

    /// Positive class for F1: configured, else the training majority.
    pub fn positive_class(&self) -> anyhow::Result<GroupLabel> {
        if let Some(p) = self.config.test.positive_class {
            return Ok(p);
        }
        let labels: Vec<GroupLabel> = self.training_labels()?.into_values().collect();
        Ok(default_positive_class(&labels))
    }

    /// Hold-out labels, unsealed through the firewall.
    pub fn holdout_labels(&self) -> anyhow::Result<LabelMap> {
        let fw = self.firewall()?;
        let sealed: SealedLabels = self.read("sealed_labels.json")?;
        let key: EscrowKey = read_json(self.escrow_path()).context("reading the escrow key")?;
        Ok(fw.holdout_labels(&sealed, &key)?)
    }

    /// Guard for LLM payloads: hold-out ids and texts, with the texts
    /// withheld entirely until they are released.
    pub fn llm_guard(&self, fw: &Firewall) -> anyhow::Result<LeakageGuard> {
        let ids = self.holdout_ids()?;
        let docs = self.holdout_documents()?;
        let texts = || docs.iter().map(|d| d.text.as_str());
        let mut guard = LeakageGuard::new(ids.iter()).with_texts(texts());
        if fw.stage() < PipelineStage::HoldoutTextAvailable {
            guard = guard.withhold_texts(texts());
        }
        if self.exists("sealed_labels.json") {
            guard = guard.with_sealed(&self.read("sealed_labels.json")?);
        }
        Ok(guard)
    }

    pub fn themes(&self) -> anyhow::Result<ThemeSet> {
        self.read("themes.json")
    }

    pub fn frozen_themes(&self) -> anyhow::Result<ThemeSet> {
        let themes = self.themes()?;
        if !themes.is_frozen() {
            bail!("themes.json is not frozen; run freeze-themes");
        }
        let fw = self.firewall()?;
        if fw.theme_commitment() != themes.commitment() {
            bail!("themes.json does not match the commitment in the journal");
        }
        Ok(themes)
    }

    pub fn scores(&self, relative: &str, themes: &ThemeSet, policy: &AnnotatorPolicy) -> anyhow::Result<ScoreMatrix> {
        let path = self.path(relative);
        if !path.exists() {
            bail!("missing artifact {relative}");
        }
        let file = fs::File::open(&path)?;
        Ok(ScoreMatrix::from_jsonl(BufReader::new(file), themes, policy).with_context(|| format!("reading {relative}"))?)
    }

    pub fn write_scores(&self, relative: &str, matrix: &ScoreMatrix, themes: &ThemeSet) -> anyhow::Result<()> {
        let mut bytes = Vec::new();
        matrix.write_jsonl(&mut bytes, themes)?;
        self.write_text(relative, std::str::from_utf8(&bytes)?)
    }

    pub fn predictions(&self, relative: &str) -> anyhow::Result<PredictionSet> {
        self.read(relative)
    }

    /// Files whose digests are registered before reveal.
    pub fn registrable_artifacts(&self) -> anyhow::Result<Vec<String>> {
        let mut out = Vec::new();
        let dir = self.path("predictions");
        if dir.exists() {
            let mut names: Vec<String> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".json"))
                .collect();
            names.sort();
            out.extend(names.into_iter().map(|n| format!("predictions/{n}")));
        }
        for scores in [MACHINE_SCORES, HUMAN_SCORES] {
            if self.exists(scores) {
                out.push(scores.to_string());
            }
        }
        Ok(out)
    }

    pub fn artifact_digest(&self, relative: &str) -> anyhow::Result<String> {
        let bytes = fs::read(self.path(relative)).with_context(|| format!("reading {relative}"))?;
        Ok(causal_themes::canonical::sha256_hex(&bytes))
    }
}
