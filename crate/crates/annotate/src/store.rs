//! Session bookkeeping and score persistence, independent of HTTP.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use causal_themes::corpus::HoldoutDocument;
use causal_themes::firewall::{Firewall, FirewallError, LeakageGuard, PipelineStage};
use causal_themes::rng;
use causal_themes::themes::{read_score_records, ScalePoint, ScoreProvenance, ScoreRecord, ThemeError};
use causal_themes::{Theme, ThemeSet};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error(transparent)]
    Firewall(#[from] FirewallError),
    #[error(transparent)]
    Theme(#[from] ThemeError),
    #[error("themes are not frozen")]
    NotFrozen,
    #[error("no session for annotator `{0}`; start one with GET /session/{0}")]
    NoSession(String),
    #[error("document `{0}` is not in this session's queue")]
    UnknownDocument(String),
    #[error("invalid annotator id `{0}`")]
    InvalidAnnotator(String),
    #[error("storage: {0}")]
    Storage(String),
}

impl From<std::io::Error> for AnnotateError {
    fn from(e: std::io::Error) -> Self {
        AnnotateError::Storage(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AnnotateError>;

/// Files the service reads and writes.
#[derive(Clone, Debug)]
pub struct StorePaths {
    pub journal: PathBuf,
    /// Human score records, one line per annotator and document.
    pub scores: PathBuf,
    /// Queue seeds per annotator.
    pub sessions: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub seed: u64,
    pub queue: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub annotator_id: String,
    pub seed: u64,
    pub queue: Vec<String>,
    pub progress: Progress,
    pub resumed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextDocument {
    Document {
        document_id: String,
        text: String,
        position: usize,
        themes: Vec<Theme>,
        progress: Progress,
    },
    Complete {
        progress: Progress,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub document_id: String,
    /// Theme id → scale point, as a JSON number or string.
    pub scores: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub document_id: String,
    pub accepted: bool,
    pub replaced: bool,
    pub progress: Progress,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressReport {
    pub total: usize,
    /// Documents scored by at least one annotator.
    pub documents_scored: usize,
    pub annotators: BTreeMap<String, Progress>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThemesView {
    pub commitment: String,
    pub themes: Vec<Theme>,
}

/// Blinded hold-out texts, frozen themes and everything annotators submit.
pub struct Store {
    themes: ThemeSet,
    documents: BTreeMap<String, String>,
    universe: Vec<String>,
    base_seed: u64,
    paths: StorePaths,
    sessions: BTreeMap<String, SessionState>,
    records: Vec<ScoreRecord>,
    guard: LeakageGuard,
}

fn valid_annotator(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    fs::rename(tmp, path)
}

fn point_text(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Store {
    /// Loads existing sessions and scores from `paths`.
    pub fn open(documents: Vec<HoldoutDocument>, themes: ThemeSet, base_seed: u64, paths: StorePaths) -> Result<Self> {
        if !themes.is_frozen() {
            return Err(AnnotateError::NotFrozen);
        }
        let mut universe: Vec<String> = documents.iter().map(|d| d.document_id.clone()).collect();
        universe.sort();
        let guard = LeakageGuard::new(universe.iter()).strict();
        let documents = documents.into_iter().map(|d| (d.document_id, d.text)).collect();
        let sessions = if paths.sessions.exists() {
            serde_json::from_reader(BufReader::new(fs::File::open(&paths.sessions)?))
                .map_err(|e| AnnotateError::Storage(e.to_string()))?
        } else {
            BTreeMap::new()
        };
        let records = if paths.scores.exists() {
            read_score_records(BufReader::new(fs::File::open(&paths.scores)?))?
        } else {
            Vec::new()
        };
        Ok(Store {
            themes,
            documents,
            universe,
            base_seed,
            paths,
            sessions,
            records,
            guard,
        })
    }

    pub fn guard(&self) -> &LeakageGuard {
        &self.guard
    }

    pub fn journal(&self) -> &Path {
        &self.paths.journal
    }

    fn firewall(&self) -> Result<Firewall> {
        let fw = Firewall::open(&self.paths.journal)?;
        fw.require(PipelineStage::ThemesFrozen)?;
        Ok(fw)
    }

    fn completed(&self, annotator: &str) -> usize {
        self.records
            .iter()
            .filter(|r| r.annotator_id.as_deref() == Some(annotator))
            .count()
    }

    fn progress(&self, annotator: &str) -> Progress {
        Progress {
            completed: self.completed(annotator),
            total: self.universe.len(),
        }
    }

    fn scored(&self, annotator: &str, document_id: &str) -> Option<usize> {
        self.records
            .iter()
            .position(|r| r.annotator_id.as_deref() == Some(annotator) && r.document_id == document_id)
    }

    /// Starts or resumes a session. An existing session keeps its queue.
    pub fn start_session(&mut self, annotator: &str, seed: Option<u64>) -> Result<SessionView> {
        if !valid_annotator(annotator) {
            return Err(AnnotateError::InvalidAnnotator(annotator.to_string()));
        }
        self.firewall()?;
        let resumed = self.sessions.contains_key(annotator);
        if !resumed {
            let seed = seed.unwrap_or_else(|| rng::derive_seed(self.base_seed, &format!("annotate:{annotator}")));
            let mut queue = self.universe.clone();
            queue.shuffle(&mut rng::seeded(seed));
            self.sessions.insert(annotator.to_string(), SessionState { seed, queue });
            let bytes = serde_json::to_vec_pretty(&self.sessions).expect("sessions serialize");
            write_atomic(&self.paths.sessions, &bytes)?;
        }
        let state = &self.sessions[annotator];
        Ok(SessionView {
            annotator_id: annotator.to_string(),
            seed: state.seed,
            queue: state.queue.clone(),
            progress: self.progress(annotator),
            resumed,
        })
    }

    fn session(&self, annotator: &str) -> Result<&SessionState> {
        self.sessions
            .get(annotator)
            .ok_or_else(|| AnnotateError::NoSession(annotator.to_string()))
    }

    /// First document in the queue this annotator has not scored.
    pub fn next_document(&self, annotator: &str) -> Result<NextDocument> {
        self.firewall()?;
        let state = self.session(annotator)?;
        let progress = self.progress(annotator);
        let next = state
            .queue
            .iter()
            .enumerate()
            .find(|(_, id)| self.scored(annotator, id).is_none());
        Ok(match next {
            Some((position, id)) => NextDocument::Document {
                document_id: id.clone(),
                text: self.documents[id].clone(),
                position,
                themes: self.themes.themes().to_vec(),
                progress,
            },
            None => NextDocument::Complete { progress },
        })
    }

    /// Validates and stores one document's scores. A resubmission replaces
    /// the annotator's earlier record and is noted in the journal.
    pub fn submit(&mut self, annotator: &str, submission: &Submission) -> Result<Ack> {
        let mut fw = self.firewall()?;
        fw.require_before(PipelineStage::PredictionsRegistered)?;
        let state = self.session(annotator)?;
        if !state.queue.contains(&submission.document_id) {
            return Err(AnnotateError::UnknownDocument(submission.document_id.clone()));
        }
        let mut scores = BTreeMap::new();
        for (theme_id, value) in &submission.scores {
            let theme = self
                .themes
                .get(theme_id)
                .ok_or_else(|| ThemeError::UnknownTheme(theme_id.clone()))?;
            let point: ScalePoint = theme.parse_point(&point_text(value))?;
            scores.insert(theme_id.clone(), point);
        }
        self.themes.validate_scores(&scores)?;
        let record = ScoreRecord {
            document_id: submission.document_id.clone(),
            scores: self.themes.format_score_line(&scores),
            provenance: ScoreProvenance::Human,
            annotator_id: Some(annotator.to_string()),
        };
        let replaced = match self.scored(annotator, &submission.document_id) {
            Some(i) => {
                fw.note(format!(
                    "annotator {annotator} rescored {}: {} -> {}",
                    submission.document_id, self.records[i].scores, record.scores
                ))?;
                self.records[i] = record;
                true
            }
            None => {
                self.records.push(record);
                false
            }
        };
        let mut bytes = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut bytes, r).expect("records serialize");
            bytes.push(b'\n');
        }
        write_atomic(&self.paths.scores, &bytes)?;
        Ok(Ack {
            document_id: submission.document_id.clone(),
            accepted: true,
            replaced,
            progress: self.progress(annotator),
        })
    }

    pub fn progress_report(&self) -> Result<ProgressReport> {
        self.firewall()?;
        let annotators = self
            .sessions
            .keys()
            .map(|a| (a.clone(), self.progress(a)))
            .collect();
        let mut scored: Vec<&str> = self.records.iter().map(|r| r.document_id.as_str()).collect();
        scored.sort_unstable();
        scored.dedup();
        Ok(ProgressReport {
            total: self.universe.len(),
            documents_scored: scored.len(),
            annotators,
        })
    }

    pub fn themes_view(&self) -> Result<ThemesView> {
        self.firewall()?;
        Ok(ThemesView {
            commitment: self.themes.commitment().unwrap_or_default().to_string(),
            themes: self.themes.themes().to_vec(),
        })
    }
}
