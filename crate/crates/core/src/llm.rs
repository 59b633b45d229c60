//! LLM driver for reverse classification, difference summaries, theme
//! proposals and machine scoring.
//!
//! Two independent conversations are used. Reverse classification runs in
//! its own conversation: a training turn with labeled documents, then a
//! testing turn with unlabeled hold-out documents. Describing differences
//! runs summary, theme proposal and hold-out scoring successively in a second
//! conversation, which callers persist between steps.
//!
//! Documents go into prompts as JSON arrays under random, non-informative
//! ids ([`IdMask`]). Every request is identified by the digest of its
//! canonical `{model, temperature, messages}` form; [`RecordingBackend`]
//! appends each exchange to a transcript before the response is parsed, and
//! [`ReplayBackend`] answers from a transcript without network access.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::canonical;
use crate::corpus::{Document, GroupLabel, HoldoutDocument};
use crate::firewall::{Firewall, FirewallError, LeakageGuard};
use crate::losses::{PredictionSet, PredictionSource};
use crate::rng;
use crate::themes::{
    extract_score_entries, find_json_array, parse_score_line, parse_theme_json, ScoreMatrix, ScoreProvenance,
    ThemeError, ThemeSet,
};

pub const PROMPT_REVERSE_TRAINING: &str = include_str!("prompts/reverse_training.txt");
pub const PROMPT_REVERSE_TESTING: &str = include_str!("prompts/reverse_testing.txt");
pub const PROMPT_SUMMARY: &str = include_str!("prompts/summary.txt");
pub const PROMPT_THEMES: &str = include_str!("prompts/themes.txt");
pub const PROMPT_SCORE: &str = include_str!("prompts/score.txt");

/// Default context budget in characters, roughly a million tokens.
pub const DEFAULT_CONTEXT_CHARS: usize = 4_000_000;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid LLM configuration: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no recorded response for request {0}")]
    ReplayMiss(String),
    #[error("conversation of {chars} characters exceeds the context budget of {limit}")]
    ContextOverflow { chars: usize, limit: usize },
    #[error("unparseable response: {0}")]
    Unparseable(String),
    #[error("no answer for documents {0:?}")]
    CoverageGap(Vec<String>),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("transcript: {0}")]
    Transcript(String),
    #[error(transparent)]
    Theme(#[from] ThemeError),
    #[error(transparent)]
    Firewall(#[from] FirewallError),
}

type Result<T> = std::result::Result<T, LlmError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    #[default]
    HttpApi,
    Replay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub provider: Provider,
    pub model_name: String,
    pub temperature: f64,
    /// Chat-completions URL of an OpenAI-compatible API.
    pub endpoint: String,
    /// Transport retries per request.
    pub max_retries: u32,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub context_chars: usize,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            provider: Provider::HttpApi,
            model_name: "gemini-1.5-pro-001".into(),
            temperature: 0.0,
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".into(),
            max_retries: 3,
            api_key_env: "LLM_API_KEY".into(),
            context_chars: DEFAULT_CONTEXT_CHARS,
            timeout_secs: 600,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::Config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.model_name.trim().is_empty() {
            return Err(LlmError::Config("model_name is empty".into()));
        }
        if self.context_chars == 0 {
            return Err(LlmError::Config("context_chars must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn hash(&self) -> String {
        canonical::digest(self).expect("requests serialize")
    }

    pub fn chars(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum()
    }
}

/// Anything that answers a chat request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// Backend built from a closure; handy for simulations and tests.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (self.0)(request)
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    max_retries: u32,
}

impl HttpBackend {
    pub fn new(config: &LlmConfig) -> Result<Self> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpBackend {
            client,
            endpoint: config.endpoint.clone(),
            api_key: std::env::var(&config.api_key_env).ok(),
            max_retries: config.max_retries,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let mut attempt = 0;
        loop {
            let mut builder = self.client.post(&self.endpoint).json(request);
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            let outcome = builder.send().map_err(|e| LlmError::Transport(e.to_string())).and_then(|resp| {
                let status = resp.status();
                let body = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
                if !status.is_success() {
                    return Err(LlmError::Http {
                        status: status.as_u16(),
                        body,
                    });
                }
                let value: serde_json::Value =
                    serde_json::from_str(&body).map_err(|e| LlmError::Unparseable(e.to_string()))?;
                value["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| LlmError::Unparseable("response has no choices[0].message.content".into()))
            });
            match outcome {
                Err(LlmError::Transport(_)) | Err(LlmError::Http { status: 429 | 500..=599, .. })
                    if attempt < self.max_retries =>
                {
                    attempt += 1;
                    tracing::warn!(attempt, "retrying LLM request");
                    std::thread::sleep(Duration::from_millis(500 << attempt.min(6)));
                }
                other => return other,
            }
        }
    }
}

/// One recorded exchange.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub request_hash: String,
    pub model: String,
    /// Content of the final user message.
    pub prompt: String,
    pub response: String,
    pub timestamp: String,
}

/// Append-only JSONL transcript, looked up by request hash.
pub struct Transcript {
    path: PathBuf,
    responses: BTreeMap<String, String>,
}

pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";

impl Transcript {
    /// Opens `dir/transcript.jsonl`, creating nothing until the first append.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(TRANSCRIPT_FILE);
        let mut responses = BTreeMap::new();
        if path.exists() {
            let file = fs::File::open(&path).map_err(|e| LlmError::Transcript(e.to_string()))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| LlmError::Transcript(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: TranscriptRecord = serde_json::from_str(&line)
                    .map_err(|e| LlmError::Transcript(format!("line {}: {e}", i + 1)))?;
                responses.entry(record.request_hash).or_insert(record.response);
            }
        }
        Ok(Transcript { path, responses })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn lookup(&self, hash: &str) -> Option<&str> {
        self.responses.get(hash).map(String::as_str)
    }

    pub fn append(&mut self, request: &ChatRequest, response: &str) -> Result<()> {
        let record = TranscriptRecord {
            request_hash: request.hash(),
            model: request.model.clone(),
            prompt: request.messages.last().map(|m| m.content.clone()).unwrap_or_default(),
            response: response.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent).map_err(|e| LlmError::Transcript(e.to_string()))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| LlmError::Transcript(e.to_string()))?;
        let mut line = serde_json::to_string(&record).expect("records serialize");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(|e| LlmError::Transcript(e.to_string()))?;
        self.responses.entry(record.request_hash).or_insert(record.response);
        Ok(())
    }
}

/// Answers only from a recorded transcript.
pub struct ReplayBackend {
    transcript: Transcript,
}

impl ReplayBackend {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(ReplayBackend {
            transcript: Transcript::open(dir)?,
        })
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let hash = request.hash();
        self.transcript
            .lookup(&hash)
            .map(str::to_string)
            .ok_or(LlmError::ReplayMiss(hash))
    }
}

/// Wraps a live backend and records every exchange before returning it.
pub struct RecordingBackend {
    inner: Box<dyn ChatBackend>,
    transcript: Mutex<Transcript>,
}

impl RecordingBackend {
    pub fn new(inner: Box<dyn ChatBackend>, dir: impl AsRef<Path>) -> Result<Self> {
        Ok(RecordingBackend {
            inner,
            transcript: Mutex::new(Transcript::open(dir)?),
        })
    }
}

impl ChatBackend for RecordingBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let response = self.inner.complete(request)?;
        self.transcript
            .lock()
            .expect("transcript lock")
            .append(request, &response)?;
        Ok(response)
    }
}

/// Sends requests after checking their size and, when configured, scanning
/// them for hold-out group information.
pub struct LlmClient {
    config: LlmConfig,
    backend: Box<dyn ChatBackend>,
    guard: Option<(PathBuf, LeakageGuard)>,
}

impl LlmClient {
    pub fn new(config: LlmConfig, backend: Box<dyn ChatBackend>) -> Result<Self> {
        config.validate()?;
        Ok(LlmClient {
            config,
            backend,
            guard: None,
        })
    }

    /// Scans every payload with `guard`; violations are journaled at
    /// `journal` and abort the request.
    pub fn with_guard(mut self, journal: impl Into<PathBuf>, guard: LeakageGuard) -> Self {
        self.guard = Some((journal.into(), guard));
        self
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    /// Registers masked ids of hold-out documents with the guard.
    pub fn register_aliases(&mut self, mask: &IdMask, holdout_ids: &[String]) {
        if let Some((_, guard)) = &mut self.guard {
            for id in holdout_ids {
                if let Some(alias) = mask.alias(id) {
                    guard.register_alias(alias);
                }
            }
        }
    }

    pub fn send(&self, messages: &[ChatMessage]) -> Result<String> {
        let request = ChatRequest {
            model: self.config.model_name.clone(),
            temperature: self.config.temperature,
            messages: messages.to_vec(),
        };
        let chars = request.chars();
        if chars > self.config.context_chars {
            return Err(LlmError::ContextOverflow {
                chars,
                limit: self.config.context_chars,
            });
        }
        if let Some((journal, guard)) = &self.guard {
            let payload = serde_json::to_string(&request).expect("requests serialize");
            Firewall::open(journal)?.check_payload(guard, &payload, "llm request")?;
        }
        self.backend.complete(&request)
    }
}

/// Message history of one conversation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub messages: Vec<ChatMessage>,
}

impl Conversation {
    /// Sends `prompt` with the history so far and records both turns.
    pub fn ask(&mut self, client: &LlmClient, prompt: String) -> Result<String> {
        let mut messages = self.messages.clone();
        messages.push(ChatMessage::user(prompt));
        let answer = client.send(&messages)?;
        messages.push(ChatMessage::assistant(answer.clone()));
        self.messages = messages;
        Ok(answer)
    }
}

/// Random, non-informative document ids (`ID1`, `ID2`, ...).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMask {
    forward: BTreeMap<String, String>,
    backward: BTreeMap<String, String>,
}

impl IdMask {
    pub fn new<'a>(ids: impl IntoIterator<Item = &'a String>, seed: u64) -> Self {
        let mut ids: Vec<&String> = ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        ids.shuffle(&mut rng::seeded(seed));
        let mut mask = IdMask::default();
        for (i, id) in ids.into_iter().enumerate() {
            let alias = format!("ID{}", i + 1);
            mask.forward.insert(id.clone(), alias.clone());
            mask.backward.insert(alias, id.clone());
        }
        mask
    }

    pub fn alias(&self, id: &str) -> Option<&str> {
        self.forward.get(id).map(String::as_str)
    }

    pub fn resolve(&self, alias: &str) -> Option<&str> {
        self.backward.get(alias).map(String::as_str)
    }

    fn number(&self, id: &str) -> usize {
        self.alias(id)
            .and_then(|a| a[2..].parse().ok())
            .unwrap_or(usize::MAX)
    }
}

fn masked(mask: &IdMask, id: &str) -> Result<String> {
    mask.alias(id)
        .map(str::to_string)
        .ok_or_else(|| LlmError::Precondition(format!("document `{id}` has no masked id")))
}

/// Training documents as a prompt JSON array, ordered by masked id.
pub fn training_json(documents: &[Document], mask: &IdMask) -> Result<String> {
    let mut docs: Vec<&Document> = documents.iter().collect();
    docs.sort_by_key(|d| mask.number(&d.document_id));
    let items = docs
        .iter()
        .map(|d| {
            Ok(json!({
                "document_id": masked(mask, &d.document_id)?,
                "group": d.group.letter(),
                "text": d.text,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::to_string_pretty(&items).expect("json values serialize"))
}

/// Hold-out documents as a prompt JSON array, without any group field.
pub fn holdout_json(documents: &[HoldoutDocument], mask: &IdMask) -> Result<String> {
    let mut docs: Vec<&HoldoutDocument> = documents.iter().collect();
    docs.sort_by_key(|d| mask.number(&d.document_id));
    let items = docs
        .iter()
        .map(|d| {
            Ok(json!({
                "document_id": masked(mask, &d.document_id)?,
                "text": d.text,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::to_string_pretty(&items).expect("json values serialize"))
}

fn tokens(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| !(c.is_alphanumeric() || c == '_')).filter(|t| !t.is_empty())
}

/// Parses `ID: group` answers. Each line contributes the first masked id it
/// names and the first standalone `A` or `B` after it (possibly on a later
/// line). Later answers for an id already seen are ignored.
pub fn parse_group_answers(response: &str, mask: &IdMask) -> BTreeMap<String, GroupLabel> {
    let mut out = BTreeMap::new();
    let mut pending: Option<&str> = None;
    for line in response.lines() {
        for token in tokens(line) {
            if let Some(id) = mask.resolve(token) {
                pending = Some(id);
                continue;
            }
            let group = match token {
                "A" => GroupLabel::Treatment,
                "B" => GroupLabel::Control,
                _ => continue,
            };
            if let Some(id) = pending.take() {
                if out.contains_key(id) {
                    tracing::warn!(document_id = id, "duplicate classification ignored");
                } else {
                    out.insert(id.to_string(), group);
                }
            }
        }
    }
    out
}

fn missing_ids<'a, V>(wanted: impl IntoIterator<Item = &'a String>, got: &BTreeMap<String, V>) -> Vec<String> {
    wanted.into_iter().filter(|id| !got.contains_key(*id)).cloned().collect()
}

fn alias_list(mask: &IdMask, ids: &[String]) -> String {
    ids.iter()
        .filter_map(|id| mask.alias(id))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn missing_classification_prompt(aliases: &str) -> String {
    format!(
        "Your answer did not include a predicted group for some documents. Please report only the document ID and predicted group (A or B) for each of these documents: {aliases}"
    )
}

pub fn missing_scores_prompt(aliases: &str) -> String {
    format!(
        "Your answer did not include scores for some documents. Please score only these documents, in the same format as before: {aliases}"
    )
}

pub fn correction_prompt(error: &str) -> String {
    format!("Your answer could not be read ({error}). Please answer again, exactly in the requested format.")
}

/// Reverse classification of the hold-out together with its conversation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReverseClassification {
    pub predictions: PredictionSet,
    pub conversation: Conversation,
    pub mask: IdMask,
}

/// Asks the LLM to learn groups from training documents, then predict the
/// hold-out. One follow-up request covers documents missing from the answer.
pub fn classify_reverse(
    client: &mut LlmClient,
    training: &[Document],
    holdout: &[HoldoutDocument],
    mask_seed: u64,
) -> Result<ReverseClassification> {
    if training.is_empty() || holdout.is_empty() {
        return Err(LlmError::Precondition("training and hold-out documents are required".into()));
    }
    let all_ids = training.iter().map(|d| &d.document_id).chain(holdout.iter().map(|d| &d.document_id));
    let mask = IdMask::new(all_ids, mask_seed);
    let holdout_ids: Vec<String> = holdout.iter().map(|d| d.document_id.clone()).collect();
    client.register_aliases(&mask, &holdout_ids);

    let mut conversation = Conversation::default();
    conversation.ask(client, format!("{}{}", PROMPT_REVERSE_TRAINING, training_json(training, &mask)?))?;
    let answer = conversation.ask(client, format!("{}{}", PROMPT_REVERSE_TESTING, holdout_json(holdout, &mask)?))?;
    let mut predictions = parse_group_answers(&answer, &mask);
    predictions.retain(|id, _| holdout_ids.contains(id));
    let missing = missing_ids(&holdout_ids, &predictions);
    if !missing.is_empty() {
        let again = conversation.ask(client, missing_classification_prompt(&alias_list(&mask, &missing)))?;
        for (id, g) in parse_group_answers(&again, &mask) {
            if missing.contains(&id) {
                predictions.entry(id).or_insert(g);
            }
        }
        let still = missing_ids(&holdout_ids, &predictions);
        if !still.is_empty() {
            return Err(LlmError::CoverageGap(still));
        }
    }
    Ok(ReverseClassification {
        predictions: PredictionSet::new(predictions, PredictionSource::Llm),
        conversation,
        mask,
    })
}

/// State of the describe-differences conversation, persisted between steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DescribeSession {
    pub conversation: Conversation,
    pub mask: IdMask,
    pub summary: Option<String>,
}

/// Starts the describe conversation with the summary prompt.
pub fn summarize_differences(
    client: &LlmClient,
    training: &[Document],
    holdout_ids: &[String],
    mask_seed: u64,
) -> Result<DescribeSession> {
    if training.is_empty() {
        return Err(LlmError::Precondition("the training set is empty".into()));
    }
    let all_ids = training.iter().map(|d| &d.document_id).chain(holdout_ids.iter());
    let mask = IdMask::new(all_ids, mask_seed);
    let mut conversation = Conversation::default();
    let summary = conversation.ask(client, format!("{}{}", PROMPT_SUMMARY, training_json(training, &mask)?))?;
    Ok(DescribeSession {
        conversation,
        mask,
        summary: Some(summary),
    })
}

fn parse_score_answers(
    text: &str,
    themes: &ThemeSet,
    mask: &IdMask,
    wanted: &[String],
    into: &mut ScoreMatrix,
) -> std::result::Result<(), ThemeError> {
    for (alias, line) in extract_score_entries(text) {
        let Some(id) = mask.resolve(&alias) else {
            continue;
        };
        if !wanted.iter().any(|w| w == id) {
            continue;
        }
        let scores = parse_score_line(&line, themes)?;
        if !into.insert_first(id, scores, None, themes)? {
            tracing::warn!(document_id = id, "duplicate scores ignored");
        }
    }
    Ok(())
}

/// Asks with one corrective retry when `parse` fails.
fn ask_parsed<T>(
    conversation: &mut Conversation,
    client: &LlmClient,
    prompt: String,
    mut parse: impl FnMut(&str) -> std::result::Result<T, LlmError>,
) -> Result<T> {
    let answer = conversation.ask(client, prompt)?;
    match parse(&answer) {
        Ok(v) => Ok(v),
        Err(first) => {
            tracing::warn!(error = %first, "response did not parse; asking once more");
            let again = conversation.ask(client, correction_prompt(&first.to_string()))?;
            parse(&again)
        }
    }
}

fn fill_missing_scores(
    session: &mut DescribeSession,
    client: &LlmClient,
    themes: &ThemeSet,
    wanted: &[String],
    matrix: &mut ScoreMatrix,
) -> Result<()> {
    let missing: Vec<String> = wanted.iter().filter(|id| matrix.get(id).is_none()).cloned().collect();
    if missing.is_empty() {
        return Ok(());
    }
    let prompt = missing_scores_prompt(&alias_list(&session.mask, &missing));
    let answer = session.conversation.ask(client, prompt)?;
    parse_score_answers(&answer, themes, &session.mask, &missing, matrix)?;
    let still: Vec<String> = wanted.iter().filter(|id| matrix.get(id).is_none()).cloned().collect();
    if still.is_empty() {
        Ok(())
    } else {
        Err(LlmError::CoverageGap(still))
    }
}

/// Theme proposal, in the conversation started by [`summarize_differences`].
///
/// Returns the proposed themes and the LLM's scores of the training
/// documents.
pub fn propose_themes(
    client: &LlmClient,
    session: &mut DescribeSession,
    training_ids: &[String],
) -> Result<(ThemeSet, ScoreMatrix)> {
    if session.conversation.messages.is_empty() {
        return Err(LlmError::Precondition("summarize the differences first".into()));
    }
    let mask = session.mask.clone();
    let (themes, mut matrix) = ask_parsed(&mut session.conversation, client, PROMPT_THEMES.to_string(), |answer| {
        let themes = parse_theme_json(answer)?;
        let end = find_json_array(answer).map_or(0, |r| r.end);
        let mut matrix = ScoreMatrix::new(ScoreProvenance::Machine);
        parse_score_answers(&answer[end..], &themes, &mask, training_ids, &mut matrix)?;
        Ok((themes, matrix))
    })?;
    fill_missing_scores(session, client, &themes, training_ids, &mut matrix)?;
    Ok((themes, matrix))
}

/// Machine scores for hold-out texts under frozen themes.
///
/// When the themes differ from the ones the LLM proposed, the revised set is
/// stated before the scoring prompt.
pub fn score_documents(
    client: &LlmClient,
    session: &mut DescribeSession,
    holdout: &[HoldoutDocument],
    themes: &ThemeSet,
    revised: bool,
) -> Result<ScoreMatrix> {
    if !themes.is_frozen() {
        return Err(LlmError::Precondition("themes must be frozen before scoring".into()));
    }
    if session.conversation.messages.is_empty() {
        return Err(LlmError::Precondition("the describe conversation has not started".into()));
    }
    let mask = session.mask.clone();
    let wanted: Vec<String> = holdout.iter().map(|d| d.document_id.clone()).collect();
    let mut prompt = String::new();
    if revised {
        prompt.push_str("The themes have been revised. Use exactly these themes and scales from now on:\n");
        prompt.push_str(&themes.to_theme_json());
        prompt.push_str("\n\n");
    }
    prompt.push_str(PROMPT_SCORE);
    prompt.push_str(&holdout_json(holdout, &mask)?);
    let mut matrix = ask_parsed(&mut session.conversation, client, prompt, |answer| {
        let mut matrix = ScoreMatrix::new(ScoreProvenance::Machine);
        parse_score_answers(answer, themes, &mask, &wanted, &mut matrix)?;
        Ok(matrix)
    })?;
    fill_missing_scores(session, client, themes, &wanted, &mut matrix)?;
    Ok(matrix)
}
