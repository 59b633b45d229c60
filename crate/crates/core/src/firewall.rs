//! Sequential access to hold-out data.
//!
//! A project moves through five stages, strictly in order:
//!
//! | stage | unlocks |
//! |---|---|
//! | `TRAIN_ONLY` | training texts and labels |
//! | `THEMES_FROZEN` | nothing new; themes can no longer change |
//! | `HOLDOUT_TEXT_AVAILABLE` | hold-out texts (no labels) for scoring and prediction |
//! | `PREDICTIONS_REGISTERED` | nothing new; prediction and score files are pinned by digest |
//! | `LABELS_REVEALED` | hold-out labels |
//!
//! Every transition, seal and violation is appended to a hash-chained JSONL
//! journal. Hold-out labels are encrypted with ChaCha20-Poly1305 at split
//! time; the key lives in a separate escrow file and the labels can only be
//! read back through [`Firewall::holdout_labels`] once the journal says
//! `LABELS_REVEALED`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical;
use crate::losses::LabelMap;

/// `prev_hash` of the first journal entry.
pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

pub const SEAL_ALGORITHM: &str = "chacha20poly1305";

#[derive(Debug, Error, PartialEq)]
pub enum FirewallError {
    #[error("journal i/o: {0}")]
    Io(String),
    #[error("journal line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("journal chain broken at entry {seq}: {reason}")]
    ChainBroken { seq: u64, reason: String },
    #[error("cannot move from {from} to {to}; stages advance one at a time")]
    SkippedStage { from: PipelineStage, to: PipelineStage },
    #[error("evidence does not fit the transition to {0}")]
    WrongEvidence(PipelineStage),
    #[error("missing evidence: {0}")]
    MissingEvidence(String),
    #[error("hold-out labels are already sealed")]
    DoubleSeal,
    #[error("hold-out labels have not been sealed")]
    NotSealed,
    #[error("access denied: hold-out labels are sealed until LABELS_REVEALED (current stage {0})")]
    AccessDenied(PipelineStage),
    #[error("operation requires stage {required} or later; current stage is {current}")]
    StageTooEarly { required: PipelineStage, current: PipelineStage },
    #[error("operation is only allowed before {limit}; current stage is {current}")]
    StageTooLate { limit: PipelineStage, current: PipelineStage },
    #[error("sealed labels failed integrity check: {0}")]
    Integrity(String),
    #[error("commitment mismatch: expected {expected}, found {found}")]
    CommitmentMismatch { expected: String, found: String },
    #[error("artifact `{artifact}` changed since registration: registered {registered}, now {current}")]
    DigestMismatch { artifact: String, registered: String, current: String },
    #[error("firewall violation in {context}: {detail}")]
    Leakage { context: String, detail: String },
}

impl From<std::io::Error> for FirewallError {
    fn from(e: std::io::Error) -> Self {
        FirewallError::Io(e.to_string())
    }
}

type Result<T> = std::result::Result<T, FirewallError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PipelineStage {
    TrainOnly,
    ThemesFrozen,
    HoldoutTextAvailable,
    PredictionsRegistered,
    LabelsRevealed,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 5] = [
        PipelineStage::TrainOnly,
        PipelineStage::ThemesFrozen,
        PipelineStage::HoldoutTextAvailable,
        PipelineStage::PredictionsRegistered,
        PipelineStage::LabelsRevealed,
    ];

    pub fn next(self) -> Option<PipelineStage> {
        let i = PipelineStage::ALL.iter().position(|s| *s == self)?;
        PipelineStage::ALL.get(i + 1).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineStage::TrainOnly => "TRAIN_ONLY",
            PipelineStage::ThemesFrozen => "THEMES_FROZEN",
            PipelineStage::HoldoutTextAvailable => "HOLDOUT_TEXT_AVAILABLE",
            PipelineStage::PredictionsRegistered => "PREDICTIONS_REGISTERED",
            PipelineStage::LabelsRevealed => "LABELS_REVEALED",
        }
    }
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a transition must present.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    ThemeCommitment { commitment: String },
    /// Commitment of the sealed labels being released alongside the texts.
    SealedLabels { commitment: String },
    /// Digests of prediction and score files, by artifact name.
    Registration { artifacts: BTreeMap<String, String> },
    /// Digests recomputed at reveal time.
    Reveal {
        artifacts: BTreeMap<String, String>,
        theme_commitment: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JournalEvent {
    Sealed { commitment: String, count: usize },
    Advanced { from: PipelineStage, to: PipelineStage, evidence: Evidence },
    Violation { context: String, detail: String },
    Note { message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub timestamp: String,
    pub event: JournalEvent,
    pub prev_hash: String,
    pub hash: String,
}

#[derive(Serialize)]
struct HashedFields<'a> {
    seq: u64,
    timestamp: &'a str,
    event: &'a JournalEvent,
    prev_hash: &'a str,
}

impl JournalEntry {
    fn compute_hash(seq: u64, timestamp: &str, event: &JournalEvent, prev_hash: &str) -> String {
        canonical::digest(&HashedFields {
            seq,
            timestamp,
            event,
            prev_hash,
        })
        .expect("journal entries serialize")
    }

    pub fn expected_hash(&self) -> String {
        Self::compute_hash(self.seq, &self.timestamp, &self.event, &self.prev_hash)
    }
}

/// Checks sequence numbers and hash links of a journal.
pub fn verify_chain(entries: &[JournalEntry]) -> Result<()> {
    let mut prev = GENESIS_HASH.to_string();
    for (i, e) in entries.iter().enumerate() {
        let broken = |reason: String| FirewallError::ChainBroken { seq: e.seq, reason };
        if e.seq != i as u64 {
            return Err(broken(format!("expected sequence number {i}")));
        }
        if e.prev_hash != prev {
            return Err(broken("prev_hash does not match the preceding entry".into()));
        }
        if e.expected_hash() != e.hash {
            return Err(broken("entry hash does not match its contents".into()));
        }
        prev = e.hash.clone();
    }
    Ok(())
}

/// Summary of a verified journal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub entries: usize,
    pub transitions: usize,
    pub violations: usize,
    pub stage: PipelineStage,
    pub head: String,
}

/// Stage state machine backed by an append-only journal file.
#[derive(Debug)]
pub struct Firewall {
    path: PathBuf,
    entries: Vec<JournalEntry>,
    stage: PipelineStage,
    seal_commitment: Option<String>,
    theme_commitment: Option<String>,
    registered: BTreeMap<String, String>,
}

impl Firewall {
    /// Opens (or starts) the journal at `path`, replaying and verifying it.
    ///
    /// A final line cut short by a crash (no trailing newline, not parseable)
    /// is ignored.
    pub fn open(path: impl AsRef<Path>) -> Result<Firewall> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.exists() { read_journal(&path)? } else { Vec::new() };
        verify_chain(&entries)?;
        let mut fw = Firewall {
            path,
            entries: Vec::new(),
            stage: PipelineStage::TrainOnly,
            seal_commitment: None,
            theme_commitment: None,
            registered: BTreeMap::new(),
        };
        for entry in entries {
            fw.apply(&entry.event);
            fw.entries.push(entry);
        }
        Ok(fw)
    }

    /// Verifies a journal file without keeping it open.
    pub fn audit(path: impl AsRef<Path>) -> Result<AuditSummary> {
        let fw = Firewall::open(path)?;
        Ok(fw.summary())
    }

    fn apply(&mut self, event: &JournalEvent) {
        match event {
            JournalEvent::Sealed { commitment, .. } => self.seal_commitment = Some(commitment.clone()),
            JournalEvent::Advanced { to, evidence, .. } => {
                self.stage = *to;
                match evidence {
                    Evidence::ThemeCommitment { commitment } => self.theme_commitment = Some(commitment.clone()),
                    Evidence::Registration { artifacts } => self.registered = artifacts.clone(),
                    _ => {}
                }
            }
            JournalEvent::Violation { .. } | JournalEvent::Note { .. } => {}
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn stage(&self) -> PipelineStage {
        self.stage
    }

    pub fn entries(&self) -> &[JournalEntry] {
        &self.entries
    }

    pub fn theme_commitment(&self) -> Option<&str> {
        self.theme_commitment.as_deref()
    }

    pub fn seal_commitment(&self) -> Option<&str> {
        self.seal_commitment.as_deref()
    }

    /// Artifacts registered before reveal, name → digest.
    pub fn registered_artifacts(&self) -> &BTreeMap<String, String> {
        &self.registered
    }

    pub fn summary(&self) -> AuditSummary {
        AuditSummary {
            entries: self.entries.len(),
            transitions: self
                .entries
                .iter()
                .filter(|e| matches!(e.event, JournalEvent::Advanced { .. }))
                .count(),
            violations: self
                .entries
                .iter()
                .filter(|e| matches!(e.event, JournalEvent::Violation { .. }))
                .count(),
            stage: self.stage,
            head: self.entries.last().map_or_else(|| GENESIS_HASH.to_string(), |e| e.hash.clone()),
        }
    }

    fn append(&mut self, event: JournalEvent) -> Result<()> {
        let seq = self.entries.len() as u64;
        let prev_hash = self.entries.last().map_or_else(|| GENESIS_HASH.to_string(), |e| e.hash.clone());
        let timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        let hash = JournalEntry::compute_hash(seq, &timestamp, &event, &prev_hash);
        let entry = JournalEntry {
            seq,
            timestamp,
            event,
            prev_hash,
            hash,
        };
        if let Some(parent) = self.path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut line = serde_json::to_string(&entry).expect("journal entries serialize");
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        self.apply(&entry.event);
        self.entries.push(entry);
        Ok(())
    }

    /// Fails unless the project has reached `required`.
    pub fn require(&self, required: PipelineStage) -> Result<()> {
        if self.stage < required {
            return Err(FirewallError::StageTooEarly {
                required,
                current: self.stage,
            });
        }
        Ok(())
    }

    /// Fails once the project has reached `limit`.
    pub fn require_before(&self, limit: PipelineStage) -> Result<()> {
        if self.stage >= limit {
            return Err(FirewallError::StageTooLate {
                limit,
                current: self.stage,
            });
        }
        Ok(())
    }

    /// Records the sealing of the hold-out labels.
    pub fn record_seal(&mut self, sealed: &SealedLabels) -> Result<()> {
        self.require_before(PipelineStage::ThemesFrozen)?;
        if self.seal_commitment.is_some() {
            return Err(FirewallError::DoubleSeal);
        }
        self.append(JournalEvent::Sealed {
            commitment: sealed.commitment.clone(),
            count: sealed.count,
        })
    }

    /// Moves to the next stage after checking the evidence.
    pub fn advance(&mut self, to: PipelineStage, evidence: Evidence) -> Result<()> {
        if self.stage.next() != Some(to) {
            return Err(FirewallError::SkippedStage { from: self.stage, to });
        }
        match (to, &evidence) {
            (PipelineStage::ThemesFrozen, Evidence::ThemeCommitment { commitment }) => {
                if commitment.is_empty() {
                    return Err(FirewallError::MissingEvidence("theme commitment".into()));
                }
            }
            (PipelineStage::HoldoutTextAvailable, Evidence::SealedLabels { commitment }) => {
                let sealed = self.seal_commitment.as_ref().ok_or(FirewallError::NotSealed)?;
                if sealed != commitment {
                    return Err(FirewallError::CommitmentMismatch {
                        expected: sealed.clone(),
                        found: commitment.clone(),
                    });
                }
            }
            (PipelineStage::PredictionsRegistered, Evidence::Registration { artifacts }) => {
                if artifacts.is_empty() {
                    return Err(FirewallError::MissingEvidence("registered prediction digests".into()));
                }
            }
            (
                PipelineStage::LabelsRevealed,
                Evidence::Reveal {
                    artifacts,
                    theme_commitment,
                },
            ) => {
                let frozen = self
                    .theme_commitment
                    .as_ref()
                    .ok_or_else(|| FirewallError::MissingEvidence("theme commitment".into()))?;
                if frozen != theme_commitment {
                    return Err(FirewallError::CommitmentMismatch {
                        expected: frozen.clone(),
                        found: theme_commitment.clone(),
                    });
                }
                if self.seal_commitment.is_none() {
                    return Err(FirewallError::NotSealed);
                }
                for (name, registered) in &self.registered {
                    let current = artifacts
                        .get(name)
                        .ok_or_else(|| FirewallError::MissingEvidence(format!("current digest of `{name}`")))?;
                    if current != registered {
                        return Err(FirewallError::DigestMismatch {
                            artifact: name.clone(),
                            registered: registered.clone(),
                            current: current.clone(),
                        });
                    }
                }
            }
            _ => return Err(FirewallError::WrongEvidence(to)),
        }
        self.append(JournalEvent::Advanced {
            from: self.stage,
            to,
            evidence,
        })
    }

    /// Appends a free-form note to the journal.
    pub fn note(&mut self, message: impl Into<String>) -> Result<()> {
        self.append(JournalEvent::Note { message: message.into() })
    }

    /// Reads the hold-out labels. Denied before `LABELS_REVEALED`.
    pub fn holdout_labels(&self, sealed: &SealedLabels, key: &EscrowKey) -> Result<LabelMap> {
        if self.stage != PipelineStage::LabelsRevealed {
            return Err(FirewallError::AccessDenied(self.stage));
        }
        let journal = self.seal_commitment.as_ref().ok_or(FirewallError::NotSealed)?;
        if *journal != sealed.commitment {
            return Err(FirewallError::CommitmentMismatch {
                expected: journal.clone(),
                found: sealed.commitment.clone(),
            });
        }
        unseal(sealed, key)
    }

    /// Scans an outbound payload, journaling and returning any violation.
    pub fn check_payload(&mut self, guard: &LeakageGuard, payload: &str, context: &str) -> Result<()> {
        if self.stage == PipelineStage::LabelsRevealed {
            return Ok(());
        }
        match guard.assert_no_leakage(payload, context) {
            Ok(()) => Ok(()),
            Err(FirewallError::Leakage { context, detail }) => {
                self.append(JournalEvent::Violation {
                    context: context.clone(),
                    detail: detail.clone(),
                })?;
                Err(FirewallError::Leakage { context, detail })
            }
            Err(other) => Err(other),
        }
    }
}

fn read_journal(path: &Path) -> Result<Vec<JournalEntry>> {
    let raw = fs::read_to_string(path)?;
    let ends_clean = raw.is_empty() || raw.ends_with('\n');
    let lines: Vec<&str> = raw.lines().collect();
    let mut entries = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JournalEntry>(line) {
            Ok(e) => entries.push(e),
            Err(_) if i + 1 == lines.len() && !ends_clean => {
                tracing::warn!(line = i + 1, "ignoring truncated final journal line");
            }
            Err(e) => {
                return Err(FirewallError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(entries)
}

/// Encrypted hold-out labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedLabels {
    pub algorithm: String,
    pub count: usize,
    /// Digest of the canonical `{labels, salt}` object.
    pub commitment: String,
    pub nonce: String,
    pub ciphertext: String,
}

/// Key held by the third party until reveal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscrowKey {
    pub algorithm: String,
    pub commitment: String,
    pub key: String,
}

#[derive(Serialize, Deserialize)]
struct SealedPlaintext {
    labels: LabelMap,
    salt: String,
}

/// Encrypts hold-out labels; the salt hides the commitment from guessing.
pub fn seal<R: RngCore + CryptoRng>(labels: &LabelMap, rng: &mut R) -> (SealedLabels, EscrowKey) {
    let mut key = [0u8; 32];
    let mut nonce = [0u8; 12];
    let mut salt = [0u8; 32];
    rng.fill_bytes(&mut key);
    rng.fill_bytes(&mut nonce);
    rng.fill_bytes(&mut salt);
    let plaintext = SealedPlaintext {
        labels: labels.clone(),
        salt: hex::encode(salt),
    };
    let canonical = canonical::to_canonical_json(&plaintext).expect("labels serialize");
    let commitment = canonical::sha256_hex(canonical.as_bytes());
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key));
    let ciphertext = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: canonical.as_bytes(),
                aad: commitment.as_bytes(),
            },
        )
        .expect("encryption of an in-memory buffer");
    (
        SealedLabels {
            algorithm: SEAL_ALGORITHM.into(),
            count: labels.len(),
            commitment: commitment.clone(),
            nonce: hex::encode(nonce),
            ciphertext: hex::encode(ciphertext),
        },
        EscrowKey {
            algorithm: SEAL_ALGORITHM.into(),
            commitment,
            key: hex::encode(key),
        },
    )
}

/// Decrypts and verifies sealed labels. Stage checks are the caller's job;
/// use [`Firewall::holdout_labels`] in pipeline code.
fn unseal(sealed: &SealedLabels, key: &EscrowKey) -> Result<LabelMap> {
    let integrity = |m: &str| FirewallError::Integrity(m.to_string());
    if key.commitment != sealed.commitment {
        return Err(FirewallError::CommitmentMismatch {
            expected: sealed.commitment.clone(),
            found: key.commitment.clone(),
        });
    }
    let key_bytes = hex::decode(&key.key).map_err(|_| integrity("key is not hex"))?;
    let nonce = hex::decode(&sealed.nonce).map_err(|_| integrity("nonce is not hex"))?;
    let ciphertext = hex::decode(&sealed.ciphertext).map_err(|_| integrity("ciphertext is not hex"))?;
    if key_bytes.len() != 32 || nonce.len() != 12 {
        return Err(integrity("key or nonce has the wrong length"));
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key_bytes));
    let plaintext = cipher
        .decrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: &ciphertext,
                aad: sealed.commitment.as_bytes(),
            },
        )
        .map_err(|_| integrity("authentication failed"))?;
    let recomputed = canonical::sha256_hex(&plaintext);
    if recomputed != sealed.commitment {
        return Err(FirewallError::CommitmentMismatch {
            expected: sealed.commitment.clone(),
            found: recomputed,
        });
    }
    let parsed: SealedPlaintext =
        serde_json::from_slice(&plaintext).map_err(|e| integrity(&format!("plaintext: {e}")))?;
    if parsed.labels.len() != sealed.count {
        return Err(integrity("label count differs from the sealed count"));
    }
    Ok(parsed.labels)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> std::io::Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> std::io::Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Keys that mark a group assignment in a JSON object.
pub const GROUP_KEYS: [&str; 8] = [
    "group",
    "group_label",
    "label",
    "w",
    "treatment",
    "assignment",
    "condition",
    "arm",
];

fn is_group_key(key: &str) -> bool {
    let k = key.to_ascii_lowercase();
    GROUP_KEYS.contains(&k.as_str())
}

fn is_group_value(v: &Value) -> bool {
    match v {
        Value::String(s) => {
            let s = s.trim();
            s.eq_ignore_ascii_case("a") || s.eq_ignore_ascii_case("b") || s.eq_ignore_ascii_case("treatment") || s.eq_ignore_ascii_case("control")
        }
        Value::Bool(_) => true,
        Value::Number(n) => matches!(n.as_u64(), Some(0) | Some(1)),
        _ => false,
    }
}

/// Scans outbound payloads for hold-out group information.
///
/// A payload leaks when, anywhere in it (including JSON embedded in string
/// values, such as prompt text):
///
/// * an object carries a group-like key next to a hold-out document id,
///   a masked id registered for a hold-out document, or a hold-out text;
/// * an object maps a hold-out or masked id directly to a group value;
/// * a sealed ciphertext or escrow key appears verbatim;
/// * a withheld text appears anywhere, alone or inside a longer string.
///
/// In strict mode any group-like key is a violation.
#[derive(Clone, Debug, Default)]
pub struct LeakageGuard {
    holdout_ids: BTreeSet<String>,
    text_digests: BTreeSet<String>,
    withheld: Vec<String>,
    withheld_short: BTreeSet<String>,
    markers: Vec<String>,
    strict: bool,
}

/// Shortest withheld text matched as a substring.
pub const MIN_WITHHELD_CHARS: usize = 24;

fn text_digest(text: &str) -> String {
    canonical::sha256_hex(text.trim().as_bytes())
}

impl LeakageGuard {
    pub fn new<'a>(holdout_ids: impl IntoIterator<Item = &'a String>) -> Self {
        LeakageGuard {
            holdout_ids: holdout_ids.into_iter().cloned().collect(),
            ..LeakageGuard::default()
        }
    }

    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn with_texts<'a>(mut self, texts: impl IntoIterator<Item = &'a str>) -> Self {
        self.text_digests.extend(texts.into_iter().map(text_digest));
        self
    }

    /// Texts that may not appear at all. Texts shorter than
    /// [`MIN_WITHHELD_CHARS`] only match a whole string value, so that common
    /// short phrases do not trip the guard.
    pub fn withhold_texts<'a>(mut self, texts: impl IntoIterator<Item = &'a str>) -> Self {
        for t in texts {
            let t = t.trim();
            if t.chars().count() >= MIN_WITHHELD_CHARS {
                self.withheld.push(t.to_string());
            } else if !t.is_empty() {
                self.text_digests.insert(text_digest(t));
                self.withheld_short.insert(text_digest(t));
            }
        }
        self
    }

    /// Registers a masked id standing in for a hold-out document.
    pub fn register_alias(&mut self, alias: &str) {
        self.holdout_ids.insert(alias.to_string());
    }

    /// Registers sealed material that must never leave the process.
    pub fn with_sealed(mut self, sealed: &SealedLabels) -> Self {
        self.markers.push(sealed.ciphertext.clone());
        self
    }

    pub fn with_key(mut self, key: &EscrowKey) -> Self {
        self.markers.push(key.key.clone());
        self
    }

    pub fn assert_no_leakage(&self, payload: &str, context: &str) -> Result<()> {
        let violation = |detail: String| FirewallError::Leakage {
            context: context.to_string(),
            detail,
        };
        for marker in &self.markers {
            if !marker.is_empty() && payload.contains(marker.as_str()) {
                return Err(violation("sealed label material in payload".into()));
            }
        }
        let mut found = None;
        match serde_json::from_str::<Value>(payload) {
            Ok(v) => self.scan_value(&v, &mut found),
            Err(_) => self.scan_value(&Value::String(payload.to_string()), &mut found),
        }
        match found {
            Some(detail) => Err(violation(detail)),
            None => Ok(()),
        }
    }

    fn is_holdout_ref(&self, v: &Value) -> bool {
        match v {
            Value::String(s) => self.holdout_ids.contains(s.trim()) || self.text_digests.contains(&text_digest(s)),
            Value::Number(n) => self.holdout_ids.contains(&n.to_string()),
            _ => false,
        }
    }

    fn scan_value(&self, v: &Value, found: &mut Option<String>) {
        if found.is_some() {
            return;
        }
        match v {
            Value::Object(map) => {
                let group_keys: Vec<&String> = map.keys().filter(|k| is_group_key(k)).collect();
                if let Some(k) = group_keys.first() {
                    if self.strict {
                        *found = Some(format!("group field `{k}` in payload"));
                        return;
                    }
                    if let Some((_, id)) = map.iter().find(|(key, val)| !is_group_key(key) && self.is_holdout_ref(val)) {
                        *found = Some(format!("group field `{k}` attached to hold-out document {id}"));
                        return;
                    }
                }
                for (key, val) in map {
                    if self.holdout_ids.contains(key.trim()) && is_group_value(val) {
                        *found = Some(format!("hold-out document `{key}` mapped to a group"));
                        return;
                    }
                }
                for val in map.values() {
                    self.scan_value(val, found);
                }
            }
            Value::Array(items) => items.iter().for_each(|i| self.scan_value(i, found)),
            Value::String(s) => {
                if self.withholds(s) {
                    *found = Some("withheld hold-out text in payload".into());
                    return;
                }
                self.scan_text(s, found)
            }
            _ => {}
        }
    }

    fn withholds(&self, s: &str) -> bool {
        self.withheld.iter().any(|t| s.contains(t.as_str()))
            || (!self.withheld_short.is_empty() && self.withheld_short.contains(&text_digest(s)))
    }

    /// Looks for JSON values embedded in free text.
    fn scan_text(&self, text: &str, found: &mut Option<String>) {
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() && found.is_none() {
            let b = bytes[i];
            let at_boundary = i == 0 || matches!(bytes[i - 1], b'\n' | b' ' | b':' | b'\t' | b'`' | b'=');
            if (b == b'{' || b == b'[') && at_boundary {
                let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
                if let Some(Ok(v)) = stream.next() {
                    if matches!(v, Value::Object(_) | Value::Array(_)) {
                        self.scan_value(&v, found);
                        i += stream.byte_offset().max(1);
                        continue;
                    }
                }
            }
            i += 1;
        }
    }
}
