//! Causal themes, their scales, and per-document theme scores.
//!
//! A [`Theme`] is a named aspect of a text with a finite scale. Scales are
//! either all integers (ordinal, e.g. `0..=3` or `-1..=1`) or all categorical
//! tokens (e.g. `Sonnet`, `Haiku`, `neither`). Themes are exchanged as a JSON
//! array of `{theme_id, theme_name, theme_description, theme_scale}` objects;
//! scores as compact lines like `CEI1,MET2,GSE-1,POEHaiku`, where each element
//! is a 3-letter theme id immediately followed by a scale point.
//!
//! For estimation, a [`ScoreMatrix`] is turned into a [`NumericScoreView`]:
//! integer scales map to their value, categorical scales expand into one 0/1
//! column per scale point.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;

/// Most themes a set may hold, at proposal time or after editing.
pub const MAX_THEMES: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum ThemeError {
    #[error("malformed theme JSON: {0}")]
    Malformed(String),
    #[error("theme set is empty")]
    Empty,
    #[error("{0} themes exceed the limit of {MAX_THEMES}")]
    TooMany(usize),
    #[error("invalid theme_id `{0}` (expected three uppercase letters)")]
    InvalidId(String),
    #[error("duplicate theme_id `{0}`")]
    DuplicateId(String),
    #[error("theme `{0}` has an empty scale")]
    EmptyScale(String),
    #[error("theme `{0}` mixes integer and categorical scale points")]
    MixedScale(String),
    #[error("theme `{theme_id}` has an invalid scale point `{point}`")]
    InvalidScalePoint { theme_id: String, point: String },
    #[error("theme set is frozen")]
    Frozen,
    #[error("theme set is already frozen")]
    AlreadyFrozen,
    #[error("theme commitment mismatch: stored {stored}, computed {computed}")]
    CommitmentMismatch { stored: String, computed: String },
    #[error("frozen theme set has no commitment")]
    MissingCommitment,
    #[error("malformed score token `{0}`")]
    MalformedToken(String),
    #[error("unknown theme_id `{0}`")]
    UnknownTheme(String),
    #[error("score `{value}` is not on the scale of theme `{theme_id}`")]
    OutOfScale { theme_id: String, value: String },
    #[error("theme `{0}` scored twice")]
    DuplicateScore(String),
    #[error("missing scores for themes {0:?}")]
    MissingThemes(Vec<String>),
    #[error("no scores for documents {0:?}")]
    IncompleteMatrix(Vec<String>),
    #[error("score record line {line}: {message}")]
    Record { line: usize, message: String },
}

/// One point on a theme's scale.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalePoint {
    Int(i64),
    Category(String),
}

impl fmt::Display for ScalePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalePoint::Int(v) => write!(f, "{v}"),
            ScalePoint::Category(c) => f.write_str(c),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theme {
    pub theme_id: String,
    pub theme_name: String,
    pub theme_description: String,
    pub theme_scale: Vec<ScalePoint>,
}

impl Theme {
    pub fn is_categorical(&self) -> bool {
        matches!(self.theme_scale.first(), Some(ScalePoint::Category(_)))
    }

    fn validate(&self) -> Result<(), ThemeError> {
        let id = &self.theme_id;
        if id.len() != 3 || !id.bytes().all(|b| b.is_ascii_uppercase()) {
            return Err(ThemeError::InvalidId(id.clone()));
        }
        if self.theme_scale.is_empty() {
            return Err(ThemeError::EmptyScale(id.clone()));
        }
        let categorical = self.is_categorical();
        let mut seen = BTreeSet::new();
        for point in &self.theme_scale {
            if matches!(point, ScalePoint::Category(_)) != categorical {
                return Err(ThemeError::MixedScale(id.clone()));
            }
            let bad = match point {
                ScalePoint::Category(c) => c.trim().is_empty() || c.trim() != c || c.contains(','),
                ScalePoint::Int(_) => false,
            };
            if bad || !seen.insert(point) {
                return Err(ThemeError::InvalidScalePoint {
                    theme_id: id.clone(),
                    point: point.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Parses the part of a score token after the theme id.
    ///
    /// Integer scales accept an optionally signed integer. Categorical scales
    /// take the longest scale token the text matches exactly, falling back to a
    /// case-insensitive match.
    pub fn parse_point(&self, text: &str) -> Result<ScalePoint, ThemeError> {
        let text = text.trim();
        let out_of_scale = || ThemeError::OutOfScale {
            theme_id: self.theme_id.clone(),
            value: text.to_string(),
        };
        let point = if self.is_categorical() {
            let mut matches: Vec<&String> = self
                .theme_scale
                .iter()
                .filter_map(|p| match p {
                    ScalePoint::Category(c) if c == text || c.eq_ignore_ascii_case(text) => Some(c),
                    _ => None,
                })
                .collect();
            matches.sort_by_key(|c| (c.as_str() != text, std::cmp::Reverse(c.len())));
            ScalePoint::Category(matches.first().ok_or_else(out_of_scale)?.to_string())
        } else {
            let digits = text.strip_prefix('+').unwrap_or(text);
            ScalePoint::Int(digits.parse::<i64>().map_err(|_| out_of_scale())?)
        };
        if self.theme_scale.contains(&point) {
            Ok(point)
        } else {
            Err(out_of_scale())
        }
    }

    /// Numeric columns this theme contributes.
    pub fn column_count(&self) -> usize {
        if self.is_categorical() {
            self.theme_scale.len()
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThemeProvenance {
    LlmProposed,
    HumanEdited,
}

#[derive(Deserialize)]
struct RawThemeSet {
    themes: Vec<Theme>,
    provenance: ThemeProvenance,
    #[serde(default)]
    frozen: bool,
    #[serde(default)]
    commitment: Option<String>,
}

/// An ordered, validated set of themes.
///
/// Once frozen, a set carries the digest of its canonical theme array and can
/// no longer be edited.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawThemeSet")]
pub struct ThemeSet {
    themes: Vec<Theme>,
    provenance: ThemeProvenance,
    frozen: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    commitment: Option<String>,
}

impl TryFrom<RawThemeSet> for ThemeSet {
    type Error = ThemeError;

    fn try_from(raw: RawThemeSet) -> Result<Self, Self::Error> {
        let set = ThemeSet::new(raw.themes, raw.provenance)?;
        match (raw.frozen, raw.commitment) {
            (false, _) => Ok(set),
            (true, None) => Err(ThemeError::MissingCommitment),
            (true, Some(stored)) => {
                let frozen = ThemeSet {
                    frozen: true,
                    commitment: Some(stored),
                    ..set
                };
                frozen.verify_commitment()?;
                Ok(frozen)
            }
        }
    }
}

impl ThemeSet {
    pub fn new(themes: Vec<Theme>, provenance: ThemeProvenance) -> Result<Self, ThemeError> {
        if themes.is_empty() {
            return Err(ThemeError::Empty);
        }
        if themes.len() > MAX_THEMES {
            return Err(ThemeError::TooMany(themes.len()));
        }
        let mut ids = BTreeSet::new();
        for theme in &themes {
            theme.validate()?;
            if !ids.insert(theme.theme_id.as_str()) {
                return Err(ThemeError::DuplicateId(theme.theme_id.clone()));
            }
        }
        Ok(ThemeSet {
            themes,
            provenance,
            frozen: false,
            commitment: None,
        })
    }

    pub fn themes(&self) -> &[Theme] {
        &self.themes
    }

    pub fn len(&self) -> usize {
        self.themes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.themes.is_empty()
    }

    pub fn get(&self, theme_id: &str) -> Option<&Theme> {
        self.themes.iter().find(|t| t.theme_id == theme_id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.themes.iter().map(|t| t.theme_id.as_str()).collect()
    }

    pub fn provenance(&self) -> ThemeProvenance {
        self.provenance
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn commitment(&self) -> Option<&str> {
        self.commitment.as_deref()
    }

    /// Digest of the canonical theme array.
    pub fn content_digest(&self) -> String {
        canonical::digest(&self.themes).expect("themes always serialize")
    }

    /// The theme array in the exchange schema, pretty-printed.
    pub fn to_theme_json(&self) -> String {
        serde_json::to_string_pretty(&self.themes).expect("themes always serialize")
    }

    pub fn to_canonical_json(&self) -> String {
        canonical::to_canonical_json(self).expect("theme sets always serialize")
    }

    /// Freezes the set, recording the commitment.
    pub fn freeze(&self) -> Result<ThemeSet, ThemeError> {
        if self.frozen {
            return Err(ThemeError::AlreadyFrozen);
        }
        Ok(ThemeSet {
            frozen: true,
            commitment: Some(self.content_digest()),
            ..self.clone()
        })
    }

    /// Checks a frozen set against its stored commitment.
    pub fn verify_commitment(&self) -> Result<(), ThemeError> {
        let stored = self.commitment.as_ref().ok_or(ThemeError::MissingCommitment)?;
        let computed = self.content_digest();
        if *stored != computed {
            return Err(ThemeError::CommitmentMismatch {
                stored: stored.clone(),
                computed,
            });
        }
        Ok(())
    }

    /// Applies analyst edits, producing a human-edited set.
    pub fn edit(&self, edits: &[ThemeEdit]) -> Result<ThemeSet, ThemeError> {
        if self.frozen {
            return Err(ThemeError::Frozen);
        }
        let mut themes = self.themes.clone();
        for edit in edits {
            match edit {
                ThemeEdit::Drop { theme_id } => {
                    let before = themes.len();
                    themes.retain(|t| &t.theme_id != theme_id);
                    if themes.len() == before {
                        return Err(ThemeError::UnknownTheme(theme_id.clone()));
                    }
                }
                ThemeEdit::Modify {
                    theme_id,
                    theme_name,
                    theme_description,
                    theme_scale,
                } => {
                    let theme = themes
                        .iter_mut()
                        .find(|t| &t.theme_id == theme_id)
                        .ok_or_else(|| ThemeError::UnknownTheme(theme_id.clone()))?;
                    if let Some(name) = theme_name {
                        theme.theme_name = name.clone();
                    }
                    if let Some(description) = theme_description {
                        theme.theme_description = description.clone();
                    }
                    if let Some(scale) = theme_scale {
                        theme.theme_scale = scale.clone();
                    }
                }
                ThemeEdit::Add { theme } => themes.push(theme.clone()),
            }
        }
        ThemeSet::new(themes, ThemeProvenance::HumanEdited)
    }

    /// Parses a score line and checks that every theme is scored.
    pub fn parse_score_line(&self, line: &str) -> Result<BTreeMap<String, ScalePoint>, ThemeError> {
        parse_score_line(line, self)
    }

    /// Formats scores as a compact score line in theme order.
    pub fn format_score_line(&self, scores: &BTreeMap<String, ScalePoint>) -> String {
        self.themes
            .iter()
            .filter_map(|t| scores.get(&t.theme_id).map(|p| format!("{}{}", t.theme_id, p)))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Checks a full score assignment against the scales.
    pub fn validate_scores(&self, scores: &BTreeMap<String, ScalePoint>) -> Result<(), ThemeError> {
        for (theme_id, point) in scores {
            let theme = self
                .get(theme_id)
                .ok_or_else(|| ThemeError::UnknownTheme(theme_id.clone()))?;
            if !theme.theme_scale.contains(point) {
                return Err(ThemeError::OutOfScale {
                    theme_id: theme_id.clone(),
                    value: point.to_string(),
                });
            }
        }
        let missing: Vec<String> = self
            .themes
            .iter()
            .filter(|t| !scores.contains_key(&t.theme_id))
            .map(|t| t.theme_id.clone())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ThemeError::MissingThemes(missing))
        }
    }
}

/// One analyst edit to a proposed theme set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ThemeEdit {
    Drop {
        theme_id: String,
    },
    Modify {
        theme_id: String,
        #[serde(default)]
        theme_name: Option<String>,
        #[serde(default)]
        theme_description: Option<String>,
        #[serde(default)]
        theme_scale: Option<Vec<ScalePoint>>,
    },
    Add {
        theme: Theme,
    },
}

/// Byte range of the first JSON array of objects in `text`.
///
/// Skips over code fences and prose; brackets inside strings are ignored.
pub fn find_json_array(text: &str) -> Option<Range<usize>> {
    let bytes = text.as_bytes();
    let mut search_from = 0;
    while let Some(offset) = text[search_from..].find('[') {
        let start = search_from + offset;
        let next = text[start + 1..].trim_start().chars().next();
        if matches!(next, Some('{') | Some(',')) {
            if let Some(end) = matching_bracket(bytes, start) {
                return Some(start..end + 1);
            }
        }
        search_from = start + 1;
    }
    None
}

fn matching_bracket(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'[' | b'{' => depth += 1,
            b']' | b'}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Drops stray commas that leave empty elements (`[a, , b]`, `[, a]`, `[a,]`).
fn drop_stray_commas(json: &str) -> String {
    let mut out = String::with_capacity(json.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut last_significant: Option<char> = None;
    let chars: Vec<char> = json.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => {
                    in_string = false;
                    last_significant = Some('"');
                }
                _ => {}
            }
            continue;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            let after_open = matches!(last_significant, Some(',') | Some('[') | Some('{') | None);
            let before_close = matches!(next, Some(']') | Some('}') | Some(','));
            if after_open || before_close {
                continue;
            }
        }
        if c == '"' {
            in_string = true;
        }
        if !c.is_whitespace() {
            last_significant = Some(c);
        }
        out.push(c);
    }
    out
}

/// Parses the theme block of an LLM response (or a bare theme array).
///
/// Surrounding prose and code fences are ignored, as are unknown fields and
/// stray commas between array elements.
pub fn parse_theme_json(text: &str) -> Result<ThemeSet, ThemeError> {
    let range = find_json_array(text)
        .ok_or_else(|| ThemeError::Malformed("no JSON array of theme objects found".into()))?;
    parse_theme_array(&text[range])
}

fn parse_theme_array(array: &str) -> Result<ThemeSet, ThemeError> {
    let cleaned = drop_stray_commas(array);
    let themes: Vec<Theme> =
        serde_json::from_str(&cleaned).map_err(|e| ThemeError::Malformed(e.to_string()))?;
    ThemeSet::new(themes, ThemeProvenance::LlmProposed)
}

/// Parses a score line such as `TEC1,APL0,GSE-1,POEHaiku`.
///
/// Every theme in the set must appear exactly once.
pub fn parse_score_line(line: &str, themes: &ThemeSet) -> Result<BTreeMap<String, ScalePoint>, ThemeError> {
    let mut scores = BTreeMap::new();
    for token in line.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if token.len() < 4 || !token.is_char_boundary(3) {
            return Err(ThemeError::MalformedToken(token.to_string()));
        }
        let (id, rest) = token.split_at(3);
        let theme = themes
            .get(id)
            .ok_or_else(|| ThemeError::UnknownTheme(id.to_string()))?;
        let point = theme.parse_point(rest)?;
        if scores.insert(id.to_string(), point).is_some() {
            return Err(ThemeError::DuplicateScore(id.to_string()));
        }
    }
    let missing: Vec<String> = themes
        .themes()
        .iter()
        .filter(|t| !scores.contains_key(&t.theme_id))
        .map(|t| t.theme_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ThemeError::MissingThemes(missing));
    }
    Ok(scores)
}

/// Extracts `(id, score line)` pairs from a score block.
///
/// Accepts lines like `ID1: TEC1,APL0`, `{ ID1: TEC1,APL0 },` and
/// `"ID1": "TEC1,APL0",`. Lines without a `key: value` shape are skipped;
/// validating the score text is left to [`parse_score_line`].
pub fn extract_score_entries(block: &str) -> Vec<(String, String)> {
    let strip = |s: &str| {
        s.trim()
            .trim_matches(|c: char| c == '{' || c == '}' || c == ',' || c.is_whitespace())
            .trim_matches('"')
            .trim()
            .to_string()
    };
    block
        .lines()
        .filter_map(|line| {
            let line = strip(line);
            let (id, rest) = line.split_once(':')?;
            let id = strip(id);
            let rest = strip(rest);
            let looks_like_scores = rest.len() >= 4
                && rest.is_char_boundary(3)
                && rest[..3].bytes().all(|b| b.is_ascii_uppercase());
            if id.is_empty() || id.contains(char::is_whitespace) || !looks_like_scores {
                return None;
            }
            Some((id, rest))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreProvenance {
    Human,
    Machine,
}

/// One line of a score file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub document_id: String,
    pub scores: String,
    pub provenance: ScoreProvenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
}

/// How to reduce several annotators' scores of one document to one.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorPolicy {
    /// Scores of the annotator who appears first in the file.
    #[default]
    FirstRegistered,
    /// Only this annotator's scores.
    Only(String),
}

/// Theme scores per document, from a single provenance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    provenance: ScoreProvenance,
    scores: BTreeMap<String, BTreeMap<String, ScalePoint>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    annotators: BTreeMap<String, String>,
}

impl ScoreMatrix {
    pub fn new(provenance: ScoreProvenance) -> Self {
        ScoreMatrix {
            provenance,
            scores: BTreeMap::new(),
            annotators: BTreeMap::new(),
        }
    }

    pub fn provenance(&self) -> ScoreProvenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, document_id: &str) -> Option<&BTreeMap<String, ScalePoint>> {
        self.scores.get(document_id)
    }

    pub fn annotator(&self, document_id: &str) -> Option<&str> {
        self.annotators.get(document_id).map(String::as_str)
    }

    pub fn document_ids(&self) -> impl Iterator<Item = &String> {
        self.scores.keys()
    }

    /// Validates and stores scores, replacing any previous entry.
    pub fn insert(
        &mut self,
        document_id: &str,
        scores: BTreeMap<String, ScalePoint>,
        annotator_id: Option<&str>,
        themes: &ThemeSet,
    ) -> Result<(), ThemeError> {
        themes.validate_scores(&scores)?;
        self.scores.insert(document_id.to_string(), scores);
        match annotator_id {
            Some(a) => self.annotators.insert(document_id.to_string(), a.to_string()),
            None => self.annotators.remove(document_id),
        };
        Ok(())
    }

    /// Stores scores unless the document is already scored; returns whether
    /// they were stored.
    pub fn insert_first(
        &mut self,
        document_id: &str,
        scores: BTreeMap<String, ScalePoint>,
        annotator_id: Option<&str>,
        themes: &ThemeSet,
    ) -> Result<bool, ThemeError> {
        if self.scores.contains_key(document_id) {
            return Ok(false);
        }
        self.insert(document_id, scores, annotator_id, themes)?;
        Ok(true)
    }

    /// Restricts the matrix to `ids`.
    pub fn restricted_to<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> ScoreMatrix {
        let mut out = ScoreMatrix::new(self.provenance);
        for id in ids {
            if let Some(s) = self.scores.get(id) {
                out.scores.insert(id.clone(), s.clone());
                if let Some(a) = self.annotators.get(id) {
                    out.annotators.insert(id.clone(), a.clone());
                }
            }
        }
        out
    }

    pub fn records(&self, themes: &ThemeSet) -> Vec<ScoreRecord> {
        self.scores
            .iter()
            .map(|(id, scores)| ScoreRecord {
                document_id: id.clone(),
                scores: themes.format_score_line(scores),
                provenance: self.provenance,
                annotator_id: self.annotators.get(id).cloned(),
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W, themes: &ThemeSet) -> std::io::Result<()> {
        for record in self.records(themes) {
            serde_json::to_writer(&mut writer, &record)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Builds a matrix from score records of one provenance.
    pub fn from_records(
        records: &[ScoreRecord],
        themes: &ThemeSet,
        policy: &AnnotatorPolicy,
    ) -> Result<ScoreMatrix, ThemeError> {
        let provenance = records.first().map_or(ScoreProvenance::Human, |r| r.provenance);
        let mut registration: Vec<Option<&str>> = Vec::new();
        for r in records {
            if r.provenance != provenance {
                return Err(ThemeError::Record {
                    line: 0,
                    message: "mixed provenances in one score file".into(),
                });
            }
            let a = r.annotator_id.as_deref();
            if !registration.contains(&a) {
                registration.push(a);
            }
        }
        let rank = |a: Option<&str>| registration.iter().position(|x| *x == a).unwrap_or(usize::MAX);
        let mut best: BTreeMap<&str, &ScoreRecord> = BTreeMap::new();
        for r in records {
            if let AnnotatorPolicy::Only(only) = policy {
                if r.annotator_id.as_deref() != Some(only.as_str()) {
                    continue;
                }
            }
            match best.get(r.document_id.as_str()) {
                Some(prev) if rank(prev.annotator_id.as_deref()) <= rank(r.annotator_id.as_deref()) => {
                    if prev.annotator_id == r.annotator_id {
                        // same annotator again: later record supersedes
                        best.insert(&r.document_id, r);
                    }
                }
                _ => {
                    best.insert(&r.document_id, r);
                }
            }
        }
        let mut matrix = ScoreMatrix::new(provenance);
        for (id, r) in best {
            let scores = parse_score_line(&r.scores, themes)?;
            matrix.insert(id, scores, r.annotator_id.as_deref(), themes)?;
        }
        Ok(matrix)
    }

    pub fn from_jsonl<R: BufRead>(
        reader: R,
        themes: &ThemeSet,
        policy: &AnnotatorPolicy,
    ) -> Result<ScoreMatrix, ThemeError> {
        let records = read_score_records(reader)?;
        ScoreMatrix::from_records(&records, themes, policy)
    }

    /// Mean numeric score per column over `ids`.
    pub fn column_means(&self, themes: &ThemeSet, ids: &[String]) -> Result<Vec<f64>, ThemeError> {
        let view = numeric_view(self, themes, ids)?;
        Ok((0..view.n_cols()).map(|j| mean(&view.column(j))).collect())
    }
}

pub fn read_score_records<R: BufRead>(reader: R) -> Result<Vec<ScoreRecord>, ThemeError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ThemeError::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ThemeError::Record {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// A numeric column of the score view.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub theme_id: String,
    /// Scale point of a one-hot column; `None` for an ordinal theme.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
}

impl Column {
    /// `CEI` for ordinal themes, `POE=Haiku` for one-hot columns.
    pub fn label(&self) -> String {
        match &self.level {
            Some(level) => format!("{}={}", self.theme_id, level),
            None => self.theme_id.clone(),
        }
    }
}

/// Documents × numeric columns.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericScoreView {
    document_ids: Vec<String>,
    columns: Vec<Column>,
    column_map: BTreeMap<String, Range<usize>>,
    rows: Vec<Vec<f64>>,
}

impl NumericScoreView {
    /// Builds a view directly from numeric rows, one ordinal column per label.
    pub fn from_rows(document_ids: Vec<String>, column_ids: &[&str], rows: Vec<Vec<f64>>) -> Self {
        assert_eq!(document_ids.len(), rows.len());
        assert!(rows.iter().all(|r| r.len() == column_ids.len()));
        let columns = column_ids
            .iter()
            .map(|id| Column {
                theme_id: id.to_string(),
                level: None,
            })
            .collect();
        let column_map = column_ids
            .iter()
            .enumerate()
            .map(|(j, id)| (id.to_string(), j..j + 1))
            .collect();
        NumericScoreView {
            document_ids,
            columns,
            column_map,
            rows,
        }
    }

    pub fn document_ids(&self) -> &[String] {
        &self.document_ids
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    /// Column indices belonging to a theme.
    pub fn column_range(&self, theme_id: &str) -> Option<Range<usize>> {
        self.column_map.get(theme_id).cloned()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Row index of a document.
    pub fn position(&self, document_id: &str) -> Option<usize> {
        self.document_ids.iter().position(|d| d == document_id)
    }

    /// The view restricted to `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<NumericScoreView, ThemeError> {
        let index: BTreeMap<&str, usize> = self
            .document_ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.as_str(), i))
            .collect();
        let missing: Vec<String> = ids.iter().filter(|id| !index.contains_key(id.as_str())).cloned().collect();
        if !missing.is_empty() {
            return Err(ThemeError::IncompleteMatrix(missing));
        }
        Ok(NumericScoreView {
            document_ids: ids.to_vec(),
            columns: self.columns.clone(),
            column_map: self.column_map.clone(),
            rows: ids.iter().map(|id| self.rows[index[id.as_str()]].clone()).collect(),
        })
    }
}

/// Converts scores of `ids` to numbers: ordinal themes by identity,
/// categorical themes one-hot.
pub fn numeric_view(
    matrix: &ScoreMatrix,
    themes: &ThemeSet,
    ids: &[String],
) -> Result<NumericScoreView, ThemeError> {
    let missing: Vec<String> = ids.iter().filter(|id| matrix.get(id).is_none()).cloned().collect();
    if !missing.is_empty() {
        return Err(ThemeError::IncompleteMatrix(missing));
    }
    let mut columns = Vec::new();
    let mut column_map = BTreeMap::new();
    for theme in themes.themes() {
        let start = columns.len();
        if theme.is_categorical() {
            for point in &theme.theme_scale {
                columns.push(Column {
                    theme_id: theme.theme_id.clone(),
                    level: Some(point.to_string()),
                });
            }
        } else {
            columns.push(Column {
                theme_id: theme.theme_id.clone(),
                level: None,
            });
        }
        column_map.insert(theme.theme_id.clone(), start..columns.len());
    }
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let scores = matrix.get(id).expect("checked above");
        let mut row = Vec::with_capacity(columns.len());
        for theme in themes.themes() {
            let point = scores
                .get(&theme.theme_id)
                .ok_or_else(|| ThemeError::MissingThemes(vec![theme.theme_id.clone()]))?;
            match point {
                ScalePoint::Int(v) => row.push(*v as f64),
                ScalePoint::Category(_) => {
                    row.extend(theme.theme_scale.iter().map(|p| if p == point { 1.0 } else { 0.0 }));
                }
            }
        }
        rows.push(row);
    }
    Ok(NumericScoreView {
        document_ids: ids.to_vec(),
        columns,
        column_map,
        rows,
    })
}
