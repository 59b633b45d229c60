//! Two-group document collections and their random partitions.
//!
//! A [`Corpus`] holds `n = n1 + n0` documents, each labeled treatment (group
//! "A") or control (group "B"). Analysis conditions on a [`SampleSplit`]: a
//! hold-out of exactly `h1` treated and `h0` control documents drawn uniformly
//! without replacement within each group, with the training sample as its
//! complement. A [`LabeledSubset`] is a further uniform per-group draw from the
//! hold-out, used for the documents that receive human scores.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus is empty")]
    Empty,
    #[error("duplicate document_id `{0}`")]
    DuplicateId(String),
    #[error("document `{0}` has empty text")]
    EmptyText(String),
    #[error("corpus has no documents in group {0}")]
    EmptyGroup(GroupLabel),
    #[error("invalid group `{0}` (expected \"A\" or \"B\")")]
    InvalidGroup(String),
    #[error("{what} = {value} out of bounds (must satisfy {bound})")]
    Bounds {
        what: &'static str,
        value: usize,
        bound: String,
    },
    #[error("split manifest does not match the corpus: {0}")]
    ManifestMismatch(String),
    #[error("unknown document_id `{0}`")]
    UnknownId(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Binary group assignment `W`.
///
/// Group "A" is the treatment group (`W = 1`), group "B" the control group
/// (`W = 0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupLabel {
    #[serde(rename = "A")]
    Treatment,
    #[serde(rename = "B")]
    Control,
}

impl GroupLabel {
    pub const ALL: [GroupLabel; 2] = [GroupLabel::Treatment, GroupLabel::Control];

    /// `1` for treatment, `0` for control.
    pub fn indicator(self) -> u8 {
        match self {
            GroupLabel::Treatment => 1,
            GroupLabel::Control => 0,
        }
    }

    pub fn is_treatment(self) -> bool {
        self == GroupLabel::Treatment
    }

    /// The group letter used in files and prompts.
    pub fn letter(self) -> &'static str {
        match self {
            GroupLabel::Treatment => "A",
            GroupLabel::Control => "B",
        }
    }

    pub fn other(self) -> GroupLabel {
        match self {
            GroupLabel::Treatment => GroupLabel::Control,
            GroupLabel::Control => GroupLabel::Treatment,
        }
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for GroupLabel {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" => Ok(GroupLabel::Treatment),
            "B" => Ok(GroupLabel::Control),
            other => Err(CorpusError::InvalidGroup(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub document_id: String,
    pub text: String,
    pub group: GroupLabel,
}

/// A hold-out document as released to models and annotators: no group field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutDocument {
    pub document_id: String,
    pub text: String,
}

/// A validated two-group document collection.
#[derive(Clone, Debug)]
pub struct Corpus {
    documents: Vec<Document>,
    index: HashMap<String, usize>,
    n_treated: usize,
}

impl Corpus {
    /// Validates and wraps `documents`, preserving their order.
    pub fn new(documents: Vec<Document>) -> Result<Self, CorpusError> {
        if documents.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut index = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if doc.text.trim().is_empty() {
                return Err(CorpusError::EmptyText(doc.document_id.clone()));
            }
            if index.insert(doc.document_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(doc.document_id.clone()));
            }
        }
        let n_treated = documents.iter().filter(|d| d.group.is_treatment()).count();
        if n_treated == 0 {
            return Err(CorpusError::EmptyGroup(GroupLabel::Treatment));
        }
        if n_treated == documents.len() {
            return Err(CorpusError::EmptyGroup(GroupLabel::Control));
        }
        Ok(Corpus {
            documents,
            index,
            n_treated,
        })
    }

    /// Reads a JSONL corpus: one `{document_id, text, group}` object per line.
    /// Blank lines are skipped.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let mut documents = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            documents.push(doc);
        }
        Corpus::new(documents)
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        for doc in &self.documents {
            serde_json::to_writer(&mut writer, doc)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, document_id: &str) -> Option<&Document> {
        self.index.get(document_id).map(|&i| &self.documents[i])
    }

    pub fn n(&self) -> usize {
        self.documents.len()
    }

    pub fn n_treated(&self) -> usize {
        self.n_treated
    }

    pub fn n_control(&self) -> usize {
        self.documents.len() - self.n_treated
    }

    /// Group labels of every document.
    pub fn labels(&self) -> BTreeMap<String, GroupLabel> {
        self.documents
            .iter()
            .map(|d| (d.document_id.clone(), d.group))
            .collect()
    }

    fn ids_in_group(&self, group: GroupLabel) -> Vec<&str> {
        self.documents
            .iter()
            .filter(|d| d.group == group)
            .map(|d| d.document_id.as_str())
            .collect()
    }

    /// Training documents, with labels, in corpus order.
    pub fn training_documents(&self, split: &SampleSplit) -> Vec<Document> {
        self.documents
            .iter()
            .filter(|d| !split.is_holdout(&d.document_id))
            .cloned()
            .collect()
    }

    /// Hold-out documents with the group stripped, in corpus order.
    pub fn holdout_documents(&self, split: &SampleSplit) -> Vec<HoldoutDocument> {
        self.documents
            .iter()
            .filter(|d| split.is_holdout(&d.document_id))
            .map(|d| HoldoutDocument {
                document_id: d.document_id.clone(),
                text: d.text.clone(),
            })
            .collect()
    }
}

/// Loads a corpus from a JSONL file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path)?;
    Corpus::from_jsonl(BufReader::new(file))
}

/// Audit record of a split as persisted to `split.json`.
///
/// Id lists are sorted, so the manifest does not reveal hold-out labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub training_ids: Vec<String>,
    pub holdout_ids: Vec<String>,
}

/// Partition of a corpus into training and hold-out samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSplit {
    seed: u64,
    training_ids: Vec<String>,
    holdout_treated: Vec<String>,
    holdout_control: Vec<String>,
    holdout_set: BTreeSet<String>,
}

impl SampleSplit {
    fn from_parts(
        seed: u64,
        mut training_ids: Vec<String>,
        mut holdout_treated: Vec<String>,
        mut holdout_control: Vec<String>,
    ) -> Self {
        training_ids.sort();
        holdout_treated.sort();
        holdout_control.sort();
        let holdout_set = holdout_treated
            .iter()
            .chain(&holdout_control)
            .cloned()
            .collect();
        SampleSplit {
            seed,
            training_ids,
            holdout_treated,
            holdout_control,
            holdout_set,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sorted training ids (`𝒯`).
    pub fn training_ids(&self) -> &[String] {
        &self.training_ids
    }

    /// Sorted hold-out ids (`ℋ`).
    pub fn holdout_ids(&self) -> Vec<String> {
        self.holdout_set.iter().cloned().collect()
    }

    pub fn holdout_treated(&self) -> &[String] {
        &self.holdout_treated
    }

    pub fn holdout_control(&self) -> &[String] {
        &self.holdout_control
    }

    pub fn is_holdout(&self, document_id: &str) -> bool {
        self.holdout_set.contains(document_id)
    }

    pub fn h(&self) -> usize {
        self.holdout_set.len()
    }

    pub fn h1(&self) -> usize {
        self.holdout_treated.len()
    }

    pub fn h0(&self) -> usize {
        self.holdout_control.len()
    }

    /// Hold-out group labels.
    pub fn holdout_labels(&self) -> BTreeMap<String, GroupLabel> {
        self.holdout_treated
            .iter()
            .map(|id| (id.clone(), GroupLabel::Treatment))
            .chain(
                self.holdout_control
                    .iter()
                    .map(|id| (id.clone(), GroupLabel::Control)),
            )
            .collect()
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            seed: self.seed,
            training_ids: self.training_ids.clone(),
            holdout_ids: self.holdout_ids(),
        }
    }

    /// Rebuilds a split from its manifest, checking it against the corpus.
    pub fn from_manifest(manifest: &SplitManifest, corpus: &Corpus) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for id in manifest.training_ids.iter().chain(&manifest.holdout_ids) {
            if corpus.get(id).is_none() {
                return Err(CorpusError::UnknownId(id.clone()));
            }
            if !seen.insert(id.as_str()) {
                return Err(CorpusError::ManifestMismatch(format!(
                    "`{id}` listed twice"
                )));
            }
        }
        if seen.len() != corpus.n() {
            return Err(CorpusError::ManifestMismatch(format!(
                "manifest covers {} of {} documents",
                seen.len(),
                corpus.n()
            )));
        }
        let (treated, control): (Vec<String>, Vec<String>) = manifest
            .holdout_ids
            .iter()
            .cloned()
            .partition(|id| corpus.get(id).is_some_and(|d| d.group.is_treatment()));
        check_holdout_bounds(treated.len(), control.len(), corpus)?;
        Ok(SampleSplit::from_parts(
            manifest.seed,
            manifest.training_ids.clone(),
            treated,
            control,
        ))
    }
}

fn check_holdout_bounds(h1: usize, h0: usize, corpus: &Corpus) -> Result<(), CorpusError> {
    if h1 == 0 || h1 >= corpus.n_treated() {
        return Err(CorpusError::Bounds {
            what: "h1",
            value: h1,
            bound: format!("0 < h1 < n1 = {}", corpus.n_treated()),
        });
    }
    if h0 == 0 || h0 >= corpus.n_control() {
        return Err(CorpusError::Bounds {
            what: "h0",
            value: h0,
            bound: format!("0 < h0 < n0 = {}", corpus.n_control()),
        });
    }
    Ok(())
}

fn draw_ids(ids: &[&str], k: usize, rng: &mut rng::Rng) -> Vec<String> {
    index::sample(rng, ids.len(), k)
        .into_iter()
        .map(|i| ids[i].to_string())
        .collect()
}

/// Draws a hold-out of `h1` treated and `h0` control documents.
///
/// Each group's hold-out is a uniform draw without replacement from that
/// group, treated first then control from one seeded stream, so the same
/// `(corpus, h1, h0, seed)` always yields the same split.
pub fn split_sample(
    corpus: &Corpus,
    h1: usize,
    h0: usize,
    seed: u64,
) -> Result<SampleSplit, CorpusError> {
    check_holdout_bounds(h1, h0, corpus)?;
    let mut rng = rng::seeded(seed);
    let treated = draw_ids(&corpus.ids_in_group(GroupLabel::Treatment), h1, &mut rng);
    let control = draw_ids(&corpus.ids_in_group(GroupLabel::Control), h0, &mut rng);
    let holdout: BTreeSet<&str> = treated.iter().chain(&control).map(String::as_str).collect();
    let training = corpus
        .documents()
        .iter()
        .filter(|d| !holdout.contains(d.document_id.as_str()))
        .map(|d| d.document_id.clone())
        .collect();
    Ok(SampleSplit::from_parts(seed, training, treated, control))
}

/// The human-scored part `ℒ ⊆ ℋ` of the hold-out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSubset {
    pub seed: u64,
    pub labeled_treated: Vec<String>,
    pub labeled_control: Vec<String>,
}

impl LabeledSubset {
    pub fn l1(&self) -> usize {
        self.labeled_treated.len()
    }

    pub fn l0(&self) -> usize {
        self.labeled_control.len()
    }

    pub fn l(&self) -> usize {
        self.l1() + self.l0()
    }

    /// Sorted ids of `ℒ`.
    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .labeled_treated
            .iter()
            .chain(&self.labeled_control)
            .cloned()
            .collect();
        ids.sort();
        ids
    }
}

/// Draws `l1` treated and `l0` control documents uniformly from the hold-out.
pub fn draw_labeled_subset(
    split: &SampleSplit,
    l1: usize,
    l0: usize,
    seed: u64,
) -> Result<LabeledSubset, CorpusError> {
    if l1 == 0 || l1 > split.h1() {
        return Err(CorpusError::Bounds {
            what: "l1",
            value: l1,
            bound: format!("0 < l1 <= h1 = {}", split.h1()),
        });
    }
    if l0 == 0 || l0 > split.h0() {
        return Err(CorpusError::Bounds {
            what: "l0",
            value: l0,
            bound: format!("0 < l0 <= h0 = {}", split.h0()),
        });
    }
    let mut rng = rng::seeded(seed);
    fn as_refs(ids: &[String]) -> Vec<&str> {
        ids.iter().map(String::as_str).collect()
    }
    let mut labeled_treated = draw_ids(&as_refs(split.holdout_treated()), l1, &mut rng);
    let mut labeled_control = draw_ids(&as_refs(split.holdout_control()), l0, &mut rng);
    labeled_treated.sort();
    labeled_control.sort();
    Ok(LabeledSubset {
        seed,
        labeled_treated,
        labeled_control,
    })
}

/// Splits a labeled-set size `l` into `(l1, l0)` keeping `l1 / l ≈ h1 / h`.
///
/// `l1` is rounded half-up and `l0 = l - l1`.
pub fn labeled_counts(l: usize, h1: usize, h: usize) -> (usize, usize) {
    assert!(h > 0, "hold-out must be nonempty");
    let l1 = (2 * l * h1 + h) / (2 * h);
    (l1, l - l1)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_corpus(n1: usize, n0: usize) -> Corpus {
        let docs = (0..n1 + n0)
            .map(|i| Document {
                document_id: format!("d{i:03}"),
                text: format!("document number {i}"),
                group: if i < n1 {
                    GroupLabel::Treatment
                } else {
                    GroupLabel::Control
                },
            })
            .collect();
        Corpus::new(docs).unwrap()
    }

    #[test]
    fn loads_counts_from_jsonl() {
        let mut text = String::new();
        for i in 0..200 {
            let g = if i < 58 { "A" } else { "B" };
            text.push_str(&format!(
                "{{\"document_id\":\"abs{i}\",\"text\":\"abstract {i}\",\"group\":\"{g}\"}}\n"
            ));
        }
        let corpus = Corpus::from_jsonl(text.as_bytes()).unwrap();
        assert_eq!((corpus.n(), corpus.n_treated(), corpus.n_control()), (200, 58, 142));
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(Corpus::from_jsonl("".as_bytes()), Err(CorpusError::Empty)));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = "{\"document_id\":\"x\",\"text\":\"a\",\"group\":\"A\"}\n\
                    {\"document_id\":\"x\",\"text\":\"b\",\"group\":\"B\"}\n";
        assert!(matches!(
            Corpus::from_jsonl(text.as_bytes()),
            Err(CorpusError::DuplicateId(id)) if id == "x"
        ));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "{\"document_id\":\"x\",\"text\":\"a\",\"group\":\"A\"}\n\n{oops}\n";
        assert!(matches!(
            Corpus::from_jsonl(text.as_bytes()),
            Err(CorpusError::Parse { line: 3, .. })
        ));
        let bad_group = "{\"document_id\":\"x\",\"text\":\"a\",\"group\":\"C\"}\n";
        assert!(matches!(
            Corpus::from_jsonl(bad_group.as_bytes()),
            Err(CorpusError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn single_group_corpus_is_rejected() {
        let text = "{\"document_id\":\"x\",\"text\":\"a\",\"group\":\"B\"}\n";
        assert!(matches!(
            Corpus::from_jsonl(text.as_bytes()),
            Err(CorpusError::EmptyGroup(GroupLabel::Treatment))
        ));
    }

    #[test]
    fn split_has_requested_sizes() {
        let corpus = toy_corpus(58, 142);
        let split = split_sample(&corpus, 29, 71, 7).unwrap();
        assert_eq!(split.training_ids().len(), 100);
        assert_eq!(split.h(), 100);
        assert_eq!((split.h1(), split.h0()), (29, 71));
        for id in split.holdout_treated() {
            assert_eq!(corpus.get(id).unwrap().group, GroupLabel::Treatment);
        }
    }

    #[test]
    fn split_bounds_are_enforced() {
        let corpus = toy_corpus(58, 142);
        assert!(split_sample(&corpus, 58, 71, 7).is_err());
        assert!(split_sample(&corpus, 0, 71, 7).is_err());
        assert!(split_sample(&corpus, 29, 142, 7).is_err());
    }

    #[test]
    fn split_is_deterministic_in_seed() {
        let corpus = toy_corpus(20, 30);
        let a = split_sample(&corpus, 5, 10, 11).unwrap();
        let b = split_sample(&corpus, 5, 10, 11).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        let c = split_sample(&corpus, 5, 10, 12).unwrap();
        assert_ne!(a.holdout_ids(), c.holdout_ids());
    }

    #[test]
    fn manifest_round_trips() {
        let corpus = toy_corpus(20, 30);
        let split = split_sample(&corpus, 5, 10, 3).unwrap();
        let json = serde_json::to_string(&split.manifest()).unwrap();
        let manifest: SplitManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(SampleSplit::from_manifest(&manifest, &corpus).unwrap(), split);
    }

    #[test]
    fn manifest_must_partition_the_corpus() {
        let corpus = toy_corpus(20, 30);
        let mut manifest = split_sample(&corpus, 5, 10, 3).unwrap().manifest();
        manifest.training_ids.pop();
        assert!(matches!(
            SampleSplit::from_manifest(&manifest, &corpus),
            Err(CorpusError::ManifestMismatch(_))
        ));
    }

    #[test]
    fn full_labeled_subset_is_the_holdout() {
        let corpus = toy_corpus(20, 30);
        let split = split_sample(&corpus, 5, 10, 3).unwrap();
        let subset = draw_labeled_subset(&split, 5, 10, 9).unwrap();
        assert_eq!(subset.ids(), split.holdout_ids());
    }

    #[test]
    fn labeled_subset_bounds() {
        let corpus = toy_corpus(20, 30);
        let split = split_sample(&corpus, 5, 10, 3).unwrap();
        assert!(draw_labeled_subset(&split, 0, 3, 1).is_err());
        assert!(draw_labeled_subset(&split, 6, 3, 1).is_err());
        let s = draw_labeled_subset(&split, 2, 3, 1).unwrap();
        assert!(s.ids().iter().all(|id| split.is_holdout(id)));
        assert_eq!(s, draw_labeled_subset(&split, 2, 3, 1).unwrap());
    }

    #[test]
    fn labeled_counts_round_half_up() {
        // 50 * 29 / 100 = 14.5
        assert_eq!(labeled_counts(50, 29, 100), (15, 35));
        assert_eq!(labeled_counts(20, 29, 100), (6, 14));
        assert_eq!(labeled_counts(100, 29, 100), (29, 71));
        assert_eq!(labeled_counts(10, 1, 4), (3, 7));
    }

    #[test]
    fn holdout_documents_have_no_group() {
        let corpus = toy_corpus(4, 6);
        let split = split_sample(&corpus, 2, 3, 1).unwrap();
        let json = serde_json::to_string(&corpus.holdout_documents(&split)).unwrap();
        assert!(!json.contains("group"));
        assert_eq!(corpus.training_documents(&split).len(), 5);
    }
}
