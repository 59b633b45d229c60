//! Classification losses on hold-out labels and the constant benchmark.
//!
//! Scores (accuracy, F1, precision, recall) live in `[0, 1]`; the loss is the
//! negated score, so lower loss is better and the improvement of a predictor
//! over the constant benchmark is `Δ = L(W, ŵ) − L(W, Ŵ)`.
//!
//! F1 is computed literally as the harmonic mean of precision and recall with
//! respect to the positive class, with `F1 = 0` when both are zero. For a
//! hold-out with 29 treated and 71 control documents, the all-treatment
//! constant therefore has precision 0.29, recall 1 and F1 ≈ 0.45; a value of
//! 0.29 quoted for that predictor is its precision, not its F1.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::corpus::GroupLabel;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction ids do not match label ids: {missing} unpredicted, {extra} unknown (e.g. `{example}`)")]
    IdMismatch {
        missing: usize,
        extra: usize,
        example: String,
    },
    #[error("no labels to evaluate")]
    Empty,
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
}

/// Group labels keyed by document id.
pub type LabelMap = BTreeMap<String, GroupLabel>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
    Precision,
    Recall,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
        })
    }
}

impl FromStr for Metric {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" | "acc" => Ok(Metric::Accuracy),
            "f1" => Ok(Metric::F1),
            "precision" => Ok(Metric::Precision),
            "recall" => Ok(Metric::Recall),
            _ => Err(LossError::UnknownMetric(s.to_string())),
        }
    }
}

/// A metric together with the class treated as positive.
///
/// The positive class only matters for F1, precision and recall.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub metric: Metric,
    pub positive_class: GroupLabel,
}

impl LossSpec {
    pub fn new(metric: Metric, positive_class: GroupLabel) -> Self {
        LossSpec {
            metric,
            positive_class,
        }
    }

    pub fn accuracy() -> Self {
        LossSpec::new(Metric::Accuracy, GroupLabel::Treatment)
    }

    /// Score of aligned predictions. Slices must have equal length.
    pub fn score(&self, labels: &[GroupLabel], predictions: &[GroupLabel]) -> f64 {
        Confusion::tally(labels, predictions, self.positive_class).score(self.metric)
    }

    pub fn loss(&self, labels: &[GroupLabel], predictions: &[GroupLabel]) -> f64 {
        -self.score(labels, predictions)
    }
}

/// Confusion counts with respect to a positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

impl Confusion {
    pub fn tally(labels: &[GroupLabel], predictions: &[GroupLabel], positive: GroupLabel) -> Self {
        debug_assert_eq!(labels.len(), predictions.len());
        let mut c = Confusion::default();
        for (&w, &p) in labels.iter().zip(predictions) {
            match (w == positive, p == positive) {
                (true, true) => c.true_pos += 1,
                (false, true) => c.false_pos += 1,
                (true, false) => c.false_neg += 1,
                (false, false) => c.true_neg += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.true_pos + self.true_neg, self.total())
    }

    /// Zero when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    /// Zero when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn score(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy(),
            Metric::F1 => self.f1(),
            Metric::Precision => self.precision(),
            Metric::Recall => self.recall(),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    Llm,
    ThemeClassifier,
    Trivial,
    Other,
}

/// Predicted group per document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub entries: BTreeMap<String, GroupLabel>,
    pub source: PredictionSource,
}

impl PredictionSet {
    pub fn new(entries: BTreeMap<String, GroupLabel>, source: PredictionSource) -> Self {
        PredictionSet { entries, source }
    }

    /// The same label for every id.
    pub fn constant<'a>(ids: impl IntoIterator<Item = &'a String>, label: GroupLabel) -> Self {
        PredictionSet {
            entries: ids.into_iter().map(|id| (id.clone(), label)).collect(),
            source: PredictionSource::Trivial,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Digest of the canonical serialization, used for registration.
    pub fn digest(&self) -> String {
        canonical::digest(self).expect("prediction sets always serialize")
    }
}

/// Labels and predictions aligned by sorted document id.
#[derive(Clone, Debug, PartialEq)]
pub struct Aligned {
    pub ids: Vec<String>,
    pub labels: Vec<GroupLabel>,
    pub predictions: Vec<GroupLabel>,
}

/// Aligns predictions with labels, requiring identical id sets.
pub fn align(labels: &LabelMap, predictions: &PredictionSet) -> Result<Aligned, LossError> {
    if labels.is_empty() {
        return Err(LossError::Empty);
    }
    let missing: Vec<&String> = labels
        .keys()
        .filter(|id| !predictions.entries.contains_key(*id))
        .collect();
    let extra: Vec<&String> = predictions
        .entries
        .keys()
        .filter(|id| !labels.contains_key(*id))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(LossError::IdMismatch {
            missing: missing.len(),
            extra: extra.len(),
            example: missing.first().or(extra.first()).map(|s| s.to_string()).unwrap_or_default(),
        });
    }
    Ok(Aligned {
        ids: labels.keys().cloned().collect(),
        labels: labels.values().copied().collect(),
        predictions: labels.keys().map(|id| predictions.entries[id]).collect(),
    })
}

/// A score together with its loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub metric: Metric,
    pub value: f64,
    pub loss: f64,
}

impl LossValue {
    pub fn from_score(metric: Metric, value: f64) -> Self {
        LossValue {
            metric,
            value,
            loss: -value,
        }
    }
}

/// Evaluates `predictions` against `labels` under `spec`.
pub fn evaluate(
    labels: &LabelMap,
    predictions: &PredictionSet,
    spec: LossSpec,
) -> Result<LossValue, LossError> {
    let a = align(labels, predictions)?;
    Ok(LossValue::from_score(spec.metric, spec.score(&a.labels, &a.predictions)))
}

pub fn accuracy(labels: &LabelMap, predictions: &PredictionSet) -> Result<LossValue, LossError> {
    evaluate(labels, predictions, LossSpec::accuracy())
}

pub fn f1(
    labels: &LabelMap,
    predictions: &PredictionSet,
    positive_class: GroupLabel,
) -> Result<LossValue, LossError> {
    evaluate(labels, predictions, LossSpec::new(Metric::F1, positive_class))
}

pub fn precision(
    labels: &LabelMap,
    predictions: &PredictionSet,
    positive_class: GroupLabel,
) -> Result<LossValue, LossError> {
    evaluate(labels, predictions, LossSpec::new(Metric::Precision, positive_class))
}

pub fn recall(
    labels: &LabelMap,
    predictions: &PredictionSet,
    positive_class: GroupLabel,
) -> Result<LossValue, LossError> {
    evaluate(labels, predictions, LossSpec::new(Metric::Recall, positive_class))
}

/// The smaller training group, or treatment on a tie.
pub fn default_positive_class(training_labels: &[GroupLabel]) -> GroupLabel {
    let treated = training_labels.iter().filter(|g| g.is_treatment()).count();
    if treated <= training_labels.len() - treated {
        GroupLabel::Treatment
    } else {
        GroupLabel::Control
    }
}

/// Constant label with the lowest training loss; ties go to control.
///
/// For accuracy this is the training majority class. For F1 with a positive
/// class present in training, it is the positive class, the only constant
/// with nonzero recall.
pub fn trivial_predictor(training_labels: &[GroupLabel], spec: LossSpec) -> Result<GroupLabel, LossError> {
    if training_labels.is_empty() {
        return Err(LossError::Empty);
    }
    let loss_of = |label: GroupLabel| {
        let constant = vec![label; training_labels.len()];
        spec.loss(training_labels, &constant)
    };
    if loss_of(GroupLabel::Treatment) < loss_of(GroupLabel::Control) {
        Ok(GroupLabel::Treatment)
    } else {
        Ok(GroupLabel::Control)
    }
}

/// Improvement over the constant benchmark on aligned slices:
/// `L(W, ŵ) − L(W, Ŵ)`.
pub fn improvement_aligned(
    labels: &[GroupLabel],
    predictions: &[GroupLabel],
    trivial_label: GroupLabel,
    spec: LossSpec,
) -> f64 {
    let constant = vec![trivial_label; labels.len()];
    spec.loss(labels, &constant) - spec.loss(labels, predictions)
}

/// Improvement of `predictions` over the constant `trivial_label`.
pub fn improvement(
    labels: &LabelMap,
    predictions: &PredictionSet,
    trivial_label: GroupLabel,
    spec: LossSpec,
) -> Result<f64, LossError> {
    let a = align(labels, predictions)?;
    Ok(improvement_aligned(&a.labels, &a.predictions, trivial_label, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use GroupLabel::{Control, Treatment};

    fn holdout_29_71() -> LabelMap {
        (0..100)
            .map(|i| (format!("h{i:03}"), if i < 29 { Treatment } else { Control }))
            .collect()
    }

    fn preds(labels: &LabelMap, f: impl Fn(usize, GroupLabel) -> GroupLabel) -> PredictionSet {
        PredictionSet::new(
            labels.iter().enumerate().map(|(i, (id, &g))| (id.clone(), f(i, g))).collect(),
            PredictionSource::Other,
        )
    }

    #[test]
    fn all_control_accuracy_is_majority_share() {
        let labels = holdout_29_71();
        let p = PredictionSet::constant(labels.keys(), Control);
        let acc = accuracy(&labels, &p).unwrap();
        assert!((acc.value - 0.71).abs() < 1e-12);
        assert_eq!(acc.loss, -acc.value);
    }

    #[test]
    fn perfect_and_flipped_accuracy() {
        let labels = holdout_29_71();
        assert_eq!(accuracy(&labels, &preds(&labels, |_, g| g)).unwrap().value, 1.0);
        assert_eq!(accuracy(&labels, &preds(&labels, |_, g| g.other())).unwrap().value, 0.0);
    }

    #[test]
    fn all_control_f1_is_zero() {
        let labels = holdout_29_71();
        let p = PredictionSet::constant(labels.keys(), Control);
        assert_eq!(f1(&labels, &p, Treatment).unwrap().value, 0.0);
        assert_eq!(recall(&labels, &p, Treatment).unwrap().value, 0.0);
    }

    #[test]
    fn all_treatment_f1_by_hand() {
        let labels = holdout_29_71();
        let p = PredictionSet::constant(labels.keys(), Treatment);
        let pre = precision(&labels, &p, Treatment).unwrap().value;
        let rec = recall(&labels, &p, Treatment).unwrap().value;
        assert!((pre - 0.29).abs() < 1e-12);
        assert_eq!(rec, 1.0);
        // 2 * .29 * 1 / 1.29
        let expected = 0.58 / 1.29;
        assert!((f1(&labels, &p, Treatment).unwrap().value - expected).abs() < 1e-12);
        assert!((expected - 0.4496).abs() < 1e-4);
    }

    #[test]
    fn perfect_f1_is_one() {
        let labels = holdout_29_71();
        assert_eq!(f1(&labels, &preds(&labels, |_, g| g), Treatment).unwrap().value, 1.0);
    }

    #[test]
    fn id_mismatch_is_an_error() {
        let labels = holdout_29_71();
        let mut p = PredictionSet::constant(labels.keys(), Control);
        p.entries.remove("h000");
        assert!(matches!(accuracy(&labels, &p), Err(LossError::IdMismatch { missing: 1, .. })));
        p.entries.insert("zzz".into(), Control);
        assert!(accuracy(&labels, &p).is_err());
    }

    #[test]
    fn trivial_predictor_rules() {
        let mut training = vec![Control; 71];
        training.extend(vec![Treatment; 29]);
        assert_eq!(trivial_predictor(&training, LossSpec::accuracy()).unwrap(), Control);
        assert_eq!(
            trivial_predictor(&training, LossSpec::new(Metric::F1, Treatment)).unwrap(),
            Treatment
        );
        let tie = [Treatment, Control, Treatment, Control];
        assert_eq!(trivial_predictor(&tie, LossSpec::accuracy()).unwrap(), Control);
        assert!(trivial_predictor(&[], LossSpec::accuracy()).is_err());
    }

    #[test]
    fn positive_class_is_smaller_training_group() {
        assert_eq!(default_positive_class(&[Treatment, Control, Control]), Treatment);
        assert_eq!(default_positive_class(&[Treatment, Treatment, Control]), Control);
        assert_eq!(default_positive_class(&[Treatment, Control]), Treatment);
    }

    #[test]
    fn improvement_examples() {
        let labels = holdout_29_71();
        // 86 correct: all 29 treated found except 4, and 61 of 71 control
        let p86 = preds(&labels, |i, g| if (29..39).contains(&i) || i < 4 { g.other() } else { g });
        assert!((accuracy(&labels, &p86).unwrap().value - 0.86).abs() < 1e-12);
        let d = improvement(&labels, &p86, Control, LossSpec::accuracy()).unwrap();
        assert!((d - 0.15).abs() < 1e-12);

        let constant = PredictionSet::constant(labels.keys(), Control);
        assert_eq!(improvement(&labels, &constant, Control, LossSpec::accuracy()).unwrap(), 0.0);

        let perfect = preds(&labels, |_, g| g);
        let d = improvement(&labels, &perfect, Control, LossSpec::accuracy()).unwrap();
        assert!((d - 0.29).abs() < 1e-12);
    }

    #[test]
    fn metric_parses() {
        assert_eq!("F1".parse::<Metric>().unwrap(), Metric::F1);
        assert!("auc".parse::<Metric>().is_err());
    }

    fn label_strategy() -> impl Strategy<Value = GroupLabel> {
        prop_oneof![Just(Treatment), Just(Control)]
    }

    proptest! {
        #[test]
        fn scores_are_in_unit_interval(
            pairs in prop::collection::vec((label_strategy(), label_strategy()), 1..60),
            positive in label_strategy(),
        ) {
            let (w, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            for metric in [Metric::Accuracy, Metric::F1, Metric::Precision, Metric::Recall] {
                let s = LossSpec::new(metric, positive).score(&w, &p);
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn accuracy_invariant_to_consistent_relabeling(
            pairs in prop::collection::vec((label_strategy(), label_strategy()), 1..60),
        ) {
            let (w, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let wf: Vec<_> = w.iter().map(|g| g.other()).collect();
            let pf: Vec<_> = p.iter().map(|g| g.other()).collect();
            let spec = LossSpec::accuracy();
            prop_assert_eq!(spec.score(&w, &p), spec.score(&wf, &pf));
        }

        #[test]
        fn improvement_is_antisymmetric(
            triples in prop::collection::vec((label_strategy(), label_strategy(), label_strategy()), 1..60),
            trivial in label_strategy(),
        ) {
            let w: Vec<_> = triples.iter().map(|t| t.0).collect();
            let a: Vec<_> = triples.iter().map(|t| t.1).collect();
            let b: Vec<_> = triples.iter().map(|t| t.2).collect();
            let spec = LossSpec::new(Metric::F1, Treatment);
            let ab = improvement_aligned(&w, &a, trivial, spec) - improvement_aligned(&w, &b, trivial, spec);
            let ba = improvement_aligned(&w, &b, trivial, spec) - improvement_aligned(&w, &a, trivial, spec);
            prop_assert!((ab + ba).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_depends_on_positive_class() {
        let w = [Treatment, Treatment, Control, Control, Control];
        let p = [Treatment, Control, Control, Control, Treatment];
        let a = LossSpec::new(Metric::F1, Treatment).score(&w, &p);
        let b = LossSpec::new(Metric::F1, Control).score(&w, &p);
        assert_ne!(a, b);
    }
}
