//! How much of the predictable group difference the themes capture.
//!
//! Completeness compares three hold-out losses: a constant prediction
//! (`trivial`), a classifier restricted to theme scores (`theme`), and an
//! unrestricted benchmark such as direct LLM classification (`full`):
//!
//! ```text
//! completeness = (trivial − theme) / (trivial − full)
//! ```
//!
//! The theme classifier is a ridge-penalized logistic regression fit on the
//! training sample. Empirical completeness can fall outside `[0, 1]`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GroupLabel;
use crate::losses::{
    align, improvement_aligned, Confusion, LabelMap, LossError, LossSpec, LossValue, Metric, PredictionSet,
    PredictionSource,
};
use crate::permtest::{permutation_test_aligned, PermTestError, PermutationConfig};
use crate::themes::NumericScoreView;

/// Ridge penalty on standardized slopes (the intercept is unpenalized).
pub const DEFAULT_RIDGE: f64 = 1e-2;

const MAX_ITERATIONS: usize = 200;
const GRADIENT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum CompletenessError {
    #[error("training data contain no documents")]
    Empty,
    #[error("training data contain only group {0}")]
    SingleClass(GroupLabel),
    #[error("no label for document `{0}`")]
    MissingLabel(String),
    #[error("classifier expects {expected} columns, got {found}")]
    ColumnMismatch { expected: usize, found: usize },
    #[error("trivial loss {trivial} does not exceed full loss {full}; completeness undefined")]
    NonPositiveDenominator { trivial: f64, full: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    PermTest(#[from] PermTestError),
}

type Result<T> = std::result::Result<T, CompletenessError>;

/// Logistic classifier over numeric theme columns; predicts treatment when
/// the fitted probability exceeds one half.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticClassifier {
    pub columns: Vec<String>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub ridge: f64,
    pub iterations: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl LogisticClassifier {
    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(x, (m, s))| if *s > 0.0 { (x - m) / s } else { 0.0 })
            .collect()
    }

    pub fn probability(&self, row: &[f64]) -> f64 {
        let z = self.standardize(row);
        sigmoid(self.intercept + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }

    pub fn predict(&self, row: &[f64]) -> GroupLabel {
        if self.probability(row) > 0.5 {
            GroupLabel::Treatment
        } else {
            GroupLabel::Control
        }
    }

    /// Predictions for every document of a view.
    pub fn predict_view(&self, view: &NumericScoreView) -> Result<PredictionSet> {
        if view.n_cols() != self.weights.len() {
            return Err(CompletenessError::ColumnMismatch {
                expected: self.weights.len(),
                found: view.n_cols(),
            });
        }
        let entries = view
            .document_ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), self.predict(view.row(i))))
            .collect();
        Ok(PredictionSet::new(entries, PredictionSource::ThemeClassifier))
    }
}

/// Fits the theme classifier with the default ridge penalty.
pub fn train_theme_classifier(view: &NumericScoreView, labels: &LabelMap) -> Result<LogisticClassifier> {
    train_logistic(view, labels, DEFAULT_RIDGE)
}

/// Penalized maximum likelihood by damped Newton iterations.
///
/// Columns are standardized on the training data; constant columns get zero
/// weight. The fit is deterministic.
pub fn train_logistic(view: &NumericScoreView, labels: &LabelMap, ridge: f64) -> Result<LogisticClassifier> {
    if view.n_rows() == 0 {
        return Err(CompletenessError::Empty);
    }
    let y: Vec<f64> = view
        .document_ids()
        .iter()
        .map(|id| {
            labels
                .get(id)
                .map(|g| g.indicator() as f64)
                .ok_or_else(|| CompletenessError::MissingLabel(id.clone()))
        })
        .collect::<Result<_>>()?;
    let n1 = y.iter().filter(|&&v| v == 1.0).count();
    if n1 == 0 {
        return Err(CompletenessError::SingleClass(GroupLabel::Control));
    }
    if n1 == y.len() {
        return Err(CompletenessError::SingleClass(GroupLabel::Treatment));
    }

    let (n, k) = (view.n_rows(), view.n_cols());
    let means: Vec<f64> = (0..k).map(|j| view.column(j).iter().sum::<f64>() / n as f64).collect();
    let scales: Vec<f64> = (0..k)
        .map(|j| {
            let var = view.column(j).iter().map(|x| (x - means[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-24 {
                var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut classifier = LogisticClassifier {
        columns: view.columns().iter().map(|c| c.label()).collect(),
        means,
        scales,
        intercept: 0.0,
        weights: vec![0.0; k],
        ridge,
        iterations: 0,
    };
    // design with a leading intercept column
    let x = DMatrix::from_fn(n, k + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            let s = classifier.scales[j - 1];
            if s > 0.0 {
                (view.row(i)[j - 1] - classifier.means[j - 1]) / s
            } else {
                0.0
            }
        }
    });
    let y = DVector::from_vec(y);
    let penalty = DVector::from_fn(k + 1, |j, _| if j == 0 { 0.0 } else { ridge });
    let objective = |beta: &DVector<f64>| {
        let eta = &x * beta;
        let nll: f64 = eta.iter().zip(y.iter()).map(|(e, yi)| softplus(*e) - yi * e).sum();
        nll + 0.5 * beta.iter().zip(penalty.iter()).map(|(b, p)| p * b * b).sum::<f64>()
    };
    // start at the intercept-only optimum
    let p1 = n1 as f64 / n as f64;
    let mut beta = DVector::zeros(k + 1);
    beta[0] = (p1 / (1.0 - p1)).ln();
    let mut current = objective(&beta);
    for iteration in 1..=MAX_ITERATIONS {
        classifier.iterations = iteration;
        let eta = &x * &beta;
        let p = eta.map(sigmoid);
        let grad = x.transpose() * (&p - &y) + penalty.component_mul(&beta);
        if grad.amax() < GRADIENT_TOLERANCE {
            break;
        }
        let w = p.map(|pi| (pi * (1.0 - pi)).max(1e-12));
        let mut hessian = x.transpose() * DMatrix::from_diagonal(&w) * &x;
        for j in 0..=k {
            hessian[(j, j)] += penalty[j] + if classifier_column_constant(j, &classifier.scales) { 1.0 } else { 0.0 };
        }
        let step = match hessian.clone().cholesky() {
            Some(chol) => chol.solve(&grad),
            None => hessian.pseudo_inverse(1e-12).map(|inv| inv * &grad).unwrap_or_else(|_| grad.clone()),
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..50 {
            let candidate = &beta - &step * t;
            let value = objective(&candidate);
            if value <= current {
                beta = candidate;
                improved = current - value > 0.0;
                current = value;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    classifier.intercept = beta[0];
    classifier.weights = beta.iter().skip(1).copied().collect();
    Ok(classifier)
}

fn classifier_column_constant(j: usize, scales: &[f64]) -> bool {
    j > 0 && scales[j - 1] == 0.0
}

/// `(trivial − theme) / (trivial − full)` on losses.
pub fn completeness_estimate(trivial_loss: f64, theme_loss: f64, full_loss: f64) -> Result<f64> {
    let denominator = trivial_loss - full_loss;
    if denominator <= 0.0 || denominator.is_nan() {
        return Err(CompletenessError::NonPositiveDenominator {
            trivial: trivial_loss,
            full: full_loss,
        });
    }
    Ok((trivial_loss - theme_loss) / denominator)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessReport {
    /// Name of the full benchmark predictor.
    pub benchmark: String,
    pub metric: Metric,
    pub trivial_label: GroupLabel,
    pub trivial_loss: LossValue,
    pub theme_loss: LossValue,
    pub full_loss: LossValue,
    pub completeness: f64,
    pub p_value_vs_trivial: f64,
    pub permutations: usize,
    pub seed: u64,
}

/// Losses, completeness, and a permutation p-value of the theme predictions
/// against the constant prediction.
pub fn completeness_report(
    theme: &PredictionSet,
    full: &PredictionSet,
    trivial_label: GroupLabel,
    labels: &LabelMap,
    benchmark: &str,
    config: &PermutationConfig,
) -> Result<CompletenessReport> {
    let spec = config.spec;
    let theme_aligned = align(labels, theme)?;
    let full_aligned = align(labels, full)?;
    let trivial = vec![trivial_label; theme_aligned.labels.len()];
    let metric = spec.metric;
    let trivial_loss = LossValue::from_score(metric, spec.score(&theme_aligned.labels, &trivial));
    let theme_loss = LossValue::from_score(metric, spec.score(&theme_aligned.labels, &theme_aligned.predictions));
    let full_loss = LossValue::from_score(metric, spec.score(&full_aligned.labels, &full_aligned.predictions));
    let completeness = completeness_estimate(trivial_loss.loss, theme_loss.loss, full_loss.loss)?;
    let test = permutation_test_aligned(&theme_aligned.labels, &theme_aligned.predictions, trivial_label, config)?;
    Ok(CompletenessReport {
        benchmark: benchmark.to_string(),
        metric,
        trivial_label,
        trivial_loss,
        theme_loss,
        full_loss,
        completeness,
        p_value_vs_trivial: test.p_value,
        permutations: config.permutations,
        seed: config.seed,
    })
}

/// One row of the reverse-classification table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReverseRow {
    pub method: String,
    pub accuracy: f64,
    pub f1: f64,
    pub completeness: f64,
    /// Absent for the trivial benchmark itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

/// Hold-out reverse-classification table: trivial benchmark, full benchmark,
/// then any number of theme-based predictors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReverseTable {
    pub metric: Metric,
    pub permutations: usize,
    pub seed: u64,
    pub rows: Vec<ReverseRow>,
}

impl ReverseTable {
    /// Builds the table. Completeness and p-values use `config.spec`; F1 is
    /// reported with `f1_positive` as the positive class.
    pub fn build(
        labels: &LabelMap,
        trivial_label: GroupLabel,
        full: (&str, &PredictionSet),
        others: &[(&str, &PredictionSet)],
        f1_positive: GroupLabel,
        config: &PermutationConfig,
    ) -> Result<ReverseTable> {
        let spec = config.spec;
        let full_aligned = align(labels, full.1)?;
        let trivial = vec![trivial_label; full_aligned.labels.len()];
        let trivial_loss = spec.loss(&full_aligned.labels, &trivial);
        let full_loss = spec.loss(&full_aligned.labels, &full_aligned.predictions);
        let row = |method: &str, preds: &[GroupLabel], truth: &[GroupLabel], p_value: Option<f64>| -> Result<ReverseRow> {
            let accuracy = Confusion::tally(truth, preds, f1_positive).accuracy();
            let f1 = Confusion::tally(truth, preds, f1_positive).f1();
            Ok(ReverseRow {
                method: method.to_string(),
                accuracy,
                f1,
                completeness: completeness_estimate(trivial_loss, spec.loss(truth, preds), full_loss)?,
                p_value,
            })
        };
        let mut rows = vec![
            row("Trivial classification", &trivial, &full_aligned.labels, None)?,
        ];
        let mut push = |name: &str, set: &PredictionSet| -> Result<()> {
            let a = align(labels, set)?;
            let test = permutation_test_aligned(&a.labels, &a.predictions, trivial_label, config)?;
            rows.push(row(name, &a.predictions, &a.labels, Some(test.p_value))?);
            Ok(())
        };
        push(full.0, full.1)?;
        for (name, set) in others {
            push(name, set)?;
        }
        Ok(ReverseTable {
            metric: spec.metric,
            permutations: config.permutations,
            seed: config.seed,
            rows,
        })
    }

    /// Text rendering with percentages and three-decimal p-values.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>12}  {:>7}",
            "method", "accuracy", "f1", "completeness", "p-value"
        );
        for r in &self.rows {
            let p = r.p_value.map_or_else(|| "--".to_string(), |p| format!("{p:.3}"));
            let _ = writeln!(
                out,
                "{:<width$}  {:>8}  {:>8.2}  {:>12}  {:>7}",
                r.method,
                format!("{:.0}%", r.accuracy * 100.0),
                r.f1,
                format!("{:.0}%", r.completeness * 100.0),
                p
            );
        }
        let _ = writeln!(out, "completeness and p-values use {}", self.metric);
        out
    }
}

/// Improvement of a predictor over the constant prediction, `Δ`.
pub fn improvement_over_trivial(
    labels: &LabelMap,
    predictions: &PredictionSet,
    trivial_label: GroupLabel,
    spec: LossSpec,
) -> Result<f64> {
    let a = align(labels, predictions)?;
    Ok(improvement_aligned(&a.labels, &a.predictions, trivial_label, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use GroupLabel::{Control, Treatment};

    fn view(rows: &[(GroupLabel, Vec<f64>)]) -> (NumericScoreView, LabelMap) {
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("t{i:03}")).collect();
        let labels = ids.iter().cloned().zip(rows.iter().map(|r| r.0)).collect();
        let cols: Vec<String> = (0..rows[0].1.len()).map(|j| format!("C{j}")).collect();
        let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
        (NumericScoreView::from_rows(ids, &cols, rows.iter().map(|r| r.1.clone()).collect()), labels)
    }

    #[test]
    fn completeness_of_worked_examples() {
        let human = completeness_estimate(-0.71, -0.85, -0.86).unwrap();
        assert!((human - 0.9333333333333333).abs() < 1e-9);
        assert_eq!(format!("{:.0}%", human * 100.0), "93%");
        let llm = completeness_estimate(-0.71, -0.81, -0.86).unwrap();
        assert_eq!(format!("{:.0}%", llm * 100.0), "67%");
        let topic = completeness_estimate(-0.71, -0.73, -0.86).unwrap();
        assert_eq!(format!("{:.0}%", topic * 100.0), "13%");
        assert_eq!(completeness_estimate(-0.71, -0.86, -0.86).unwrap(), 1.0);
        assert_eq!(completeness_estimate(-0.71, -0.71, -0.86).unwrap(), 0.0);
    }

    #[test]
    fn zero_denominator() {
        assert!(matches!(
            completeness_estimate(-0.71, -0.8, -0.71),
            Err(CompletenessError::NonPositiveDenominator { .. })
        ));
    }

    #[test]
    fn separable_single_theme() {
        let rows: Vec<_> = (0..30)
            .map(|i| if i < 10 { (Treatment, vec![3.0]) } else { (Control, vec![(i % 2) as f64]) })
            .collect();
        let (v, w) = view(&rows);
        let c = train_theme_classifier(&v, &w).unwrap();
        assert!(c.weights[0].is_finite() && c.weights[0] > 0.0);
        let preds = c.predict_view(&v).unwrap();
        assert!(preds.entries.iter().all(|(id, g)| w[id] == *g));
    }

    #[test]
    fn constant_columns_predict_majority() {
        let rows: Vec<_> = (0..20).map(|i| (if i < 7 { Treatment } else { Control }, vec![1.0, 2.0])).collect();
        let (v, w) = view(&rows);
        let c = train_theme_classifier(&v, &w).unwrap();
        assert_eq!(c.weights, vec![0.0, 0.0]);
        assert!(c.predict_view(&v).unwrap().entries.values().all(|g| *g == Control));

        let rows: Vec<_> = (0..20).map(|i| (if i < 13 { Treatment } else { Control }, vec![1.0])).collect();
        let (v, w) = view(&rows);
        let c = train_theme_classifier(&v, &w).unwrap();
        assert!(c.predict_view(&v).unwrap().entries.values().all(|g| *g == Treatment));
    }

    #[test]
    fn single_class_rejected() {
        let (v, w) = view(&[(Control, vec![1.0]), (Control, vec![0.0])]);
        assert_eq!(train_theme_classifier(&v, &w).unwrap_err(), CompletenessError::SingleClass(Control));
    }

    #[test]
    fn fit_is_deterministic() {
        let rows: Vec<_> = (0..50)
            .map(|i| (if i % 3 == 0 { Treatment } else { Control }, vec![(i % 4) as f64, ((i * 7) % 5) as f64]))
            .collect();
        let (v, w) = view(&rows);
        assert_eq!(train_theme_classifier(&v, &w).unwrap(), train_theme_classifier(&v, &w).unwrap());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("h{i:03}")).collect()
    }

    #[test]
    fn report_with_trivial_theme_predictions() {
        let ids = ids(40);
        let labels: LabelMap = ids.iter().enumerate().map(|(i, id)| (id.clone(), if i < 12 { Treatment } else { Control })).collect();
        let full = PredictionSet::new(labels.clone(), PredictionSource::Llm);
        let theme = PredictionSet::constant(&ids, Control);
        let cfg = PermutationConfig::new(LossSpec::accuracy(), 500, 2);
        let r = completeness_report(&theme, &full, Control, &labels, "llm", &cfg).unwrap();
        assert_eq!(r.completeness, 0.0);
        assert_eq!(r.p_value_vs_trivial, 1.0);
        let again = completeness_report(&theme, &full, Control, &labels, "llm", &cfg).unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn reverse_table_rows() {
        let ids = ids(100);
        let labels: LabelMap = ids.iter().enumerate().map(|(i, id)| (id.clone(), if i < 29 { Treatment } else { Control })).collect();
        // full benchmark: 86 correct; theme predictor: 85 correct
        let flip = |n: usize| -> PredictionSet {
            PredictionSet::new(
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, (id, g))| (id.clone(), if i >= 29 && i < 29 + n { g.other() } else { *g }))
                    .collect(),
                PredictionSource::Other,
            )
        };
        let full = flip(14);
        let theme = flip(15);
        let cfg = PermutationConfig::new(LossSpec::accuracy(), 1000, 9);
        let table = ReverseTable::build(&labels, Control, ("Direct LLM classification", &full), &[("Logit", &theme)], Treatment, &cfg).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert_eq!(format!("{:.0}%", table.rows[0].accuracy * 100.0), "71%");
        assert_eq!(table.rows[0].f1, 0.0);
        assert_eq!(table.rows[1].completeness, 1.0);
        assert_eq!(format!("{:.0}%", table.rows[2].completeness * 100.0), "93%");
        let text = table.render();
        assert!(text.contains("Trivial classification") && text.contains("--"));
    }

    proptest! {
        #[test]
        fn monotone_in_theme_accuracy(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let c_lo = completeness_estimate(-0.5, -lo, -0.95).unwrap();
            let c_hi = completeness_estimate(-0.5, -hi, -0.95).unwrap();
            prop_assert!(c_lo <= c_hi);
        }
    }
}
