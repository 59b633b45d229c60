//! Permutation test for a difference between the two document distributions.
//!
//! Predictions `Ŵ` for the hold-out are made without access to hold-out labels.
//! Their improvement `Δ` over the constant benchmark `ŵ` is compared with the
//! improvements `Δ_π` obtained after shuffling the hold-out labels (predictions
//! held fixed), giving
//!
//! ```text
//! p̂ = (1 + #{b : Δ ≤ Δ_πb}) / (1 + B)
//! ```
//!
//! Ties count toward the tail. The `+1` makes the test conservative for small
//! `B`. Each draw `b` uses its own ChaCha stream derived from the master seed,
//! so the result does not depend on how draws are scheduled across threads.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GroupLabel;
use crate::losses::{align, improvement_aligned, LabelMap, LossError, LossSpec, Metric, PredictionSet};
use crate::rng;

/// Largest enumeration [`exhaustive_test`] will attempt.
pub const MAX_ARRANGEMENTS: u128 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum PermTestError {
    #[error("number of permutations must be at least 1")]
    NoPermutations,
    #[error("{0} label arrangements exceed the enumeration limit of {MAX_ARRANGEMENTS}")]
    TooManyArrangements(u128),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PermutationConfig {
    pub spec: LossSpec,
    pub permutations: usize,
    pub seed: u64,
    /// Keep every `Δ_π` in the result.
    pub retain_deltas: bool,
}

impl PermutationConfig {
    pub fn new(spec: LossSpec, permutations: usize, seed: u64) -> Self {
        PermutationConfig {
            spec,
            permutations,
            seed,
            retain_deltas: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTestResult {
    pub delta: f64,
    pub p_value: f64,
    #[serde(rename = "B")]
    pub permutations: usize,
    pub seed: u64,
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permuted_deltas: Option<Vec<f64>>,
}

/// Runs the permutation test on id-keyed labels and predictions.
pub fn permutation_test(
    labels: &LabelMap,
    predictions: &PredictionSet,
    trivial_label: GroupLabel,
    config: &PermutationConfig,
) -> Result<PermutationTestResult, PermTestError> {
    let aligned = align(labels, predictions)?;
    permutation_test_aligned(&aligned.labels, &aligned.predictions, trivial_label, config)
}

/// Runs the permutation test on aligned label and prediction slices.
pub fn permutation_test_aligned(
    labels: &[GroupLabel],
    predictions: &[GroupLabel],
    trivial_label: GroupLabel,
    config: &PermutationConfig,
) -> Result<PermutationTestResult, PermTestError> {
    if config.permutations == 0 {
        return Err(PermTestError::NoPermutations);
    }
    if labels.is_empty() || labels.len() != predictions.len() {
        return Err(LossError::Empty.into());
    }
    let delta = improvement_aligned(labels, predictions, trivial_label, config.spec);
    let permuted_delta = |b: usize| {
        let mut rng = rng::stream(config.seed, b as u64);
        let mut shuffled = labels.to_vec();
        shuffled.shuffle(&mut rng);
        improvement_aligned(&shuffled, predictions, trivial_label, config.spec)
    };
    let (exceed, deltas) = if config.retain_deltas {
        let deltas: Vec<f64> = (0..config.permutations).into_par_iter().map(permuted_delta).collect();
        (deltas.iter().filter(|&&d| delta <= d).count(), Some(deltas))
    } else {
        let count = (0..config.permutations)
            .into_par_iter()
            .filter(|&b| delta <= permuted_delta(b))
            .count();
        (count, None)
    };
    Ok(PermutationTestResult {
        delta,
        p_value: (1 + exceed) as f64 / (1 + config.permutations) as f64,
        permutations: config.permutations,
        seed: config.seed,
        metric: config.spec.metric,
        permuted_deltas: deltas,
    })
}

/// Exact permutation p-value by enumeration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactTest {
    pub delta: f64,
    /// `#{arrangements : Δ ≤ Δ_π} / #arrangements`.
    pub p_value: f64,
    pub arrangements: u64,
}

fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Enumerates every distinct arrangement of the hold-out labels.
///
/// A uniform random permutation of binary labels induces the uniform
/// distribution over the `C(h, h1)` distinct label vectors, so the tail
/// fraction over those vectors is the exact limit of the Monte Carlo
/// p-value as `B → ∞` (without the `+1` terms).
pub fn exhaustive_test(
    labels: &LabelMap,
    predictions: &PredictionSet,
    trivial_label: GroupLabel,
    spec: LossSpec,
) -> Result<ExactTest, PermTestError> {
    let aligned = align(labels, predictions)?;
    exhaustive_test_aligned(&aligned.labels, &aligned.predictions, trivial_label, spec)
}

pub fn exhaustive_test_aligned(
    labels: &[GroupLabel],
    predictions: &[GroupLabel],
    trivial_label: GroupLabel,
    spec: LossSpec,
) -> Result<ExactTest, PermTestError> {
    if labels.is_empty() || labels.len() != predictions.len() {
        return Err(LossError::Empty.into());
    }
    let h = labels.len() as u64;
    let treated = labels.iter().filter(|g| g.is_treatment()).count() as u64;
    let total = if h <= 127 {
        binomial(h, treated)
    } else {
        u128::MAX
    };
    if total > MAX_ARRANGEMENTS {
        return Err(PermTestError::TooManyArrangements(total));
    }
    let delta = improvement_aligned(labels, predictions, trivial_label, spec);
    let mut arrangement = vec![GroupLabel::Control; labels.len()];
    let mut tail = 0u64;
    let mut count = 0u64;
    // positions of the treated labels, advanced in lexicographic order
    let k = treated as usize;
    let n = labels.len();
    let mut positions: Vec<usize> = (0..k).collect();
    loop {
        arrangement.fill(GroupLabel::Control);
        for &p in &positions {
            arrangement[p] = GroupLabel::Treatment;
        }
        count += 1;
        if delta <= improvement_aligned(&arrangement, predictions, trivial_label, spec) {
            tail += 1;
        }
        // next combination
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(ExactTest {
                    delta,
                    p_value: tail as f64 / count as f64,
                    arrangements: count,
                });
            }
            i -= 1;
            if positions[i] < n - k + i {
                positions[i] += 1;
                for j in i + 1..k {
                    positions[j] = positions[j - 1] + 1;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::PredictionSource;
    use GroupLabel::{Control, Treatment};

    fn keyed(labels: &[GroupLabel], preds: &[GroupLabel]) -> (LabelMap, PredictionSet) {
        let ids: Vec<String> = (0..labels.len()).map(|i| format!("x{i:02}")).collect();
        (
            ids.iter().cloned().zip(labels.iter().copied()).collect(),
            PredictionSet::new(
                ids.into_iter().zip(preds.iter().copied()).collect(),
                PredictionSource::Other,
            ),
        )
    }

    #[test]
    fn perfect_signal_gives_minimum_p() {
        let labels: Vec<_> = (0..100).map(|i| if i < 29 { Treatment } else { Control }).collect();
        let (w, p) = keyed(&labels, &labels);
        let cfg = PermutationConfig::new(LossSpec::accuracy(), 10_000, 1);
        let r = permutation_test(&w, &p, Control, &cfg).unwrap();
        assert!((r.delta - 0.29).abs() < 1e-12);
        assert_eq!(r.p_value, 1.0 / 10_001.0);
        assert_eq!(format!("{:.3}", r.p_value), "0.000");
    }

    #[test]
    fn constant_predictions_give_p_one() {
        let labels: Vec<_> = (0..20).map(|i| if i % 3 == 0 { Treatment } else { Control }).collect();
        let (w, p) = keyed(&labels, &[Control; 20]);
        let mut cfg = PermutationConfig::new(LossSpec::accuracy(), 500, 4);
        cfg.retain_deltas = true;
        let r = permutation_test(&w, &p, Control, &cfg).unwrap();
        assert_eq!(r.delta, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(r.permuted_deltas.unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn zero_permutations_rejected() {
        let (w, p) = keyed(&[Treatment, Control], &[Treatment, Control]);
        let cfg = PermutationConfig::new(LossSpec::accuracy(), 0, 1);
        assert_eq!(permutation_test(&w, &p, Control, &cfg), Err(PermTestError::NoPermutations));
    }

    #[test]
    fn deterministic_in_seed() {
        let labels: Vec<_> = (0..30).map(|i| if i % 2 == 0 { Treatment } else { Control }).collect();
        let preds: Vec<_> = (0..30).map(|i| if i % 3 == 0 { Treatment } else { Control }).collect();
        let (w, p) = keyed(&labels, &preds);
        let cfg = PermutationConfig::new(LossSpec::accuracy(), 2_000, 99);
        let a = permutation_test(&w, &p, Control, &cfg).unwrap();
        let b = permutation_test(&w, &p, Control, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exhaustive_by_hand() {
        // labels (1,1,0,0), predictions = labels, accuracy, trivial = Control.
        // Δ = 1 - 0.5 = 0.5. Of the 6 arrangements only the identity has
        // accuracy 1, so the exact tail is 1/6.
        let labels = [Treatment, Treatment, Control, Control];
        let (w, p) = keyed(&labels, &labels);
        let exact = exhaustive_test(&w, &p, Control, LossSpec::accuracy()).unwrap();
        assert_eq!(exact.delta, 0.5);
        assert_eq!(exact.arrangements, 6);
        assert!((exact.p_value - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn exhaustive_guard() {
        let labels: Vec<_> = (0..40).map(|i| if i < 20 { Treatment } else { Control }).collect();
        let (w, p) = keyed(&labels, &labels);
        assert!(matches!(
            exhaustive_test(&w, &p, Control, LossSpec::accuracy()),
            Err(PermTestError::TooManyArrangements(_))
        ));
    }

    #[test]
    fn result_json_fields() {
        let r = PermutationTestResult {
            delta: 0.15,
            p_value: 0.5,
            permutations: 10,
            seed: 3,
            metric: Metric::Accuracy,
            permuted_deltas: None,
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["B", "delta", "metric", "p_value", "seed"]);
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(8, 3), 56);
        assert_eq!(binomial(10, 0), 1);
    }
}
