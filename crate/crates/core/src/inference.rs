//! Estimation of theme-level group differences on the hold-out.
//!
//! With true (human) scores `Y` on every hold-out document, the difference in
//! means `τ̂ = Ȳ₁ − Ȳ₀` has variance estimated by
//! `Var̂(Y | W=1)/h1 + Var̂(Y | W=0)/h0` ([`analytic_covariance`]) or by a
//! bootstrap that resamples each group separately ([`holdout_bootstrap`]).
//!
//! When only a random subset `ℒ ⊆ ℋ` has human scores, cheap machine scores
//! `Ŷ` on all of `ℋ` are combined with the human ones:
//!
//! ```text
//! τ̂† = (mean_ℋ₁ Ŷ − mean_ℋ₀ Ŷ) − (mean_ℒ₁ (Ŷ − Y) − mean_ℒ₀ (Ŷ − Y))
//! ```
//!
//! which stays unbiased however biased `Ŷ` is. Its variance is estimated on
//! `ℒ` by [`combined_variance`]; [`label_cost_curve`] traces it against `ℓ`.
//!
//! Sample variances and covariances use the `m − 1` divisor throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

use crate::corpus::{labeled_counts, GroupLabel};
use crate::losses::LabelMap;
use crate::rng;
use crate::themes::NumericScoreView;

/// Fewest bootstrap draws accepted.
pub const MIN_BOOTSTRAP_DRAWS: usize = 100;

/// Relative eigenvalue tolerance for the Wald pseudo-inverse.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("group {0} is empty")]
    EmptyGroup(GroupLabel),
    #[error("group {group} has {size} documents; at least {min} required")]
    GroupTooSmall { group: GroupLabel, size: usize, min: usize },
    #[error("no label for document `{0}`")]
    MissingLabel(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("score columns differ between machine and human views")]
    ColumnMismatch,
    #[error("human-scored documents without machine scores: {0:?}")]
    CoverageGap(Vec<String>),
    #[error("{what} = {value} violates bound {bound}")]
    Bounds { what: &'static str, value: usize, bound: String },
    #[error("confidence level {0} outside (0, 1)")]
    InvalidLevel(f64),
}

type Result<T> = std::result::Result<T, InferenceError>;

fn check_level(level: f64) -> Result<f64> {
    if level > 0.0 && level < 1.0 {
        Ok(Normal::standard().inverse_cdf(0.5 + level / 2.0))
    } else {
        Err(InferenceError::InvalidLevel(level))
    }
}

struct Groups<'a> {
    treated: Vec<&'a [f64]>,
    control: Vec<&'a [f64]>,
    treated_ids: Vec<&'a str>,
    control_ids: Vec<&'a str>,
}

impl<'a> Groups<'a> {
    fn of(view: &'a NumericScoreView, labels: &LabelMap) -> Result<Self> {
        let mut g = Groups {
            treated: Vec::new(),
            control: Vec::new(),
            treated_ids: Vec::new(),
            control_ids: Vec::new(),
        };
        for (i, id) in view.document_ids().iter().enumerate() {
            match labels.get(id) {
                Some(GroupLabel::Treatment) => {
                    g.treated.push(view.row(i));
                    g.treated_ids.push(id);
                }
                Some(GroupLabel::Control) => {
                    g.control.push(view.row(i));
                    g.control_ids.push(id);
                }
                None => return Err(InferenceError::MissingLabel(id.clone())),
            }
        }
        Ok(g)
    }

    fn require(&self, min: usize) -> Result<()> {
        for (group, size) in [
            (GroupLabel::Treatment, self.treated.len()),
            (GroupLabel::Control, self.control.len()),
        ] {
            if size == 0 {
                return Err(InferenceError::EmptyGroup(group));
            }
            if size < min {
                return Err(InferenceError::GroupTooSmall { group, size, min });
            }
        }
        Ok(())
    }
}

fn mean_rows(rows: &[&[f64]], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for row in rows {
        for (o, x) in out.iter_mut().zip(row.iter()) {
            *o += x;
        }
    }
    let m = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= m);
    out
}

fn covariance_rows(rows: &[&[f64]], k: usize) -> DMatrix<f64> {
    let mean = mean_rows(rows, k);
    let mut cov = DMatrix::zeros(k, k);
    for row in rows {
        for a in 0..k {
            let da = row[a] - mean[a];
            for b in a..k {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (rows.len() - 1) as f64;
    for a in 0..k {
        for b in a..k {
            cov[(a, b)] /= denom;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    cov
}

fn variance_cols(rows: &[&[f64]], k: usize) -> Vec<f64> {
    let mean = mean_rows(rows, k);
    let mut out = vec![0.0; k];
    for row in rows {
        for j in 0..k {
            out[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let denom = (rows.len() - 1) as f64;
    out.iter_mut().for_each(|o| *o /= denom);
    out
}

/// Per-column difference of group means, treated minus control.
pub fn diff_in_means(view: &NumericScoreView, labels: &LabelMap) -> Result<Vec<f64>> {
    let g = Groups::of(view, labels)?;
    g.require(1)?;
    let k = view.n_cols();
    let m1 = mean_rows(&g.treated, k);
    let m0 = mean_rows(&g.control, k);
    Ok(m1.iter().zip(&m0).map(|(a, b)| a - b).collect())
}

/// Group means, treated then control.
pub fn group_means(view: &NumericScoreView, labels: &LabelMap) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = Groups::of(view, labels)?;
    g.require(1)?;
    let k = view.n_cols();
    Ok((mean_rows(&g.treated, k), mean_rows(&g.control, k)))
}

/// Analytic covariance matrix of `τ̂` across columns.
pub fn analytic_covariance(view: &NumericScoreView, labels: &LabelMap) -> Result<DMatrix<f64>> {
    let g = Groups::of(view, labels)?;
    g.require(2)?;
    let k = view.n_cols();
    let c1 = covariance_rows(&g.treated, k) / g.treated.len() as f64;
    let c0 = covariance_rows(&g.control, k) / g.control.len() as f64;
    Ok(c1 + c0)
}

/// Analytic variance of `τ̂` per column.
pub fn analytic_variance(view: &NumericScoreView, labels: &LabelMap) -> Result<Vec<f64>> {
    let g = Groups::of(view, labels)?;
    g.require(2)?;
    let k = view.n_cols();
    let v1 = variance_cols(&g.treated, k);
    let v0 = variance_cols(&g.control, k);
    let (h1, h0) = (g.treated.len() as f64, g.control.len() as f64);
    Ok(v1.iter().zip(&v0).map(|(a, b)| a / h1 + b / h0).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    Analytic,
    Bootstrap,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    #[default]
    Normal,
    Percentile,
}

/// Estimate for one numeric score column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThemeEffectEstimate {
    pub column: String,
    pub mean_treated: f64,
    pub se_treated: f64,
    pub mean_control: f64,
    pub se_control: f64,
    pub tau_hat: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub method: EstimateMethod,
}

/// Difference-in-means estimates for every column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateTable {
    pub h1: usize,
    pub h0: usize,
    pub level: f64,
    pub interval: IntervalKind,
    pub rows: Vec<ThemeEffectEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wald: Option<WaldResult>,
}

impl EstimateTable {
    /// Aligned text table: group means with standard errors and their
    /// difference, one line per column.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.column.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let cell = |m: f64, s: f64| format!("{m:.2} ({s:.2})");
        let _ = writeln!(
            out,
            "{:<width$}  {:>14}  {:>14}  {:>14}",
            "theme", "A", "B", "difference"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>14}  {:>14}  {:>14}",
                r.column,
                cell(r.mean_treated, r.se_treated),
                cell(r.mean_control, r.se_control),
                cell(r.tau_hat, r.std_error),
            );
        }
        let _ = writeln!(out, "h1 = {}, h0 = {}", self.h1, self.h0);
        if let Some(w) = &self.wald {
            let _ = writeln!(out, "Wald Z = {:.3}, dof = {}, p = {:.3}", w.statistic, w.dof, w.p_value);
        }
        out
    }
}

fn column_labels(view: &NumericScoreView) -> Vec<String> {
    view.columns().iter().map(|c| c.label()).collect()
}

/// Estimates with analytic standard errors and symmetric normal intervals.
pub fn estimate_analytic(view: &NumericScoreView, labels: &LabelMap, level: f64) -> Result<EstimateTable> {
    let z = check_level(level)?;
    let g = Groups::of(view, labels)?;
    g.require(2)?;
    let k = view.n_cols();
    let (h1, h0) = (g.treated.len(), g.control.len());
    let m1 = mean_rows(&g.treated, k);
    let m0 = mean_rows(&g.control, k);
    let v1 = variance_cols(&g.treated, k);
    let v0 = variance_cols(&g.control, k);
    let rows = column_labels(view)
        .into_iter()
        .enumerate()
        .map(|(j, column)| {
            let tau = m1[j] - m0[j];
            let (s1, s0) = ((v1[j] / h1 as f64).sqrt(), (v0[j] / h0 as f64).sqrt());
            let se = (s1 * s1 + s0 * s0).sqrt();
            ThemeEffectEstimate {
                column,
                mean_treated: m1[j],
                se_treated: s1,
                mean_control: m0[j],
                se_control: s0,
                tau_hat: tau,
                std_error: se,
                ci_low: tau - z * se,
                ci_high: tau + z * se,
                method: EstimateMethod::Analytic,
            }
        })
        .collect();
    Ok(EstimateTable {
        h1,
        h0,
        level,
        interval: IntervalKind::Normal,
        rows,
        wald: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub draws: usize,
    pub seed: u64,
}

/// Hold-out bootstrap of the group means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub draws: usize,
    pub seed: u64,
    pub h1: usize,
    pub h0: usize,
    pub mean_treated: Vec<f64>,
    pub mean_control: Vec<f64>,
    /// Covariance across draws of the treated-group mean vector.
    pub cov_treated: Vec<Vec<f64>>,
    pub cov_control: Vec<Vec<f64>>,
    pub se_treated: Vec<f64>,
    pub se_control: Vec<f64>,
    /// Standard error of the difference, from `Σ̂₁ + Σ̂₀`.
    pub se_diff: Vec<f64>,
    #[serde(skip)]
    diffs: Vec<Vec<f64>>,
}

impl BootstrapResult {
    pub fn cov_treated_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.cov_treated)
    }

    pub fn cov_control_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.cov_control)
    }

    /// Percentile interval of the bootstrap differences for column `j`.
    pub fn percentile_interval(&self, j: usize, level: f64) -> (f64, f64) {
        let mut d: Vec<f64> = self.diffs.iter().map(|row| row[j]).collect();
        d.sort_by(f64::total_cmp);
        let alpha = (1.0 - level) / 2.0;
        (quantile_sorted(&d, alpha), quantile_sorted(&d, 1.0 - alpha))
    }

    /// Wald test of equal group means using the bootstrap covariances.
    pub fn wald(&self) -> Result<WaldResult> {
        wald_test(
            &self.mean_treated,
            &self.mean_control,
            &self.cov_treated_matrix(),
            &self.cov_control_matrix(),
        )
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let k = rows.len();
    DMatrix::from_fn(k, k, |a, b| rows[a][b])
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|a| (0..m.ncols()).map(|b| m[(a, b)]).collect()).collect()
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn resample_mean<R: rand::Rng>(rows: &[&[f64]], k: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for _ in 0..rows.len() {
        let row = rows[rng.random_range(0..rows.len())];
        for (o, x) in out.iter_mut().zip(row.iter()) {
            *o += x;
        }
    }
    let m = rows.len() as f64;
    out.iter_mut().for_each(|o| *o /= m);
    out
}

/// Resamples each group with replacement, holding `h1` and `h0` fixed.
pub fn holdout_bootstrap(
    view: &NumericScoreView,
    labels: &LabelMap,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if config.draws < MIN_BOOTSTRAP_DRAWS {
        return Err(InferenceError::Bounds {
            what: "draws",
            value: config.draws,
            bound: format!(">= {MIN_BOOTSTRAP_DRAWS}"),
        });
    }
    let g = Groups::of(view, labels)?;
    g.require(1)?;
    let k = view.n_cols();
    let per_draw: Vec<(Vec<f64>, Vec<f64>)> = (0..config.draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(config.seed, b as u64);
            let m1 = resample_mean(&g.treated, k, &mut rng);
            let m0 = resample_mean(&g.control, k, &mut rng);
            (m1, m0)
        })
        .collect();
    let treated: Vec<&[f64]> = per_draw.iter().map(|(a, _)| a.as_slice()).collect();
    let control: Vec<&[f64]> = per_draw.iter().map(|(_, b)| b.as_slice()).collect();
    let c1 = covariance_rows(&treated, k);
    let c0 = covariance_rows(&control, k);
    let diag = |c: &DMatrix<f64>| (0..k).map(|j| c[(j, j)].max(0.0).sqrt()).collect::<Vec<_>>();
    let sum = &c1 + &c0;
    Ok(BootstrapResult {
        draws: config.draws,
        seed: config.seed,
        h1: g.treated.len(),
        h0: g.control.len(),
        mean_treated: mean_rows(&g.treated, k),
        mean_control: mean_rows(&g.control, k),
        se_treated: diag(&c1),
        se_control: diag(&c0),
        se_diff: diag(&sum),
        cov_treated: from_matrix(&c1),
        cov_control: from_matrix(&c0),
        diffs: per_draw
            .iter()
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect(),
    })
}

/// Estimates with bootstrap standard errors, a Wald test, and either normal
/// or percentile intervals.
pub fn estimate_bootstrap(
    view: &NumericScoreView,
    labels: &LabelMap,
    config: &BootstrapConfig,
    level: f64,
    interval: IntervalKind,
) -> Result<EstimateTable> {
    let z = check_level(level)?;
    let boot = holdout_bootstrap(view, labels, config)?;
    let rows = column_labels(view)
        .into_iter()
        .enumerate()
        .map(|(j, column)| {
            let tau = boot.mean_treated[j] - boot.mean_control[j];
            let se = boot.se_diff[j];
            let (ci_low, ci_high) = match interval {
                IntervalKind::Normal => (tau - z * se, tau + z * se),
                IntervalKind::Percentile => boot.percentile_interval(j, level),
            };
            ThemeEffectEstimate {
                column,
                mean_treated: boot.mean_treated[j],
                se_treated: boot.se_treated[j],
                mean_control: boot.mean_control[j],
                se_control: boot.se_control[j],
                tau_hat: tau,
                std_error: se,
                ci_low,
                ci_high,
                method: EstimateMethod::Bootstrap,
            }
        })
        .collect();
    Ok(EstimateTable {
        h1: boot.h1,
        h0: boot.h0,
        level,
        interval,
        rows,
        wald: Some(boot.wald()?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub statistic: f64,
    /// Rank of `Σ̂₁ + Σ̂₀`; equals the number of columns when it is invertible.
    pub dof: usize,
    pub p_value: f64,
}

/// Joint test of `μ₁ = μ₀` with statistic `Z = dᵀ(Σ̂₁ + Σ̂₀)⁺d`.
///
/// A singular covariance (collinear one-hot columns) is handled with the
/// Moore–Penrose pseudo-inverse and degrees of freedom equal to its numerical
/// rank.
pub fn wald_test(
    mu_treated: &[f64],
    mu_control: &[f64],
    sigma_treated: &DMatrix<f64>,
    sigma_control: &DMatrix<f64>,
) -> Result<WaldResult> {
    let k = mu_treated.len();
    for found in [mu_control.len(), sigma_treated.nrows(), sigma_treated.ncols(), sigma_control.nrows(), sigma_control.ncols()] {
        if found != k {
            return Err(InferenceError::DimensionMismatch { expected: k, found });
        }
    }
    let d = DVector::from_iterator(k, mu_treated.iter().zip(mu_control).map(|(a, b)| a - b));
    let sigma = sigma_treated + sigma_control;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let eig = sigma.symmetric_eigen();
    let largest = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = largest * RANK_TOLERANCE;
    let mut statistic = 0.0;
    let mut rank = 0;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > cutoff && lambda > 0.0 {
            let proj = eig.eigenvectors.column(i).dot(&d);
            statistic += proj * proj / lambda;
            rank += 1;
        }
    }
    let p_value = if rank == 0 || statistic <= 0.0 {
        1.0
    } else {
        let chi = ChiSquared::new(rank as f64).expect("positive dof");
        chi.sf(statistic)
    };
    Ok(WaldResult {
        statistic: statistic.max(0.0),
        dof: rank,
        p_value,
    })
}

struct Combined<'a> {
    machine_treated: Vec<&'a [f64]>,
    machine_control: Vec<&'a [f64]>,
    /// `(machine, human)` rows of labeled treated documents.
    labeled_treated: Vec<(&'a [f64], &'a [f64])>,
    labeled_control: Vec<(&'a [f64], &'a [f64])>,
}

impl<'a> Combined<'a> {
    fn of(machine: &'a NumericScoreView, human: &'a NumericScoreView, labels: &LabelMap) -> Result<Self> {
        if machine.columns() != human.columns() {
            return Err(InferenceError::ColumnMismatch);
        }
        let mg = Groups::of(machine, labels)?;
        let hg = Groups::of(human, labels)?;
        let missing: Vec<String> = human
            .document_ids()
            .iter()
            .filter(|id| machine.position(id).is_none())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(InferenceError::CoverageGap(missing));
        }
        let pair = |ids: &[&str], rows: &[&'a [f64]]| -> Vec<(&'a [f64], &'a [f64])> {
            ids.iter()
                .zip(rows)
                .map(|(id, &h)| (machine.row(machine.position(id).expect("checked")), h))
                .collect()
        };
        Ok(Combined {
            labeled_treated: pair(&hg.treated_ids, &hg.treated),
            labeled_control: pair(&hg.control_ids, &hg.control),
            machine_treated: mg.treated,
            machine_control: mg.control,
        })
    }

    fn require(&self, min: usize) -> Result<()> {
        for (group, h, l) in [
            (GroupLabel::Treatment, self.machine_treated.len(), self.labeled_treated.len()),
            (GroupLabel::Control, self.machine_control.len(), self.labeled_control.len()),
        ] {
            if h == 0 || l == 0 {
                return Err(InferenceError::EmptyGroup(group));
            }
            if l < min {
                return Err(InferenceError::GroupTooSmall { group, size: l, min });
            }
        }
        Ok(())
    }
}

fn mean_residual(pairs: &[(&[f64], &[f64])], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for (m, h) in pairs {
        for j in 0..k {
            out[j] += m[j] - h[j];
        }
    }
    let n = pairs.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

fn tau_dagger(c: &Combined<'_>, k: usize) -> Vec<f64> {
    let m1 = mean_rows(&c.machine_treated, k);
    let m0 = mean_rows(&c.machine_control, k);
    let r1 = mean_residual(&c.labeled_treated, k);
    let r0 = mean_residual(&c.labeled_control, k);
    (0..k).map(|j| m1[j] - m0[j] - (r1[j] - r0[j])).collect()
}

fn group_variance_term(pairs: &[(&[f64], &[f64])], h: usize, k: usize) -> Vec<f64> {
    let human: Vec<&[f64]> = pairs.iter().map(|(_, y)| *y).collect();
    let residuals: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(m, y)| m.iter().zip(y.iter()).map(|(a, b)| a - b).collect())
        .collect();
    let residuals: Vec<&[f64]> = residuals.iter().map(Vec::as_slice).collect();
    let vy = variance_cols(&human, k);
    let vd = variance_cols(&residuals, k);
    let l = pairs.len() as f64;
    let frac = l / h as f64;
    (0..k).map(|j| (frac * vy[j] + (1.0 - frac) * vd[j]) / l).collect()
}

/// `τ̂†` per column. The human view's documents form `ℒ`; the machine view
/// covers `ℋ`.
pub fn combined_estimator(
    machine: &NumericScoreView,
    human: &NumericScoreView,
    labels: &LabelMap,
) -> Result<Vec<f64>> {
    let c = Combined::of(machine, human, labels)?;
    c.require(1)?;
    Ok(tau_dagger(&c, machine.n_cols()))
}

/// Estimated variance of `τ̂†` per column.
pub fn combined_variance(
    machine: &NumericScoreView,
    human: &NumericScoreView,
    labels: &LabelMap,
) -> Result<Vec<f64>> {
    let c = Combined::of(machine, human, labels)?;
    c.require(2)?;
    let k = machine.n_cols();
    let v1 = group_variance_term(&c.labeled_treated, c.machine_treated.len(), k);
    let v0 = group_variance_term(&c.labeled_control, c.machine_control.len(), k);
    Ok(v1.iter().zip(&v0).map(|(a, b)| a + b).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedColumn {
    pub column: String,
    pub tau_dagger: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedEffectEstimate {
    pub l1: usize,
    pub l0: usize,
    pub h1: usize,
    pub h0: usize,
    pub level: f64,
    pub rows: Vec<CombinedColumn>,
}

impl CombinedEffectEstimate {
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.column.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>8}  {:>20}", "theme", "tau", "se", "interval");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.3}  {:>8.3}  {:>20}",
                r.column,
                r.tau_dagger,
                r.std_error,
                format!("[{:.3}, {:.3}]", r.ci_low, r.ci_high)
            );
        }
        let _ = writeln!(out, "l1 = {}, l0 = {}, h1 = {}, h0 = {}", self.l1, self.l0, self.h1, self.h0);
        out
    }
}

/// `τ̂†` with analytic standard errors and normal intervals.
pub fn combined_estimate(
    machine: &NumericScoreView,
    human: &NumericScoreView,
    labels: &LabelMap,
    level: f64,
) -> Result<CombinedEffectEstimate> {
    let z = check_level(level)?;
    let c = Combined::of(machine, human, labels)?;
    c.require(2)?;
    let k = machine.n_cols();
    let tau = tau_dagger(&c, k);
    let v1 = group_variance_term(&c.labeled_treated, c.machine_treated.len(), k);
    let v0 = group_variance_term(&c.labeled_control, c.machine_control.len(), k);
    let rows = column_labels(machine)
        .into_iter()
        .enumerate()
        .map(|(j, column)| {
            let se = (v1[j] + v0[j]).sqrt();
            CombinedColumn {
                column,
                tau_dagger: tau[j],
                std_error: se,
                ci_low: tau[j] - z * se,
                ci_high: tau[j] + z * se,
            }
        })
        .collect();
    Ok(CombinedEffectEstimate {
        l1: c.labeled_treated.len(),
        l0: c.labeled_control.len(),
        h1: c.machine_treated.len(),
        h0: c.machine_control.len(),
        level,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCostConfig {
    pub ells: Vec<usize>,
    pub outer: usize,
    pub inner: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCostPoint {
    pub theme_id: String,
    pub ell: usize,
    pub l1: usize,
    pub l0: usize,
    pub variance: f64,
}

/// Bootstrap variance of `τ̂†` as a function of the number of human scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCostCurve {
    pub outer: usize,
    pub inner: usize,
    pub seed: u64,
    pub points: Vec<LabelCostPoint>,
}

impl LabelCostCurve {
    /// `theme_id,ell,variance` rows, grouped by column then `ℓ`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theme_id,ell,variance\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{:.10e}", p.theme_id, p.ell, p.variance);
        }
        out
    }

    /// Variances for one column, in grid order.
    pub fn series(&self, theme_id: &str) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .filter(|p| p.theme_id == theme_id)
            .map(|p| (p.ell, p.variance))
            .collect()
    }

    pub fn theme_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.points
            .iter()
            .filter(|p| seen.insert(p.theme_id.clone()))
            .map(|p| p.theme_id.clone())
            .collect()
    }
}

/// Nested bootstrap of `τ̂†` over a grid of `ℓ`.
///
/// The outer loop resamples each group of the hold-out with replacement; the
/// inner loop marks `ℓ1` treated and `ℓ0` control documents of the resample as
/// human-scored (`ℓ1/ℓ ≈ h1/h`, rounded half up) and evaluates `τ̂†`. The
/// reported value is the variance over all `outer × inner` draws. Outer
/// resamples are shared across the grid.
pub fn label_cost_curve(
    machine: &NumericScoreView,
    human: &NumericScoreView,
    labels: &LabelMap,
    config: &LabelCostConfig,
) -> Result<LabelCostCurve> {
    for (what, value) in [("outer", config.outer), ("inner", config.inner)] {
        if value == 0 {
            return Err(InferenceError::Bounds { what, value, bound: ">= 1".into() });
        }
    }
    if machine.columns() != human.columns() {
        return Err(InferenceError::ColumnMismatch);
    }
    let mg = Groups::of(machine, labels)?;
    mg.require(1)?;
    let pairs = |ids: &[&str], rows: &[&[f64]]| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        ids.iter()
            .zip(rows)
            .map(|(id, m)| {
                let i = human
                    .position(id)
                    .ok_or_else(|| InferenceError::CoverageGap(vec![id.to_string()]))?;
                Ok((m.to_vec(), human.row(i).to_vec()))
            })
            .collect()
    };
    let treated = pairs(&mg.treated_ids, &mg.treated)?;
    let control = pairs(&mg.control_ids, &mg.control)?;
    let (h1, h0) = (treated.len(), control.len());
    let h = h1 + h0;
    let k = machine.n_cols();
    let mut grid = Vec::with_capacity(config.ells.len());
    for &ell in &config.ells {
        let (l1, l0) = labeled_counts(ell, h1, h);
        if ell == 0 || ell > h || l1 == 0 || l0 == 0 || l1 > h1 || l0 > h0 {
            return Err(InferenceError::Bounds {
                what: "ell",
                value: ell,
                bound: format!("(0, {h}] with both groups labeled"),
            });
        }
        grid.push((ell, l1, l0));
    }

    let one_draw = |sample_t: &[usize], sample_c: &[usize], l1: usize, l0: usize, rng: &mut rng::Rng| {
        let pick_t = sample(rng, h1, l1);
        let pick_c = sample(rng, h0, l0);
        let mut tau = vec![0.0; k];
        for (sample, rows, sign, picks, l) in [
            (sample_t, &treated, 1.0, &pick_t, l1),
            (sample_c, &control, -1.0, &pick_c, l0),
        ] {
            let hm = sample.len() as f64;
            for &i in sample {
                for j in 0..k {
                    tau[j] += sign * rows[i].0[j] / hm;
                }
            }
            for p in picks.iter() {
                let (m, y) = &rows[sample[p]];
                for j in 0..k {
                    tau[j] -= sign * (m[j] - y[j]) / l as f64;
                }
            }
        }
        tau
    };

    let per_outer: Vec<Vec<Vec<Vec<f64>>>> = (0..config.outer)
        .into_par_iter()
        .map(|o| {
            let mut outer_rng = rng::stream(config.seed, o as u64);
            let sample_t: Vec<usize> = (0..h1).map(|_| outer_rng.random_range(0..h1)).collect();
            let sample_c: Vec<usize> = (0..h0).map(|_| outer_rng.random_range(0..h0)).collect();
            grid.iter()
                .map(|&(ell, l1, l0)| {
                    let mut inner_rng =
                        rng::stream(rng::derive_seed(config.seed, &format!("label-cost:{ell}")), o as u64);
                    (0..config.inner)
                        .map(|_| one_draw(&sample_t, &sample_c, l1, l0, &mut inner_rng))
                        .collect()
                })
                .collect()
        })
        .collect();

    let labels_out = column_labels(machine);
    let mut points = Vec::with_capacity(k * grid.len());
    for (j, theme_id) in labels_out.iter().enumerate() {
        for (g, &(ell, l1, l0)) in grid.iter().enumerate() {
            let values: Vec<f64> = per_outer
                .iter()
                .flat_map(|outer| outer[g].iter().map(move |tau| tau[j]))
                .collect();
            points.push(LabelCostPoint {
                theme_id: theme_id.clone(),
                ell,
                l1,
                l0,
                variance: sample_variance(&values),
            });
        }
    }
    Ok(LabelCostCurve {
        outer: config.outer,
        inner: config.inner,
        seed: config.seed,
        points,
    })
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Map from column label to value, for reports.
pub fn by_column(view: &NumericScoreView, values: &[f64]) -> BTreeMap<String, f64> {
    column_labels(view).into_iter().zip(values.iter().copied()).collect()
}
