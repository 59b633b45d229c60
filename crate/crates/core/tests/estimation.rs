mod common;

use causal_themes::inference::{
    analytic_variance, combined_estimate, diff_in_means, estimate_analytic, estimate_bootstrap, BootstrapConfig,
    IntervalKind,
};
use causal_themes::rng;
use causal_themes::themes::NumericScoreView;
use common::{mean, normal_view, variance};
use rand::Rng;
use rayon::prelude::*;

#[test]
fn sampling_variance_matches_analytic_formula() {
    // sigma1 = 2, sigma0 = 1, h1 = 1200, h0 = 800
    let truth = 4.0 / 1200.0 + 1.0 / 800.0;
    let reps = 20_000;
    let taus: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(77, i);
            let (v, w) = normal_view(&mut r, (1200, 1.0, 2.0), (800, 0.0, 1.0));
            diff_in_means(&v, &w).unwrap()[0]
        })
        .collect();
    let mc = variance(&taus);
    assert!((mc / truth - 1.0).abs() < 0.05, "{mc} vs {truth}");
    assert!((mean(&taus) - 1.0).abs() < 4.0 * (truth / reps as f64).sqrt());

    let mut r = rng::seeded(1);
    let (v, w) = normal_view(&mut r, (1200, 1.0, 2.0), (800, 0.0, 1.0));
    let analytic = analytic_variance(&v, &w).unwrap()[0];
    assert!((analytic / truth - 1.0).abs() < 0.1);
}

#[test]
fn analytic_intervals_cover() {
    let reps = 2000;
    let covered = (0..reps)
        .into_par_iter()
        .filter(|&i| {
            let mut r = rng::stream(13, i);
            let (v, w) = normal_view(&mut r, (100, 0.5, 1.0), (100, 0.0, 1.5));
            let row = &estimate_analytic(&v, &w, 0.95).unwrap().rows[0];
            row.ci_low <= 0.5 && 0.5 <= row.ci_high
        })
        .count();
    let rate = covered as f64 / reps as f64;
    assert!((rate - 0.95).abs() < 0.02, "coverage {rate}");
}

#[test]
fn bootstrap_agrees_with_analytic_standard_error() {
    let mut r = rng::seeded(21);
    let (v, w) = normal_view(&mut r, (250, 0.0, 1.0), (250, 0.3, 2.0));
    let a = estimate_analytic(&v, &w, 0.95).unwrap();
    let b = estimate_bootstrap(&v, &w, &BootstrapConfig { draws: 2000, seed: 4 }, 0.95, IntervalKind::Normal).unwrap();
    let (sa, sb) = (a.rows[0].std_error, b.rows[0].std_error);
    assert!((sb / sa - 1.0).abs() < 0.1, "{sb} vs {sa}");
    assert_eq!(a.rows[0].tau_hat, b.rows[0].tau_hat);
}

/// Machine scores are human scores plus group-dependent error, so the machine
/// difference in means is biased.
fn biased_machine<R: Rng>(human: &NumericScoreView, labels: &causal_themes::LabelMap, r: &mut R) -> NumericScoreView {
    let rows = human
        .document_ids()
        .iter()
        .zip(human.rows())
        .map(|(id, row)| {
            let shift = if labels[id].is_treatment() { 0.8 } else { -0.2 };
            vec![row[0] + shift + r.random_range(-0.5..0.5)]
        })
        .collect();
    NumericScoreView::from_rows(human.document_ids().to_vec(), &["X"], rows)
}

#[test]
fn combined_estimator_is_unbiased_under_biased_machine_scores() {
    let reps = 3000;
    let results: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(99, i);
            let (human, w) = normal_view(&mut r, (200, 1.0, 1.0), (200, 0.0, 1.0));
            let machine = biased_machine(&human, &w, &mut r);
            let labeled: Vec<String> = (0..50).chain(200..250).map(common::id).collect();
            let human_l = human.select(&labeled).unwrap();
            let est = combined_estimate(&machine, &human_l, &w, 0.95).unwrap();
            let row = &est.rows[0];
            (row.tau_dagger, row.std_error)
        })
        .collect();
    let taus: Vec<f64> = results.iter().map(|r| r.0).collect();
    let se = (variance(&taus) / reps as f64).sqrt();
    assert!((mean(&taus) - 1.0).abs() < 3.0 * se, "mean {}", mean(&taus));
    // analytic standard error tracks the Monte Carlo spread
    let mean_se = mean(&results.iter().map(|r| r.1).collect::<Vec<_>>());
    assert!((mean_se / variance(&taus).sqrt() - 1.0).abs() < 0.1);
}
