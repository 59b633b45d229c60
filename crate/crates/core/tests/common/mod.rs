#![allow(dead_code)]

use causal_themes::themes::NumericScoreView;
use causal_themes::{GroupLabel, LabelMap};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn id(i: usize) -> String {
    format!("doc{i:05}")
}

/// One-column view with `h1` treated rows from `N(mu1, sd1²)` and `h0`
/// control rows from `N(mu0, sd0²)`.
pub fn normal_view<R: Rng>(
    rng: &mut R,
    (h1, mu1, sd1): (usize, f64, f64),
    (h0, mu0, sd0): (usize, f64, f64),
) -> (NumericScoreView, LabelMap) {
    let t = Normal::new(mu1, sd1).unwrap();
    let c = Normal::new(mu0, sd0).unwrap();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = LabelMap::new();
    for i in 0..h1 + h0 {
        let treated = i < h1;
        ids.push(id(i));
        rows.push(vec![if treated { t.sample(rng) } else { c.sample(rng) }]);
        labels.insert(id(i), if treated { GroupLabel::Treatment } else { GroupLabel::Control });
    }
    (NumericScoreView::from_rows(ids, &["X"], rows), labels)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}
