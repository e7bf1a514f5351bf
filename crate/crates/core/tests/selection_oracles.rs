use cme_core::selection::{
    gini, roc_curve, selection_probability, summarize, ConfidenceSeries, IndicatorKind,
};
use proptest::prelude::*;

fn series(deltas: Vec<f64>) -> ConfidenceSeries {
    ConfidenceSeries::new(IndicatorKind::Gcme, deltas).unwrap()
}

/// Pairwise oracle: with positive and negative decisions as two classes scored
/// by `|Δ|`, the Gini coefficient is `P(|Δ+| > |Δ-|) - P(|Δ+| < |Δ-|)`.
fn pairwise_gini(deltas: &[f64]) -> f64 {
    let pos: Vec<f64> = deltas.iter().filter(|&&d| d > 0.0).copied().collect();
    let neg: Vec<f64> = deltas.iter().filter(|&&d| d < 0.0).map(|d| -d).collect();
    let mut score = 0i64;
    for p in &pos {
        for n in &neg {
            score += (p > n) as i64 - (p < n) as i64;
        }
    }
    score as f64 / (pos.len() * neg.len()) as f64
}

/// Deltas on a coarse grid so that magnitude ties and exact zeros occur.
fn deltas() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-12i32..=12).prop_map(|k| k as f64 / 4.0), 1..120)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gini_equals_pairwise_ranking_oracle(d in deltas()) {
        let has_both = d.iter().any(|&x| x > 0.0) && d.iter().any(|&x| x < 0.0);
        prop_assume!(has_both);
        let g = gini(&roc_curve(&series(d.clone())).unwrap());
        prop_assert!((g - pairwise_gini(&d)).abs() < 1e-12, "{} vs {}", g, pairwise_gini(&d));
    }

    #[test]
    fn strictly_increasing_sign_preserving_maps_change_nothing(d in deltas()) {
        let base = summarize(&series(d.clone())).unwrap();
        for f in [|x: f64| x * x * x, |x: f64| x.signum() * x.abs().ln_1p(), |x: f64| 7.0 * x] {
            let mapped = summarize(&series(d.iter().map(|&x| f(x)).collect())).unwrap();
            prop_assert_eq!(mapped.selection_probability, base.selection_probability);
            prop_assert!((mapped.gini - base.gini).abs() < 1e-12);
            let points = |s: &cme_core::selection::SelectionSummary| -> Vec<(f64, f64)> {
                s.roc.points.iter().map(|p| (p.fpr, p.tpr)).collect()
            };
            prop_assert_eq!(points(&mapped), points(&base));
        }
    }

    #[test]
    fn scores_stay_in_range_and_rates_are_monotone(d in deltas()) {
        let s = series(d);
        let p = selection_probability(&s).unwrap();
        let roc = roc_curve(&s).unwrap();
        let g = gini(&roc);
        prop_assert!((-1.0..=1.0).contains(&p));
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&g));
        prop_assert_eq!((roc.points[0].fpr, roc.points[0].tpr), (0.0, 0.0));
        for w in roc.points.windows(2) {
            prop_assert!(w[1].threshold <= w[0].threshold);
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            prop_assert!(w[1].fpr <= 1.0 && w[1].tpr <= 1.0);
        }
        let c = s.counts();
        prop_assert_eq!(c.total(), s.deltas.len());
    }

    #[test]
    fn negating_every_decision_negates_the_scores(d in deltas()) {
        let has_both = d.iter().any(|&x| x > 0.0) && d.iter().any(|&x| x < 0.0);
        prop_assume!(has_both);
        let a = summarize(&series(d.clone())).unwrap();
        let b = summarize(&series(d.iter().map(|x| -x).collect())).unwrap();
        prop_assert!((a.selection_probability + b.selection_probability).abs() < 1e-12);
        prop_assert!((a.gini + b.gini).abs() < 1e-12);
    }
}

#[test]
fn symmetric_random_deltas_hug_the_diagonal() {
    use rand::{Rng, SeedableRng};
    let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let d: Vec<f64> = (0..50_000)
        .map(|_| g.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let s = summarize(&series(d)).unwrap();
    assert!(s.selection_probability.abs() < 0.02);
    assert!(s.gini.abs() < 0.02);
    for p in &s.roc.points {
        assert!((p.tpr - p.fpr).abs() < 0.02);
    }
}
