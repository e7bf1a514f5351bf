mod common;

use cme_core::enkf::{
    da_cycle, etkf_analysis, forecast_stats, letkf_analysis, Ensemble, FilterSetup, InflationSpec,
};
use cme_core::localization::{LocalizationSpec, Taper};
use cme_core::model::{L95Config, StateVector};
use cme_core::twin::{
    generate_truth, synthesize_observations, DiagonalCovariance, ObservationBatch,
    ObservationOperator,
};
use common::{instance, mat_rel_err, normal, random_instance, rng, sample_covariance, vec_rel_err};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Textbook Kalman update of `(mean, P)` with a dense gain.
fn dense_kalman(
    mean: &DVector<f64>,
    p: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let s = h * p * h.transpose() + r;
    let gain = p * h.transpose() * s.try_inverse().expect("innovation covariance invertible");
    let xa = mean + &gain * (y - h * mean);
    let m = mean.len();
    let pa = (DMatrix::identity(m, m) - &gain * h) * p;
    (xa, pa)
}

#[test]
fn etkf_matches_dense_kalman_update() {
    let mut g = rng(11);
    for _ in 0..300 {
        let inst = random_instance(&mut g, 8, 8, 8);
        let analysis = etkf_analysis(&inst.stats, &inst.y, &inst.h, &inst.r).unwrap();
        let p = inst.stats.covariance();
        let (xa, pa) = dense_kalman(
            &inst.stats.mean,
            &p,
            &inst.h.dense(),
            &inst.r.dense(),
            &DVector::from_vec(inst.y.values.clone()),
        );
        assert!(vec_rel_err(&analysis.mean(), &xa) < 1e-10);
        assert!(mat_rel_err(&sample_covariance(&analysis), &pa) < 1e-10);
    }
}

#[test]
fn scalar_state_matches_scalar_kalman_formula() {
    let mut g = rng(12);
    for n in [2, 5, 50, 400] {
        let inst = instance(&mut g, 1, n, 1);
        let m = inst.stats.mean[0];
        let p = inst.stats.covariance()[(0, 0)];
        let r = inst.r.variances()[0];
        let y = inst.y.values[0];
        let analysis = etkf_analysis(&inst.stats, &inst.y, &inst.h, &inst.r).unwrap();
        let mean = analysis.mean()[0];
        let var = sample_covariance(&analysis)[(0, 0)];
        assert!((mean - (m + p * (y - m) / (p + r))).abs() < 1e-12 * m.abs().max(1.0));
        assert!((var - p * r / (p + r)).abs() < 1e-12 * var.max(1e-300));
    }
}

#[test]
fn scalar_formula_with_large_sampled_ensemble() {
    // Members drawn from N(m, p): sampled moments approach the exact scalar update.
    let mut g = rng(13);
    let (m, p, r, y): (f64, f64, f64, f64) = (2.0, 1.5, 0.5, 3.0);
    let n = 2_000;
    let members = DMatrix::from_fn(1, n, |_, _| m + p.sqrt() * normal(&mut g));
    let stats = forecast_stats(&Ensemble::new(members).unwrap(), InflationSpec::none());
    let h = ObservationOperator::identity(1);
    let rcov = DiagonalCovariance::new(vec![r]).unwrap();
    let batch = ObservationBatch {
        time_index: 0,
        values: vec![y],
    };
    let analysis = etkf_analysis(&stats, &batch, &h, &rcov).unwrap();
    let tol = 5.0 / (n as f64).sqrt();
    assert!((analysis.mean()[0] - (m + p * (y - m) / (p + r))).abs() < tol);
    assert!((sample_covariance(&analysis)[(0, 0)] - p * r / (p + r)).abs() < tol);
}

#[test]
fn letkf_with_zero_cut_off_is_a_scalar_update_per_gridpoint() {
    let mut g = rng(14);
    let m = 12;
    let inst = instance(&mut g, m, 6, m);
    let h = ObservationOperator::identity(m);
    let loc = LocalizationSpec::new(3.0, 0.0, Taper::GaspariCohn, m).unwrap();
    let out = letkf_analysis(&inst.stats, &inst.y, &h, &inst.r, &loc).unwrap();
    assert_eq!(out.empty_domains, 0);
    let analysis = out.ensemble;
    let p = inst.stats.covariance();
    let pa = sample_covariance(&analysis);
    for s in 0..m {
        let (xm, ps, r, y) = (
            inst.stats.mean[s],
            p[(s, s)],
            inst.r.variances()[s],
            inst.y.values[s],
        );
        let mean = analysis.mean()[s];
        assert!((mean - (xm + ps * (y - xm) / (ps + r))).abs() < 1e-12 * xm.abs().max(1.0));
        assert!((pa[(s, s)] - ps * r / (ps + r)).abs() < 1e-12 * ps.max(1e-300));
    }
}

#[test]
fn letkf_without_localization_equals_etkf() {
    let mut g = rng(15);
    for _ in 0..100 {
        let inst = random_instance(&mut g, 10, 8, 10);
        let m = inst.stats.state_dim();
        let global = etkf_analysis(&inst.stats, &inst.y, &inst.h, &inst.r).unwrap();
        let local = letkf_analysis(
            &inst.stats,
            &inst.y,
            &inst.h,
            &inst.r,
            &LocalizationSpec::disabled(m),
        )
        .unwrap()
        .ensemble;
        assert!(mat_rel_err(local.members(), global.members()) < 1e-9);
    }
}

fn rotate_rows(a: &DMatrix<f64>, shift: usize) -> DMatrix<f64> {
    let m = a.nrows();
    DMatrix::from_fn(m, a.ncols(), |i, j| a[((i + m - shift) % m, j)])
}

fn rotate(v: &[f64], shift: usize) -> Vec<f64> {
    let m = v.len();
    (0..m).map(|i| v[(i + m - shift) % m]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn letkf_is_rotation_equivariant(seed in any::<u64>(), shift in 1usize..20, radius in 1.0f64..6.0) {
        let m = 20;
        let mut g = rng(seed);
        let inst = instance(&mut g, m, 6, m);
        let h = ObservationOperator::identity(m);
        let loc = LocalizationSpec::gaspari_cohn(radius, m).unwrap();
        let base = letkf_analysis(&inst.stats, &inst.y, &h, &inst.r, &loc).unwrap().ensemble;

        let rotated = forecast_stats(&Ensemble::new(rotate_rows(inst.ensemble.members(), shift)).unwrap(), inst.inflation);
        let y = ObservationBatch { time_index: 0, values: rotate(&inst.y.values, shift) };
        let r = DiagonalCovariance::new(rotate(inst.r.variances(), shift)).unwrap();
        let out = letkf_analysis(&rotated, &y, &h, &r, &loc).unwrap().ensemble;
        let err = mat_rel_err(out.members(), &rotate_rows(base.members(), shift));
        prop_assert!(err < 1e-10, "relative error {err:e}");
    }

    #[test]
    fn analyses_keep_anomalies_zero_sum(seed in any::<u64>()) {
        let mut g = rng(seed);
        let inst = random_instance(&mut g, 10, 8, 10);
        let m = inst.stats.state_dim();
        let global = etkf_analysis(&inst.stats, &inst.y, &inst.h, &inst.r).unwrap();
        let local = letkf_analysis(&inst.stats, &inst.y, &inst.h, &inst.r,
            &LocalizationSpec::gaspari_cohn(2.0, m).unwrap()).unwrap().ensemble;
        for e in [global, local] {
            let scale = e.members().amax().max(1.0);
            for row in e.anomalies().row_iter() {
                prop_assert!(row.sum().abs() < 1e-12 * scale * e.size() as f64);
            }
        }
    }
}

/// Max-norm analysis error per cycle of a run with observation variance 1e-30.
fn noiseless_run(n: usize, loc: Option<LocalizationSpec>, cycles: usize) -> Vec<f64> {
    let m = 40;
    let model = L95Config::default();
    let h = ObservationOperator::identity(m);
    let r = DiagonalCovariance::uniform(1e-30, m).unwrap();
    let truth = generate_truth(&model, cycles, 1, 5).unwrap();
    let obs = synthesize_observations(&truth, &h, &r, 5).unwrap();
    let mut g = rng(16);
    let x0 = truth[0].as_slice();
    let members = DMatrix::from_fn(m, n, |i, _| x0[i] + normal(&mut g));
    let setup = FilterSetup::new(
        model,
        1,
        h,
        r,
        InflationSpec::new(1.02).unwrap(),
        loc.as_ref(),
    )
    .unwrap();
    let mut ensemble = Ensemble::new(members).unwrap();
    let mut errors = Vec::new();
    for (k, (y, xt)) in obs.iter().zip(&truth).enumerate() {
        ensemble = if k == 0 {
            setup.analyse(&ensemble, y).unwrap().1
        } else {
            da_cycle(ensemble, y, &setup).unwrap().1
        };
        errors.push((ensemble.mean() - DVector::from_column_slice(xt.as_slice())).amax());
    }
    errors
}

#[test]
fn noiseless_observations_pull_the_analysis_onto_the_truth() {
    // An ensemble spanning the state space fits noiseless observations at once.
    let global = noiseless_run(41, None, 30);
    let worst = global.iter().cloned().fold(0.0, f64::max);
    assert!(worst < 1e-5, "global max error {worst:e}");
    // A localized 10-member filter converges onto the truth after a spin-up.
    let local = noiseless_run(
        10,
        Some(LocalizationSpec::gaspari_cohn(5.0, 40).unwrap()),
        200,
    );
    let late = local[150..].iter().cloned().fold(0.0, f64::max);
    assert!(late < 1e-5, "localized max error after spin-up {late:e}");
}

#[test]
fn localized_filter_tracks_the_truth() {
    // N=10, rho_loc=5, correct model: time-mean RMSE^t well below the observation std.
    let m = 40;
    let model = L95Config::default();
    let h = ObservationOperator::identity(m);
    let r = DiagonalCovariance::uniform(1.0, m).unwrap();
    let truth = generate_truth(&model, 3000, 1, 21).unwrap();
    let obs = synthesize_observations(&truth, &h, &r, 21).unwrap();
    let loc = LocalizationSpec::gaspari_cohn(5.0, m).unwrap();
    let setup = FilterSetup::new(
        model,
        1,
        h,
        r,
        InflationSpec::new(1.02).unwrap(),
        Some(&loc),
    )
    .unwrap();
    let mut g = rng(17);
    let x0 = truth[0].as_slice();
    let mut ensemble =
        Ensemble::new(DMatrix::from_fn(m, 10, |i, _| x0[i] + normal(&mut g))).unwrap();
    let mut sq = 0.0;
    let mut count = 0;
    for (k, (y, xt)) in obs.iter().zip(&truth).enumerate() {
        ensemble = if k == 0 {
            setup.analyse(&ensemble, y).unwrap().1
        } else {
            setup.cycle(ensemble, y).unwrap().1
        };
        if k >= 1000 {
            let e = ensemble.mean() - DVector::from_column_slice(xt.as_slice());
            sq += (e.norm_squared() / m as f64).sqrt();
            count += 1;
        }
    }
    let mean_rmse = sq / count as f64;
    assert!(mean_rmse < 0.5, "time-mean RMSE^t {mean_rmse}");
}

#[test]
fn filter_cycle_is_deterministic_across_thread_counts() {
    let m = 40;
    let model = L95Config::default();
    let h = ObservationOperator::identity(m);
    let r = DiagonalCovariance::uniform(1.0, m).unwrap();
    let truth = generate_truth(&model, 50, 1, 3).unwrap();
    let obs = synthesize_observations(&truth, &h, &r, 3).unwrap();
    let loc = LocalizationSpec::gaspari_cohn(5.0, m).unwrap();
    let setup = FilterSetup::new(
        model,
        1,
        h,
        r,
        InflationSpec::new(1.03).unwrap(),
        Some(&loc),
    )
    .unwrap();
    let x0: &StateVector = &truth[0];
    let start = DMatrix::from_fn(m, 10, |i, j| {
        x0.as_slice()[i] + ((i * 13 + j * 7) % 11) as f64 / 5.0 - 1.0
    });
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let mut e = Ensemble::new(start.clone()).unwrap();
            let mut stats = Vec::new();
            for y in &obs {
                let (s, a) = setup.cycle(e, y).unwrap();
                stats.push(s);
                e = a;
            }
            (stats, e)
        })
    };
    let (s1, e1) = run(1);
    let (s4, e4) = run(4);
    assert_eq!(e1, e4);
    assert_eq!(s1, s4);
}

/// Row `s` of the localized analysis mean from a dense Kalman gain restricted
/// to the observations selected for `s`, with tapered precisions.
fn local_dense_mean(
    inst_stats: &cme_core::enkf::ForecastStats,
    y: &ObservationBatch,
    r: &DiagonalCovariance,
    loc: &LocalizationSpec,
    s: usize,
) -> f64 {
    let m = inst_stats.state_dim();
    let h = ObservationOperator::identity(m);
    let sel = cme_core::localization::select_local_obs(s, &h, loc);
    let vars: Vec<f64> = sel.obs.iter().map(|&o| r.variances()[o]).collect();
    let prec = cme_core::localization::local_precision(&vars, &sel.distances, loc);
    let used: Vec<(usize, f64)> = sel
        .obs
        .iter()
        .zip(&prec)
        .filter(|(_, p)| **p > 0.0)
        .map(|(o, p)| (*o, *p))
        .collect();
    let d = used.len();
    let p = inst_stats.covariance();
    let hl = DMatrix::from_fn(d, m, |i, j| if used[i].0 == j { 1.0 } else { 0.0 });
    let rl = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 / used[i].1 } else { 0.0 });
    let delta = DVector::from_fn(d, |i, _| y.values[used[i].0] - inst_stats.mean[used[i].0]);
    let gain = &p * hl.transpose() * (&hl * &p * hl.transpose() + rl).try_inverse().unwrap();
    inst_stats.mean[s] + (gain * delta)[s]
}

#[test]
fn letkf_rows_match_local_dense_kalman_gain() {
    let mut g = rng(18);
    for case in 0..60 {
        let m = 20;
        let inst = instance(&mut g, m, 3 + case % 8, m);
        let h = ObservationOperator::identity(m);
        let loc = LocalizationSpec::gaspari_cohn(1.0 + (case % 7) as f64, m).unwrap();
        let mean = letkf_analysis(&inst.stats, &inst.y, &h, &inst.r, &loc)
            .unwrap()
            .ensemble
            .mean();
        for s in 0..m {
            let oracle = local_dense_mean(&inst.stats, &inst.y, &inst.r, &loc, s);
            assert!(
                (mean[s] - oracle).abs() < 1e-10 * oracle.abs().max(1.0),
                "case {case} s {s}: {} vs {oracle}",
                mean[s]
            );
        }
    }
}
