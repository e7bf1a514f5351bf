//! Random small instances shared by the oracle tests.
#![allow(dead_code)]

use cme_core::enkf::{forecast_stats, Ensemble, ForecastStats, InflationSpec};
use cme_core::twin::{DiagonalCovariance, ObservationBatch, ObservationOperator};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub stats: ForecastStats,
    pub ensemble: Ensemble,
    pub inflation: InflationSpec,
    pub y: ObservationBatch,
    pub h: ObservationOperator,
    pub r: DiagonalCovariance,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random ensemble of `n` members on `m` variables, observed at `d` random
/// locations with random variances in [0.2, 2].
pub fn instance(rng: &mut ChaCha8Rng, m: usize, n: usize, d: usize) -> Instance {
    let members = DMatrix::from_fn(m, n, |_, _| 3.0 + 1.5 * normal(rng));
    let ensemble = Ensemble::new(members).unwrap();
    let inflation = InflationSpec::new(1.0 + 0.2 * rng.gen::<f64>()).unwrap();
    let stats = forecast_stats(&ensemble, inflation);
    let mut idx = sample(rng, m, d).into_vec();
    idx.sort_unstable();
    let h = ObservationOperator::new(idx, m).unwrap();
    let r =
        DiagonalCovariance::new((0..d).map(|_| 0.2 + 1.8 * rng.gen::<f64>()).collect()).unwrap();
    let y = ObservationBatch {
        time_index: 0,
        values: (0..d).map(|_| 3.0 + 2.0 * normal(rng)).collect(),
    };
    Instance {
        stats,
        ensemble,
        inflation,
        y,
        h,
        r,
    }
}

/// Random dimensions `m in [1, max_m]`, `n in [2, max_n]`, `d in [1, min(m, max_d)]`.
pub fn random_instance(rng: &mut ChaCha8Rng, max_m: usize, max_n: usize, max_d: usize) -> Instance {
    let m = rng.gen_range(1..=max_m);
    let n = rng.gen_range(2..=max_n);
    let d = rng.gen_range(1..=m.min(max_d));
    instance(rng, m, n, d)
}

pub fn sample_covariance(e: &Ensemble) -> DMatrix<f64> {
    let a = e.anomalies();
    &a * a.transpose() / (e.size() - 1) as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Largest entrywise difference relative to the largest entry of `b`.
pub fn mat_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

pub fn vec_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}
