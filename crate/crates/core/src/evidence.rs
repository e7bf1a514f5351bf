//! Contextual model evidence (CME) estimators.
//!
//! Every estimator returns one cycle's log factor,
//! `-(d/2) ln 2π - ½ ln|Σ| - ½ δ^T Σ^{-1} δ` with `δ = y - H x̄^f`, for some
//! choice of the innovation covariance `Σ`:
//!
//! * global (G-CME): `Σ = H P^f H^T + R`, dense or through the ensemble-space
//!   identities `|Σ| = |R| |I_N + Δ|` and
//!   `δ^T Σ^{-1} δ = δ^T R^{-1} δ - u^T (I_N + Δ)^{-1} u`
//!   with `Δ = (HX)^T R^{-1} (HX)` and `u = (HX)^T R^{-1} δ`;
//! * local: the same restricted to the observations of one gridpoint's domain,
//!   with the tapered precision of the LETKF;
//! * covariance-localized (GL-CME): `Σ = H (C ∘ P^f) H^T + R`.
//!
//! Factors are kept in log space; window evidence is the sum of per-cycle logs.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enkf::{innovation, ForecastStats};
use crate::error::{Error, Result};
use crate::linalg::spd_logdet_quad;
use crate::localization::{LocalDomain, LocalDomains, LocalizationSpec};
use crate::twin::{DiagonalCovariance, ObservationBatch, ObservationOperator};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Inputs of one cycle's evidence: the model version's own forecast and the
/// shared observations.
#[derive(Debug, Clone, Copy)]
pub struct CycleEvidenceInputs<'a> {
    pub stats: &'a ForecastStats,
    pub y: &'a ObservationBatch,
    pub h: &'a ObservationOperator,
    pub r: &'a DiagonalCovariance,
}

impl CycleEvidenceInputs<'_> {
    fn validate(&self) -> Result<()> {
        let d = self.h.obs_count();
        if self.y.values.len() != d
            || self.r.len() != d
            || self.h.state_size() != self.stats.state_dim()
        {
            return Err(Error::Dimension(format!(
                "evidence inputs disagree: y has {}, R has {}, H maps {} -> {d}, forecast has {}",
                self.y.values.len(),
                self.r.len(),
                self.h.state_size(),
                self.stats.state_dim()
            )));
        }
        Ok(())
    }
}

fn gaussian_log_density(d: usize, log_det: f64, quad: f64) -> f64 {
    -0.5 * (d as f64 * LN_2PI + log_det + quad)
}

/// Dense reference: forms `Σ = H P^f H^T + R` and factors it.
pub fn log_gcme_dense(input: &CycleEvidenceInputs) -> Result<f64> {
    input.validate()?;
    let hp = input.h.dense() * input.stats.covariance();
    let sigma = &hp * input.h.dense().transpose() + input.r.dense();
    let delta = DVector::from_vec(innovation(input.stats, input.y, input.h));
    let (log_det, quad) = spd_logdet_quad(sigma, &delta, "H P^f H^T + R")?;
    Ok(gaussian_log_density(delta.len(), log_det, quad))
}

/// Log-density of innovations `delta` under `Y Y^T + diag(1/precision)`, where
/// `obs_anoms` is `Y` (`d x N`); cost `O(d N^2 + N^3)`.
fn low_rank_log_density(obs_anoms: &DMatrix<f64>, precision: &[f64], delta: &[f64]) -> Result<f64> {
    let n = obs_anoms.ncols();
    let d = delta.len();
    let mut weighted = obs_anoms.clone();
    for (mut row, &p) in weighted.row_iter_mut().zip(precision) {
        row *= p;
    }
    let mut s = obs_anoms.tr_mul(&weighted);
    for i in 0..n {
        s[(i, i)] += 1.0;
    }
    let u = weighted.tr_mul(&DVector::from_column_slice(delta));
    let (log_det_s, correction) = spd_logdet_quad(s, &u, "I_N + (HX)^T R^{-1} (HX)")?;
    let log_det_r: f64 = precision.iter().map(|p| -p.ln()).sum();
    let white: f64 = delta.iter().zip(precision).map(|(v, p)| v * v * p).sum();
    Ok(gaussian_log_density(
        d,
        log_det_r + log_det_s,
        white - correction,
    ))
}

/// Ensemble-space G-CME; never forms a `d x d` matrix.
pub fn log_gcme_fast(input: &CycleEvidenceInputs) -> Result<f64> {
    input.validate()?;
    let obs_anoms = input.h.apply_rows(&input.stats.normalized_anomalies);
    let precision: Vec<f64> = input.r.variances().iter().map(|v| 1.0 / v).collect();
    let delta = innovation(input.stats, input.y, input.h);
    low_rank_log_density(&obs_anoms, &precision, &delta)
}

fn local_log_density(obs_anoms: &DMatrix<f64>, delta: &[f64], domain: &LocalDomain) -> Result<f64> {
    if domain.obs.is_empty() {
        return Ok(0.0);
    }
    let local = obs_anoms.select_rows(domain.obs.iter());
    let local_delta: Vec<f64> = domain.obs.iter().map(|&o| delta[o]).collect();
    low_rank_log_density(&local, &domain.precision, &local_delta)
}

/// Local CME at gridpoint `s` using the LETKF's selection and tapered precision.
/// Returns 0 when no observation is selected.
pub fn log_local_cme(input: &CycleEvidenceInputs, s: usize, loc: &LocalizationSpec) -> Result<f64> {
    input.validate()?;
    loc.validate()?;
    if s >= input.h.state_size() {
        return Err(Error::Dimension(format!("gridpoint {s} outside the ring")));
    }
    let domains = LocalDomains::build(input.h, input.r.variances(), loc);
    let obs_anoms = input.h.apply_rows(&input.stats.normalized_anomalies);
    let delta = innovation(input.stats, input.y, input.h);
    local_log_density(&obs_anoms, &delta, &domains.domains[s])
}

/// Local CME of every gridpoint; gridpoints are independent and evaluated in parallel.
pub fn local_cme_field(input: &CycleEvidenceInputs, domains: &LocalDomains) -> Result<Vec<f64>> {
    input.validate()?;
    let obs_anoms = input.h.apply_rows(&input.stats.normalized_anomalies);
    let delta = innovation(input.stats, input.y, input.h);
    domains
        .domains
        .par_iter()
        .map(|dom| local_log_density(&obs_anoms, &delta, dom))
        .collect()
}

/// Nonnegative gridpoint weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    w: Vec<f64>,
}

impl WeightScheme {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if w.is_empty()
            || w.iter().any(|&v| !(v >= 0.0 && v.is_finite()))
            || (total - 1.0).abs() > 1e-12
        {
            return Err(Error::Config(format!(
                "weights must be nonnegative and sum to 1 (sum = {total})"
            )));
        }
        Ok(Self { w })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            w: vec![1.0 / m as f64; m],
        }
    }

    /// `w(s) ∝ 1 / (observations in the domain of s)`; empty domains get weight 0.
    pub fn inverse_obs_count(domains: &LocalDomains) -> Result<Self> {
        let raw: Vec<f64> = domains
            .domains
            .iter()
            .map(|d| {
                if d.obs.is_empty() {
                    0.0
                } else {
                    1.0 / d.obs.len() as f64
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        if total == 0.0 {
            return Err(Error::Config("every local domain is empty".into()));
        }
        Ok(Self {
            w: raw.into_iter().map(|v| v / total).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// `sum_s w(s) log_local[s]`, summed in gridpoint order.
pub fn dl_cme(log_local: &[f64], w: &WeightScheme) -> Result<f64> {
    if log_local.len() != w.len() {
        return Err(Error::Dimension(format!(
            "{} local values for {} weights",
            log_local.len(),
            w.len()
        )));
    }
    Ok(log_local
        .iter()
        .zip(w.as_slice())
        .fold(0.0, |acc, (l, w)| acc + w * l))
}

/// Dense GL-CME with the forecast covariance tapered entrywise by `c`.
pub fn log_glcme(input: &CycleEvidenceInputs, c: &DMatrix<f64>) -> Result<f64> {
    input.validate()?;
    let m = input.stats.state_dim();
    if c.nrows() != m || c.ncols() != m {
        return Err(Error::Dimension(format!(
            "taper matrix is {}x{}, state has {m}",
            c.nrows(),
            c.ncols()
        )));
    }
    let tapered = input.stats.covariance().component_mul(c);
    let h = input.h.dense();
    let sigma = &h * tapered * h.transpose() + input.r.dense();
    let delta = DVector::from_vec(innovation(input.stats, input.y, input.h));
    let (log_det, quad) = spd_logdet_quad(sigma, &delta, "H (C ∘ P^f) H^T + R")?;
    Ok(gaussian_log_density(delta.len(), log_det, quad))
}

/// Per-cycle evidence of one model version.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvidenceSeries {
    pub model_tag: String,
    pub log_gcme: Vec<f64>,
    /// Per cycle, one local log factor per gridpoint (empty when not computed).
    pub log_local: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    Gcme,
    Dlcme,
}

impl EvidenceSeries {
    pub fn new(model_tag: impl Into<String>) -> Self {
        Self {
            model_tag: model_tag.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, log_gcme: f64, log_local: Vec<f64>) {
        self.log_gcme.push(log_gcme);
        self.log_local.push(log_local);
    }

    pub fn len(&self) -> usize {
        self.log_gcme.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_gcme.is_empty()
    }

    /// DL-CME of every recorded cycle.
    pub fn dl_series(&self, w: &WeightScheme) -> Result<Vec<f64>> {
        self.log_local.iter().map(|l| dl_cme(l, w)).collect()
    }
}

/// Log evidence over the window `[k_end - K + 1, k_end]` of recorded cycles.
/// For the DL-CME, local logs are summed over the window per gridpoint first
/// and then weighted.
pub fn window_log_evidence(
    series: &EvidenceSeries,
    k_end: usize,
    window: usize,
    kind: EvidenceKind,
    w: Option<&WeightScheme>,
) -> Result<f64> {
    let start = k_end as i64 - window as i64 + 1;
    if window == 0 || start < 0 || k_end >= series.len() {
        return Err(Error::WindowOutOfRange {
            start,
            end: k_end as i64,
            len: series.len(),
        });
    }
    let range = start as usize..=k_end;
    match kind {
        EvidenceKind::Gcme => Ok(series.log_gcme[range].iter().sum()),
        EvidenceKind::Dlcme => {
            let rows = &series.log_local[range];
            let m = rows[0].len();
            let uniform;
            let w = match w {
                Some(w) => w,
                None => {
                    uniform = WeightScheme::uniform(m);
                    &uniform
                }
            };
            let mut summed = vec![0.0; m];
            for row in rows {
                if row.len() != m {
                    return Err(Error::Dimension("ragged local evidence rows".into()));
                }
                for (acc, v) in summed.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            dl_cme(&summed, w)
        }
    }
}
