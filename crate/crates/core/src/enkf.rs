//! Deterministic ensemble Kalman filters: the global ETKF and the
//! domain-localized LETKF, with multiplicative inflation.
//!
//! Anomalies are carried in normalized form, `X = inflation * (E - x̄ 1^T) / sqrt(N-1)`,
//! so that `P^f = X X^T`. With `Y = H X` the ensemble-space Hessian is
//! `S = I_N + Y^T R^{-1} Y`, the weight vector `w = S^{-1} Y^T R^{-1} (y - H x̄)`,
//! and the analysis ensemble
//!
//! `E^a = (x̄ + X w) 1^T + sqrt(N-1) X S^{-1/2}`
//!
//! where `S^{-1/2}` is the symmetric square root. The analysis mean and
//! covariance equal the Kalman update of `(x̄, X X^T)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::EnsembleSpaceFactor;
use crate::localization::{LocalDomains, LocalizationSpec};
use crate::model::{L95Config, Rk4Workspace};
use crate::twin::{DiagonalCovariance, ObservationBatch, ObservationOperator};

/// `N` members stored as the columns of an `M x N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs at least 2 members, got {}",
                members.ncols()
            )));
        }
        if members.nrows() == 0 {
            return Err(Error::Dimension("ensemble state dimension is zero".into()));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("ensemble contains non-finite values".into()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// Raw anomalies `E - x̄ 1^T`.
    pub fn anomalies(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut a = self.members.clone();
        for mut col in a.column_iter_mut() {
            col -= &mean;
        }
        a
    }

    /// Runs every member `n_steps` model steps forward.
    pub fn propagate(&mut self, cfg: &L95Config, n_steps: usize) {
        let mut ws = Rk4Workspace::new(self.state_dim());
        for mut col in self.members.column_iter_mut() {
            ws.propagate(col.as_mut_slice(), cfg.forcing, cfg.dt, n_steps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflationSpec {
    pub multiplicative_factor: f64,
}

impl InflationSpec {
    pub fn new(factor: f64) -> Result<Self> {
        if !(factor >= 1.0 && factor.is_finite()) {
            return Err(Error::Config(format!(
                "inflation factor must be finite and >= 1, got {factor}"
            )));
        }
        Ok(Self {
            multiplicative_factor: factor,
        })
    }

    pub fn none() -> Self {
        Self {
            multiplicative_factor: 1.0,
        }
    }
}

/// Forecast mean and normalized anomalies of one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastStats {
    pub mean: DVector<f64>,
    pub normalized_anomalies: DMatrix<f64>,
}

impl ForecastStats {
    pub fn ensemble_size(&self) -> usize {
        self.normalized_anomalies.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.mean.len()
    }

    /// Dense `P^f = X X^T`; only for small problems and oracles.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.normalized_anomalies * self.normalized_anomalies.transpose()
    }

    /// The (inflated) forecast ensemble `x̄ 1^T + sqrt(N-1) X`.
    pub fn ensemble(&self) -> Result<Ensemble> {
        let scale = ((self.ensemble_size() - 1) as f64).sqrt();
        let mut members = &self.normalized_anomalies * scale;
        for mut col in members.column_iter_mut() {
            col += &self.mean;
        }
        Ensemble::new(members)
    }
}

pub fn forecast_stats(e: &Ensemble, inflation: InflationSpec) -> ForecastStats {
    let n = e.size();
    let scale = inflation.multiplicative_factor / ((n - 1) as f64).sqrt();
    ForecastStats {
        mean: e.mean(),
        normalized_anomalies: e.anomalies() * scale,
    }
}

/// Ensemble-space solution for one (global or local) analysis.
struct Transform {
    weights: DVector<f64>,
    /// `sqrt(N-1) S^{-1/2}`.
    perturbation: DMatrix<f64>,
}

/// `obs_anoms` is `Y` restricted to the used observations (`d x N`), `precision`
/// the diagonal of the (tapered) inverse observation covariance.
fn ensemble_transform(
    obs_anoms: &DMatrix<f64>,
    precision: &[f64],
    innovation: &[f64],
) -> Result<Transform> {
    let n = obs_anoms.ncols();
    let d = obs_anoms.nrows();
    let root_precision: Vec<f64> = precision.iter().map(|p| p.sqrt()).collect();
    // whitened anomalies, transposed: Ỹ^T = Y^T P^{1/2}
    let mut whitened_t = obs_anoms.transpose();
    for (mut col, &r) in whitened_t.column_iter_mut().zip(&root_precision) {
        col *= r;
    }
    let whitened_innov = DVector::from_iterator(
        d,
        innovation.iter().zip(&root_precision).map(|(v, r)| v * r),
    );
    if whitened_innov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEnsembleSpace("whitened innovation".into()));
    }
    let factor = EnsembleSpaceFactor::new(whitened_t)?;
    let weights = factor.weights(&whitened_innov);
    let perturbation = factor.inverse_sqrt() * ((n - 1) as f64).sqrt();
    Ok(Transform {
        weights,
        perturbation,
    })
}

fn check_dims(
    stats: &ForecastStats,
    y: &ObservationBatch,
    h: &ObservationOperator,
    r: &DiagonalCovariance,
) -> Result<()> {
    if h.state_size() != stats.state_dim() {
        return Err(Error::Dimension(format!(
            "H acts on states of size {}, forecast has {}",
            h.state_size(),
            stats.state_dim()
        )));
    }
    if y.values.len() != h.obs_count() || r.len() != h.obs_count() {
        return Err(Error::Dimension(format!(
            "observation batch ({}), R ({}) and H ({}) disagree",
            y.values.len(),
            r.len(),
            h.obs_count()
        )));
    }
    Ok(())
}

pub fn innovation(
    stats: &ForecastStats,
    y: &ObservationBatch,
    h: &ObservationOperator,
) -> Vec<f64> {
    h.apply(stats.mean.as_slice())
        .into_iter()
        .zip(&y.values)
        .map(|(hx, yv)| yv - hx)
        .collect()
}

/// Global ETKF analysis.
pub fn etkf_analysis(
    stats: &ForecastStats,
    y: &ObservationBatch,
    h: &ObservationOperator,
    r: &DiagonalCovariance,
) -> Result<Ensemble> {
    check_dims(stats, y, h, r)?;
    let obs_anoms = h.apply_rows(&stats.normalized_anomalies);
    let precision: Vec<f64> = r.variances().iter().map(|v| 1.0 / v).collect();
    let t = ensemble_transform(&obs_anoms, &precision, &innovation(stats, y, h))?;
    let x = &stats.normalized_anomalies;
    let mean = &stats.mean + x * &t.weights;
    let mut members = x * &t.perturbation;
    for mut col in members.column_iter_mut() {
        col += &mean;
    }
    Ensemble::new(members)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LetkfOutcome {
    pub ensemble: Ensemble,
    /// Gridpoints left at their forecast because no observation reached them.
    pub empty_domains: usize,
}

/// LETKF analysis with domains built from `loc`.
pub fn letkf_analysis(
    stats: &ForecastStats,
    y: &ObservationBatch,
    h: &ObservationOperator,
    r: &DiagonalCovariance,
    loc: &LocalizationSpec,
) -> Result<LetkfOutcome> {
    check_dims(stats, y, h, r)?;
    loc.validate()?;
    if loc.grid_size != stats.state_dim() {
        return Err(Error::Dimension(format!(
            "localization ring has {} points, state has {}",
            loc.grid_size,
            stats.state_dim()
        )));
    }
    let domains = LocalDomains::build(h, r.variances(), loc);
    letkf_analysis_with_domains(stats, y, h, &domains)
}

/// LETKF analysis with precomputed local domains; each gridpoint row is
/// analysed independently and may run on any thread.
pub fn letkf_analysis_with_domains(
    stats: &ForecastStats,
    y: &ObservationBatch,
    h: &ObservationOperator,
    domains: &LocalDomains,
) -> Result<LetkfOutcome> {
    let m = stats.state_dim();
    let n = stats.ensemble_size();
    if domains.domains.len() != m {
        return Err(Error::Dimension(format!(
            "{} local domains for a state of size {m}",
            domains.domains.len()
        )));
    }
    let x = &stats.normalized_anomalies;
    let obs_anoms = h.apply_rows(x);
    let innov = innovation(stats, y, h);
    let forecast_scale = ((n - 1) as f64).sqrt();

    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|s| {
            let dom = &domains.domains[s];
            let xs = x.row(s);
            if dom.obs.is_empty() {
                return Ok((0..n)
                    .map(|j| stats.mean[s] + forecast_scale * xs[j])
                    .collect());
            }
            let local_y = obs_anoms.select_rows(dom.obs.iter());
            let local_innov: Vec<f64> = dom.obs.iter().map(|&o| innov[o]).collect();
            let t = ensemble_transform(&local_y, &dom.precision, &local_innov)?;
            let mean = stats.mean[s] + xs.dot(&t.weights.transpose());
            let pert = xs * &t.perturbation;
            Ok(pert.iter().map(|p| mean + p).collect())
        })
        .collect::<Result<_>>()?;

    let members = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    Ok(LetkfOutcome {
        ensemble: Ensemble::new(members)?,
        empty_domains: domains.empty_count(),
    })
}

/// Everything a DA cycle needs besides the ensemble and the observations.
#[derive(Debug, Clone)]
pub struct FilterSetup {
    pub model: L95Config,
    pub cycle_interval_steps: usize,
    pub operator: ObservationOperator,
    pub obs_error: DiagonalCovariance,
    pub inflation: InflationSpec,
    pub domains: Option<LocalDomains>,
}

impl FilterSetup {
    pub fn new(
        model: L95Config,
        cycle_interval_steps: usize,
        operator: ObservationOperator,
        obs_error: DiagonalCovariance,
        inflation: InflationSpec,
        localization: Option<&LocalizationSpec>,
    ) -> Result<Self> {
        let domains = match localization {
            Some(loc) => {
                loc.validate()?;
                Some(LocalDomains::build(&operator, obs_error.variances(), loc))
            }
            None => None,
        };
        Ok(Self {
            model,
            cycle_interval_steps,
            operator,
            obs_error,
            inflation,
            domains,
        })
    }

    /// Analysis step only: forecast statistics of `forecast`, then the update.
    pub fn analyse(
        &self,
        forecast: &Ensemble,
        y: &ObservationBatch,
    ) -> Result<(ForecastStats, Ensemble)> {
        let stats = forecast_stats(forecast, self.inflation);
        let analysis = match &self.domains {
            Some(domains) => {
                check_dims(&stats, y, &self.operator, &self.obs_error)?;
                letkf_analysis_with_domains(&stats, y, &self.operator, domains)?.ensemble
            }
            None => etkf_analysis(&stats, y, &self.operator, &self.obs_error)?,
        };
        Ok((stats, analysis))
    }

    /// Forecast from the previous analysis, then analyse.
    pub fn cycle(
        &self,
        mut ensemble: Ensemble,
        y: &ObservationBatch,
    ) -> Result<(ForecastStats, Ensemble)> {
        ensemble.propagate(&self.model, self.cycle_interval_steps);
        self.analyse(&ensemble, y)
    }
}

pub fn da_cycle(
    e: Ensemble,
    y: &ObservationBatch,
    setup: &FilterSetup,
) -> Result<(ForecastStats, Ensemble)> {
    setup.cycle(e, y)
}
