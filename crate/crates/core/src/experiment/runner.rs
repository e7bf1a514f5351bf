use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::enkf::{Ensemble, FilterSetup, InflationSpec};
use crate::error::{Error, Result};
use crate::evidence::{
    local_cme_field, log_gcme_fast, CycleEvidenceInputs, EvidenceSeries, WeightScheme,
};
use crate::localization::{LocalDomains, LocalizationSpec};
use crate::model::L95Config;
use crate::rng;
use crate::selection::{
    rmse_forecast, rmse_truth, summarize, ConfidenceSeries, IndicatorKind, SelectionSummary,
};
use crate::twin::{DiagonalCovariance, ObservationOperator, TwinRun};

use super::config::{ExperimentConfig, InflationChoice};

/// Consecutive cycles above the divergence threshold that abort a run.
pub const DIVERGENCE_CYCLES: usize = 100;
/// Divergence threshold as a multiple of the observation error std.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// One competing model version.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVersion {
    /// Stable identifier, also the name of its ensemble-initialisation stream.
    pub tag: String,
    pub forcing: f64,
}

impl ModelVersion {
    pub fn correct(forcing: f64) -> Self {
        Self {
            tag: format!("correct/F={forcing}"),
            forcing,
        }
    }

    pub fn incorrect(forcing: f64) -> Self {
        Self {
            tag: format!("incorrect/F={forcing}"),
            forcing,
        }
    }
}

/// What to record during the assessment period of a DA run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordOptions {
    pub evidence: bool,
    pub local_evidence: bool,
}

/// Per-cycle outputs of one model version's DA over the assessment period.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRun {
    pub version: ModelVersion,
    pub inflation: f64,
    /// Forecast-mean RMSE against the observations.
    pub rmse: Vec<f64>,
    /// Analysis-mean RMSE against the truth.
    pub rmse_truth: Vec<f64>,
    pub evidence: EvidenceSeries,
    /// Gridpoint-cycles analysed without any local observation.
    pub empty_domain_cycles: usize,
}

impl ModelRun {
    pub fn mean_rmse_truth(&self) -> f64 {
        mean(&self.rmse_truth)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// The shared ingredients of every DA run in an experiment.
#[derive(Debug, Clone)]
pub struct DaContext<'a> {
    pub twin: &'a TwinRun,
    pub ensemble_size: usize,
    pub initial_spread: f64,
    pub localization: Option<LocalizationSpec>,
    pub seed: u64,
}

impl DaContext<'_> {
    fn setup(&self, forcing: f64, inflation: f64) -> Result<FilterSetup> {
        FilterSetup::new(
            self.twin.model.with_forcing(forcing),
            self.twin.cycle_interval_steps,
            self.twin.operator.clone(),
            self.twin.obs_error.clone(),
            InflationSpec::new(inflation)?,
            self.localization.as_ref(),
        )
    }

    fn initial_ensemble(&self, version: &ModelVersion) -> Result<Ensemble> {
        let mut stream = rng::stream(self.seed, &rng::ensemble_stream_label(&version.tag));
        let x0 = &self.twin.truth[0];
        let m = x0.len();
        let mut members = DMatrix::zeros(m, self.ensemble_size);
        // column-major fill keeps the draw order member by member
        for j in 0..self.ensemble_size {
            for i in 0..m {
                let z: f64 = StandardNormal.sample(&mut stream);
                members[(i, j)] = x0.as_slice()[i] + self.initial_spread * z;
            }
        }
        Ensemble::new(members)
    }

    /// Runs the DA of `version` over cycles `0..n_cycles`, recording cycles
    /// `spinup..n_cycles`.
    pub fn run(
        &self,
        version: &ModelVersion,
        inflation: f64,
        n_cycles: usize,
        spinup: usize,
        record: RecordOptions,
    ) -> Result<ModelRun> {
        let n_cycles = n_cycles.min(self.twin.len());
        let setup = self.setup(version.forcing, inflation)?;
        let weights_len = self.twin.model.grid_size;
        let obs_std = mean(self.twin.obs_error.variances()).sqrt();
        let threshold = DIVERGENCE_FACTOR * obs_std;
        let mut ensemble = self.initial_ensemble(version)?;
        let mut out = ModelRun {
            version: version.clone(),
            inflation,
            rmse: Vec::with_capacity(n_cycles.saturating_sub(spinup)),
            rmse_truth: Vec::with_capacity(n_cycles.saturating_sub(spinup)),
            evidence: EvidenceSeries::new(version.tag.clone()),
            empty_domain_cycles: 0,
        };
        let mut above = 0usize;
        for k in 0..n_cycles {
            let y = &self.twin.observations[k];
            if k > 0 {
                ensemble.propagate(&setup.model, setup.cycle_interval_steps);
            }
            if ensemble.members().iter().any(|v| !v.is_finite()) {
                return Err(divergence(version, threshold, k));
            }
            let (stats, analysis) = setup.analyse(&ensemble, y)?;
            ensemble = analysis;
            let err = rmse_truth(ensemble.mean().as_slice(), self.twin.truth[k].as_slice())?;
            above = if err > threshold { above + 1 } else { 0 };
            if above >= DIVERGENCE_CYCLES || !err.is_finite() {
                return Err(divergence(version, threshold, k));
            }
            if k < spinup {
                continue;
            }
            out.rmse.push(rmse_forecast(&stats, y, &setup.operator)?);
            out.rmse_truth.push(err);
            if record.evidence {
                let input = CycleEvidenceInputs {
                    stats: &stats,
                    y,
                    h: &setup.operator,
                    r: &setup.obs_error,
                };
                let gcme = log_gcme_fast(&input)?;
                let local = match (&setup.domains, record.local_evidence) {
                    (Some(domains), true) => {
                        out.empty_domain_cycles += domains.empty_count();
                        local_cme_field(&input, domains)?
                    }
                    _ => Vec::new(),
                };
                debug_assert!(local.is_empty() || local.len() == weights_len);
                out.evidence.push(gcme, local);
            }
        }
        Ok(out)
    }
}

fn divergence(version: &ModelVersion, threshold: f64, cycle: usize) -> Error {
    Error::FilterDivergence {
        forcing: version.forcing,
        threshold,
        cycles: DIVERGENCE_CYCLES,
        cycle,
    }
}

/// Mean analysis RMSE of every candidate inflation factor.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningLog {
    pub version: ModelVersion,
    /// `(factor, mean RMSE^t)`; diverged candidates score `+inf`.
    pub scores: Vec<(f64, f64)>,
    pub chosen: f64,
}

/// Grid search for the inflation factor minimising the time-mean analysis
/// RMSE over the first `tuning_cycles` cycles; the first quarter of them is
/// discarded as spin-up. Ties keep the smaller factor.
pub fn tune_inflation(
    ctx: &DaContext,
    version: &ModelVersion,
    grid: &[f64],
    tuning_cycles: usize,
) -> Result<TuningLog> {
    if grid.is_empty() {
        return Err(Error::Config("empty inflation grid".into()));
    }
    let spinup = tuning_cycles / 4;
    let record = RecordOptions {
        evidence: false,
        local_evidence: false,
    };
    let scores: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&factor| {
            let score = match ctx.run(version, factor, tuning_cycles, spinup, record) {
                Ok(run) if !run.rmse_truth.is_empty() => run.mean_rmse_truth(),
                Ok(_)
                | Err(Error::FilterDivergence { .. })
                | Err(Error::NonFiniteEnsembleSpace(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            Ok((factor, score))
        })
        .collect::<Result<_>>()?;
    let chosen = scores
        .iter()
        .fold(None::<(f64, f64)>, |best, &(f, s)| match best {
            Some((_, bs)) if bs <= s => best,
            _ => Some((f, s)),
        })
        .map(|(f, _)| f)
        .expect("grid is non-empty");
    Ok(TuningLog {
        version: version.clone(),
        scores,
        chosen,
    })
}

/// Selection statistics of one (incorrect version, indicator, window) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionCell {
    pub incorrect_forcing: f64,
    pub indicator: IndicatorKind,
    pub window: usize,
    pub deltas: ConfidenceSeries,
    /// Last recorded cycle of each window, relative to the assessment start.
    pub window_ends: Vec<usize>,
    pub summary: SelectionSummary,
}

#[derive(Debug, Clone)]
pub struct SelectionExperiment {
    pub config: ExperimentConfig,
    pub twin: TwinRun,
    pub correct: ModelRun,
    pub incorrect: Vec<ModelRun>,
    pub tuning: Vec<TuningLog>,
    pub cells: Vec<SelectionCell>,
    /// DL-CME gridpoint weights of localized runs.
    pub weights: Option<WeightScheme>,
}

impl SelectionExperiment {
    pub fn cell(
        &self,
        incorrect_forcing: f64,
        indicator: IndicatorKind,
        window: usize,
    ) -> Option<&SelectionCell> {
        self.cells.iter().find(|c| {
            c.incorrect_forcing == incorrect_forcing
                && c.indicator == indicator
                && c.window == window
        })
    }

    pub fn runs(&self) -> impl Iterator<Item = &ModelRun> {
        std::iter::once(&self.correct).chain(self.incorrect.iter())
    }
}

pub fn build_twin(cfg: &ExperimentConfig) -> Result<TwinRun> {
    let model = L95Config::new(cfg.correct_forcing, cfg.dt, cfg.grid_size)?;
    TwinRun::generate(
        model,
        ObservationOperator::identity(cfg.grid_size),
        DiagonalCovariance::uniform(cfg.obs_variance, cfg.grid_size)?,
        cfg.total_cycles(),
        cfg.cycle_interval_steps,
        cfg.seed,
    )
}

/// Indicator value of every window of length `window` (stride `stride`).
/// Evidences add over the window; the RMSE is the root of the mean squared
/// per-cycle RMSE.
pub fn windowed_indicator(
    run: &ModelRun,
    indicator: IndicatorKind,
    window: usize,
    stride: usize,
    weights: Option<&WeightScheme>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let per_cycle: Vec<f64> = match indicator {
        IndicatorKind::Rmse => run.rmse.iter().map(|r| r * r).collect(),
        IndicatorKind::Gcme => run.evidence.log_gcme.clone(),
        IndicatorKind::Dlcme => {
            let w = weights.ok_or_else(|| Error::Config("dlcme needs gridpoint weights".into()))?;
            if run.evidence.log_local.iter().any(|l| l.is_empty()) || run.evidence.is_empty() {
                return Err(Error::Config(format!(
                    "no local evidence recorded for {}",
                    run.version.tag
                )));
            }
            run.evidence.dl_series(w)?
        }
    };
    if per_cycle.len() < window {
        return Err(Error::WindowOutOfRange {
            start: 0,
            end: window as i64 - 1,
            len: per_cycle.len(),
        });
    }
    let ends: Vec<usize> = (window - 1..per_cycle.len()).step_by(stride).collect();
    let values = ends
        .iter()
        .map(|&end| {
            let sum: f64 = per_cycle[end + 1 - window..=end].iter().sum();
            match indicator {
                IndicatorKind::Rmse => (sum / window as f64).sqrt(),
                _ => sum,
            }
        })
        .collect();
    Ok((ends, values))
}

pub fn selection_cells(
    cfg: &ExperimentConfig,
    correct: &ModelRun,
    incorrect: &[ModelRun],
    weights: Option<&WeightScheme>,
) -> Result<Vec<SelectionCell>> {
    let mut cells = Vec::new();
    for run in incorrect {
        for &indicator in &cfg.indicators {
            for &window in &cfg.windows {
                let (ends, ones) =
                    windowed_indicator(correct, indicator, window, cfg.window_stride, weights)?;
                let (_, zeros) =
                    windowed_indicator(run, indicator, window, cfg.window_stride, weights)?;
                let deltas = ConfidenceSeries::from_indicators(indicator, &ones, &zeros)?;
                let summary = summarize(&deltas)?;
                cells.push(SelectionCell {
                    incorrect_forcing: run.version.forcing,
                    indicator,
                    window,
                    deltas,
                    window_ends: ends,
                    summary,
                });
            }
        }
    }
    Ok(cells)
}

/// Generates the twin once, runs one DA per model version on the same
/// observations, and scores every (F0, indicator, K) combination.
pub fn run_selection_experiment(cfg: &ExperimentConfig) -> Result<SelectionExperiment> {
    cfg.validate()?;
    let twin = build_twin(cfg)?;
    run_selection_on_twin(cfg, twin)
}

pub fn run_selection_on_twin(cfg: &ExperimentConfig, twin: TwinRun) -> Result<SelectionExperiment> {
    cfg.validate()?;
    if twin.len() < cfg.total_cycles() {
        return Err(Error::Config(format!(
            "observation archive has {} cycles, the experiment needs {}",
            twin.len(),
            cfg.total_cycles()
        )));
    }
    let localization = cfg.localization_spec()?;
    let ctx = DaContext {
        twin: &twin,
        ensemble_size: cfg.ensemble_size,
        initial_spread: cfg.initial_spread,
        localization,
        seed: cfg.seed,
    };
    let wants_evidence = cfg.indicators.iter().any(|i| i.higher_is_better());
    let record = RecordOptions {
        evidence: wants_evidence,
        local_evidence: cfg.indicators.contains(&IndicatorKind::Dlcme)
            || (cfg.emit_local_cme && localization.is_some()),
    };

    let versions: Vec<ModelVersion> = std::iter::once(ModelVersion::correct(cfg.correct_forcing))
        .chain(
            cfg.incorrect_forcings
                .iter()
                .map(|&f| ModelVersion::incorrect(f)),
        )
        .collect();

    let results: Vec<(Option<TuningLog>, ModelRun)> = versions
        .par_iter()
        .map(|version| {
            let (log, factor) = match cfg.inflation {
                InflationChoice::Fixed(f) => (None, f),
                InflationChoice::Auto(_) => {
                    let log =
                        tune_inflation(&ctx, version, &cfg.inflation_grid, cfg.tuning_cycles)?;
                    let chosen = log.chosen;
                    (Some(log), chosen)
                }
            };
            log::info!("{}: inflation {factor}", version.tag);
            let run = ctx.run(
                version,
                factor,
                cfg.total_cycles(),
                cfg.spinup_cycles,
                record,
            )?;
            Ok((log, run))
        })
        .collect::<Result<_>>()?;

    let mut tuning = Vec::new();
    let mut runs = Vec::new();
    for (log, run) in results {
        tuning.extend(log);
        runs.push(run);
    }
    let correct = runs.remove(0);
    let weights = gridpoint_weights(&twin, localization.as_ref())?;
    let cells = selection_cells(cfg, &correct, &runs, weights.as_ref())?;
    Ok(SelectionExperiment {
        config: cfg.clone(),
        twin,
        correct,
        incorrect: runs,
        tuning,
        cells,
        weights,
    })
}

/// DL-CME gridpoint weights, inversely proportional to the local observation
/// count (uniform for a fully observed ring); `None` without localization.
pub fn gridpoint_weights(
    twin: &TwinRun,
    localization: Option<&LocalizationSpec>,
) -> Result<Option<WeightScheme>> {
    localization
        .map(|loc| {
            let domains = LocalDomains::build(&twin.operator, twin.obs_error.variances(), loc);
            WeightScheme::inverse_obs_count(&domains)
        })
        .transpose()
}

/// One localization radius of the radius sweep.
#[derive(Debug, Clone)]
pub struct RadiusSweepRow {
    pub loc_radius: f64,
    pub rmse_truth_correct: f64,
    pub rmse_truth_incorrect: f64,
    /// `(indicator, selection probability, gini)` at K = the first configured window.
    pub scores: Vec<(IndicatorKind, f64, f64)>,
    pub experiment: SelectionExperiment,
}

/// Repeats the selection experiment against `radius_sweep_forcing` for every radius.
pub fn run_radius_sweep(cfg: &ExperimentConfig) -> Result<Vec<RadiusSweepRow>> {
    cfg.validate()?;
    let base = cfg
        .localization
        .ok_or_else(|| Error::Config("the radius sweep needs a localization setting".into()))?;
    let twin = build_twin(cfg)?;
    cfg.radii
        .iter()
        .map(|&radius| {
            let mut sub = cfg.clone();
            sub.incorrect_forcings = vec![cfg.radius_sweep_forcing];
            sub.localization = Some(super::config::LocalizationConfig {
                loc_radius: radius,
                cut_radius: base.cut_radius.map(|c| c * radius / base.loc_radius),
                taper: base.taper,
            });
            let experiment = run_selection_on_twin(&sub, twin.clone())?;
            let window = sub.windows[0];
            let scores = sub
                .indicators
                .iter()
                .map(|&ind| {
                    let cell = experiment
                        .cell(cfg.radius_sweep_forcing, ind, window)
                        .expect("cell computed for every indicator");
                    (ind, cell.summary.selection_probability, cell.summary.gini)
                })
                .collect();
            Ok(RadiusSweepRow {
                loc_radius: radius,
                rmse_truth_correct: experiment.correct.mean_rmse_truth(),
                rmse_truth_incorrect: experiment.incorrect[0].mean_rmse_truth(),
                scores,
                experiment,
            })
        })
        .collect()
}

/// The selection experiment against `window_sweep_forcing` for every configured window.
pub fn run_window_sweep(cfg: &ExperimentConfig) -> Result<SelectionExperiment> {
    let mut sub = cfg.clone();
    sub.incorrect_forcings = vec![cfg.window_sweep_forcing];
    run_selection_experiment(&sub)
}
