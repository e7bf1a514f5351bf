use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::localization::{LocalizationSpec, Taper};
use crate::selection::IndicatorKind;

/// Assessment length of the long run (`--full`).
pub const FULL_ASSESSMENT_CYCLES: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationConfig {
    pub loc_radius: f64,
    /// Defaults to the Gaspari-Cohn support, `2 * loc_radius`.
    #[serde(default)]
    pub cut_radius: Option<f64>,
    #[serde(default = "default_taper")]
    pub taper: Taper,
}

fn default_taper() -> Taper {
    Taper::GaspariCohn
}

impl LocalizationConfig {
    pub fn gaspari_cohn(loc_radius: f64) -> Self {
        Self {
            loc_radius,
            cut_radius: None,
            taper: Taper::GaspariCohn,
        }
    }

    pub fn spec(&self, grid_size: usize) -> Result<LocalizationSpec> {
        LocalizationSpec::new(
            self.loc_radius,
            self.cut_radius.unwrap_or(2.0 * self.loc_radius),
            self.taper,
            grid_size,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoTune {
    #[serde(rename = "auto-tune")]
    AutoTune,
}

/// A fixed multiplicative factor, or `"auto-tune"` for a grid search per model version.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InflationChoice {
    Fixed(f64),
    Auto(AutoTune),
}

impl InflationChoice {
    pub const AUTO: InflationChoice = InflationChoice::Auto(AutoTune::AutoTune);
}

/// All parameters of a selection experiment. Every field has a default, so a
/// config file only lists what it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub correct_forcing: f64,
    pub incorrect_forcings: Vec<f64>,
    pub ensemble_size: usize,
    pub assessment_cycles: usize,
    pub spinup_cycles: usize,
    pub windows: Vec<usize>,
    pub window_stride: usize,
    /// `null` runs the global ETKF.
    pub localization: Option<LocalizationConfig>,
    pub inflation: InflationChoice,
    pub inflation_grid: Vec<f64>,
    pub tuning_cycles: usize,
    pub seed: u64,
    pub indicators: Vec<IndicatorKind>,
    pub grid_size: usize,
    pub dt: f64,
    pub cycle_interval_steps: usize,
    pub obs_variance: f64,
    /// Std of the Gaussian spread of the initial ensemble around the first truth state.
    pub initial_spread: f64,
    pub radii: Vec<f64>,
    pub radius_sweep_forcing: f64,
    pub window_sweep_forcing: f64,
    /// Permits `F0 == F1` (used to check that identical versions are indistinguishable).
    pub allow_identical_forcing: bool,
    pub emit_local_cme: bool,
}

pub fn default_inflation_grid() -> Vec<f64> {
    (100..=120).map(|i| i as f64 / 100.0).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            correct_forcing: 8.0,
            incorrect_forcings: vec![8.1, 8.3, 8.5, 8.7, 8.9],
            ensemble_size: 40,
            assessment_cycles: 10_000,
            spinup_cycles: 10_000,
            windows: vec![1],
            window_stride: 1,
            localization: None,
            inflation: InflationChoice::AUTO,
            inflation_grid: default_inflation_grid(),
            tuning_cycles: 2_000,
            seed: 42,
            indicators: vec![IndicatorKind::Rmse, IndicatorKind::Gcme],
            grid_size: 40,
            dt: 0.05,
            cycle_interval_steps: 1,
            obs_variance: 1.0,
            initial_spread: 1.0,
            radii: vec![2.0, 3.0, 4.0, 5.0, 6.0, 8.0],
            radius_sweep_forcing: 8.5,
            window_sweep_forcing: 8.9,
            allow_identical_forcing: false,
            emit_local_cme: false,
        }
    }
}

impl ExperimentConfig {
    /// Ten-member LETKF with `rho_loc = 5` and all three indicators.
    pub fn localized_default() -> Self {
        Self {
            ensemble_size: 10,
            localization: Some(LocalizationConfig::gaspari_cohn(5.0)),
            indicators: IndicatorKind::ALL.to_vec(),
            ..Self::default()
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&bytes)
    }

    pub fn total_cycles(&self) -> usize {
        self.spinup_cycles + self.assessment_cycles
    }

    pub fn localization_spec(&self) -> Result<Option<LocalizationSpec>> {
        self.localization
            .map(|l| l.spec(self.grid_size))
            .transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.assessment_cycles < 1 {
            return fail("assessment_cycles must be at least 1".into());
        }
        if self.ensemble_size < 2 {
            return fail(format!(
                "ensemble_size must be at least 2, got {}",
                self.ensemble_size
            ));
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return fail("windows must be a non-empty list of lengths >= 1".into());
        }
        if let Some(&k) = self.windows.iter().find(|&&k| k > self.assessment_cycles) {
            return fail(format!("window {k} is longer than the assessment period"));
        }
        if self.window_stride < 1 {
            return fail("window_stride must be at least 1".into());
        }
        if self.incorrect_forcings.is_empty() {
            return fail("at least one incorrect forcing is required".into());
        }
        if !self.allow_identical_forcing && self.incorrect_forcings.contains(&self.correct_forcing)
        {
            return fail(format!(
                "incorrect_forcings contains the correct forcing {}",
                self.correct_forcing
            ));
        }
        if self.indicators.is_empty() {
            return fail("at least one indicator is required".into());
        }
        if self.indicators.contains(&IndicatorKind::Dlcme) && self.localization.is_none() {
            return fail("the dlcme indicator needs a localization setting".into());
        }
        match self.inflation {
            InflationChoice::Fixed(f) if !(f >= 1.0 && f.is_finite()) => {
                return fail(format!("inflation factor must be >= 1, got {f}"));
            }
            InflationChoice::Auto(_) if self.inflation_grid.is_empty() => {
                return fail("inflation_grid is empty".into());
            }
            _ => {}
        }
        if self
            .inflation_grid
            .iter()
            .any(|&f| !(f >= 1.0 && f.is_finite()))
        {
            return fail("inflation_grid values must be >= 1".into());
        }
        if !(self.obs_variance > 0.0) || !(self.initial_spread >= 0.0) {
            return fail("obs_variance must be positive and initial_spread nonnegative".into());
        }
        if self.cycle_interval_steps < 1 {
            return fail("cycle_interval_steps must be at least 1".into());
        }
        if self.radii.iter().any(|&r| !(r > 0.0)) {
            return fail("radii must be positive".into());
        }
        crate::model::L95Config::new(self.correct_forcing, self.dt, self.grid_size)?;
        self.localization_spec()?;
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
