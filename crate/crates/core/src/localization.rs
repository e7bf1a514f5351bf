//! Localization tapers and ring geometry.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::twin::ObservationOperator;

/// Gaspari-Cohn compactly supported fifth-order correlation function.
///
/// `G(0) = 1`, `G(1) = 5/24`, and `G(z) = 0` for `z >= 2`.
pub fn gaspari_cohn(z: f64) -> f64 {
    let z = z.abs();
    if z < 1.0 {
        let z2 = z * z;
        1.0 - 5.0 / 3.0 * z2 + 5.0 / 8.0 * z2 * z + 0.5 * z2 * z2 - 0.25 * z2 * z2 * z
    } else if z < 2.0 {
        gaspari_cohn_outer(z)
    } else {
        0.0
    }
}

/// Outer branch on `[1, 2)`; the `2/(3z)` term is singular at the origin.
fn gaspari_cohn_outer(z: f64) -> f64 {
    let z = z.max(1e-12);
    let z2 = z * z;
    4.0 - 5.0 * z + 5.0 / 3.0 * z2 + 5.0 / 8.0 * z2 * z - 0.5 * z2 * z2 + z2 * z2 * z / 12.0
        - 2.0 / (3.0 * z)
}

/// `exp(-r^2 / (2 rho^2))`.
pub fn gaussian_taper(r: f64, loc_radius: f64) -> f64 {
    (-(r * r) / (2.0 * loc_radius * loc_radius)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Taper {
    GaspariCohn,
    Gaussian,
    /// Unit weight everywhere; selection alone is done by the cut-off radius.
    Boxcar,
}

impl Taper {
    /// Weight of an observation at `distance` from the analysed gridpoint.
    pub fn weight(self, distance: f64, loc_radius: f64) -> f64 {
        match self {
            Taper::GaspariCohn => gaspari_cohn(distance / loc_radius),
            Taper::Gaussian => gaussian_taper(distance, loc_radius),
            Taper::Boxcar => 1.0,
        }
    }
}

/// Shortest distance between two gridpoints on a ring of `m` points.
pub fn ring_distance(i: usize, j: usize, m: usize) -> usize {
    let d = i.abs_diff(j) % m;
    d.min(m - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSpec {
    pub loc_radius: f64,
    pub cut_radius: f64,
    pub taper: Taper,
    pub grid_size: usize,
}

impl LocalizationSpec {
    pub fn new(loc_radius: f64, cut_radius: f64, taper: Taper, grid_size: usize) -> Result<Self> {
        let spec = Self {
            loc_radius,
            cut_radius,
            taper,
            grid_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Gaspari-Cohn taper cut at its support, `2 * loc_radius`.
    pub fn gaspari_cohn(loc_radius: f64, grid_size: usize) -> Result<Self> {
        Self::new(loc_radius, 2.0 * loc_radius, Taper::GaspariCohn, grid_size)
    }

    /// Every observation selected with unit weight: the localization-free limit.
    pub fn disabled(grid_size: usize) -> Self {
        Self {
            loc_radius: grid_size as f64,
            cut_radius: grid_size as f64,
            taper: Taper::Boxcar,
            grid_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loc_radius > 0.0 && self.loc_radius.is_finite()) {
            return Err(Error::Config(format!(
                "localization radius must be positive, got {}",
                self.loc_radius
            )));
        }
        if !(self.cut_radius >= 0.0) {
            return Err(Error::Config(format!(
                "cut-off radius must be non-negative, got {}",
                self.cut_radius
            )));
        }
        if self.grid_size == 0 {
            return Err(Error::Config("localization needs a non-empty ring".into()));
        }
        Ok(())
    }

    pub fn weight(&self, distance: f64) -> f64 {
        self.taper.weight(distance, self.loc_radius)
    }
}

/// Observations inside the cut-off disk around one gridpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalSelection {
    /// Positions in the observation vector, increasing.
    pub obs: Vec<usize>,
    /// Ring distance of each selected observation to the gridpoint.
    pub distances: Vec<f64>,
}

impl LocalSelection {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Box-car selection: observations at ring distance `<= cut_radius` from `s`.
pub fn select_local_obs(
    s: usize,
    h: &ObservationOperator,
    loc: &LocalizationSpec,
) -> LocalSelection {
    let m = h.state_size();
    let mut sel = LocalSelection::default();
    for (pos, &gp) in h.observed_indices().iter().enumerate() {
        let d = ring_distance(s, gp, m) as f64;
        if d <= loc.cut_radius {
            sel.obs.push(pos);
            sel.distances.push(d);
        }
    }
    sel
}

/// Tapered precision `taper(d_i) / var_i` for each selected observation.
pub fn local_precision(variances: &[f64], distances: &[f64], loc: &LocalizationSpec) -> Vec<f64> {
    variances
        .iter()
        .zip(distances)
        .map(|(v, &d)| loc.weight(d) / v)
        .collect()
}

/// Precomputed local observation sets for every gridpoint, with zero-weight
/// observations already dropped.
#[derive(Debug, Clone)]
pub struct LocalDomains {
    pub domains: Vec<LocalDomain>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDomain {
    pub obs: Vec<usize>,
    pub precision: Vec<f64>,
}

impl LocalDomains {
    pub fn build(h: &ObservationOperator, variances: &[f64], loc: &LocalizationSpec) -> Self {
        let domains = (0..h.state_size())
            .map(|s| {
                let sel = select_local_obs(s, h, loc);
                let vars: Vec<f64> = sel.obs.iter().map(|&o| variances[o]).collect();
                let prec = local_precision(&vars, &sel.distances, loc);
                let (obs, precision) = sel
                    .obs
                    .into_iter()
                    .zip(prec)
                    .filter(|&(_, p)| p > 0.0)
                    .unzip();
                LocalDomain { obs, precision }
            })
            .collect();
        Self { domains }
    }

    pub fn empty_count(&self) -> usize {
        self.domains.iter().filter(|d| d.obs.is_empty()).count()
    }
}

/// Correlation matrix `C_ij = taper(dist(i, j))` for covariance localization.
pub fn taper_correlation_matrix(loc: &LocalizationSpec) -> DMatrix<f64> {
    let m = loc.grid_size;
    DMatrix::from_fn(m, m, |i, j| loc.weight(ring_distance(i, j, m) as f64))
}
