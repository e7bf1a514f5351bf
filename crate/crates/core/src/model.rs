//! The Lorenz-95 model on a periodic ring and its fourth-order Runge-Kutta
//! integrator.
//!
//! `dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F`, indices taken modulo `M`.
//! One nondimensional time unit corresponds to 5 days.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest ring that has distinct neighbours `i-2 .. i+1`.
pub const MIN_GRID_SIZE: usize = 4;

/// Days represented by one nondimensional time unit.
pub const DAYS_PER_TIME_UNIT: f64 = 5.0;

/// A model state on the ring grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < MIN_GRID_SIZE {
            return Err(Error::Dimension(format!(
                "state length {} is below the minimum ring size {MIN_GRID_SIZE}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("state component {i} is not finite")));
        }
        Ok(Self(values))
    }

    /// Every component equal to `value`; `constant(F, M)` is the model's fixed point.
    pub fn constant(value: f64, len: usize) -> Self {
        Self(vec![value; len.max(MIN_GRID_SIZE)])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Cyclic shift: component `i` of the result is component `i - shift` of `self`.
    pub fn rotated(&self, shift: usize) -> Self {
        let mut v = self.0.clone();
        v.rotate_right(shift % self.0.len());
        Self(v)
    }
}

impl AsRef<[f64]> for StateVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L95Config {
    pub forcing: f64,
    pub dt: f64,
    pub grid_size: usize,
}

impl Default for L95Config {
    fn default() -> Self {
        Self {
            forcing: 8.0,
            dt: 0.05,
            grid_size: 40,
        }
    }
}

impl L95Config {
    pub fn new(forcing: f64, dt: f64, grid_size: usize) -> Result<Self> {
        let cfg = Self {
            forcing,
            dt,
            grid_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_forcing(self, forcing: f64) -> Self {
        Self { forcing, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.grid_size < MIN_GRID_SIZE {
            return Err(Error::Config(format!(
                "grid size must be at least {MIN_GRID_SIZE}, got {}",
                self.grid_size
            )));
        }
        if !self.forcing.is_finite() {
            return Err(Error::Config("forcing must be finite".into()));
        }
        Ok(())
    }

    /// Duration of one step in days.
    pub fn step_days(&self) -> f64 {
        self.dt * DAYS_PER_TIME_UNIT
    }
}

/// Writes `dx/dt` for the state `x` into `out`.
pub(crate) fn tendency_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let m = x.len();
    debug_assert_eq!(out.len(), m);
    for i in 0..m {
        let xp1 = x[(i + 1) % m];
        let xm1 = x[(i + m - 1) % m];
        let xm2 = x[(i + m - 2) % m];
        out[i] = (xp1 - xm2) * xm1 - x[i] + forcing;
    }
}

/// Scratch buffers for repeated in-place RK4 steps of one ring size.
#[derive(Debug, Clone)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(m: usize) -> Self {
        Self {
            k1: vec![0.0; m],
            k2: vec![0.0; m],
            k3: vec![0.0; m],
            k4: vec![0.0; m],
            tmp: vec![0.0; m],
        }
    }

    /// One classical RK4 step of size `dt`, in place.
    pub fn step(&mut self, x: &mut [f64], forcing: f64, dt: f64) {
        let m = x.len();
        if self.k1.len() != m {
            *self = Self::new(m);
        }
        let half = 0.5 * dt;
        tendency_into(x, forcing, &mut self.k1);
        for i in 0..m {
            self.tmp[i] = x[i] + half * self.k1[i];
        }
        tendency_into(&self.tmp, forcing, &mut self.k2);
        for i in 0..m {
            self.tmp[i] = x[i] + half * self.k2[i];
        }
        tendency_into(&self.tmp, forcing, &mut self.k3);
        for i in 0..m {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        tendency_into(&self.tmp, forcing, &mut self.k4);
        let sixth = dt / 6.0;
        for i in 0..m {
            x[i] += sixth * (self.k1[i] + 2.0 * (self.k2[i] + self.k3[i]) + self.k4[i]);
        }
    }

    pub fn propagate(&mut self, x: &mut [f64], forcing: f64, dt: f64, n_steps: usize) {
        for _ in 0..n_steps {
            self.step(x, forcing, dt);
        }
    }
}

pub fn l95_tendency(x: &StateVector, cfg: &L95Config) -> StateVector {
    let mut out = vec![0.0; x.len()];
    tendency_into(x.as_slice(), cfg.forcing, &mut out);
    StateVector(out)
}

pub fn rk4_step(x: &StateVector, cfg: &L95Config) -> StateVector {
    propagate(x, cfg, 1)
}

pub fn propagate(x: &StateVector, cfg: &L95Config, n_steps: usize) -> StateVector {
    let mut out = x.clone();
    Rk4Workspace::new(x.len()).propagate(out.as_mut_slice(), cfg.forcing, cfg.dt, n_steps);
    out
}

/// Mean error-doubling time, in days, of infinitesimal perturbations.
///
/// For each of `n_pairs` reference states (spun up from seeded random
/// initial conditions) a twin offset by `1e-8` in one component is integrated
/// alongside. Once the separation has at least doubled it is renormalised to
/// its initial size; the elapsed time and the exact log2 growth of that
/// interval are accumulated, so overshoot past the doubling step is not lost.
/// The first `transient_doublings` intervals of every pair are discarded while
/// the perturbation aligns with the fastest-growing direction.
pub fn mean_doubling_time_days(
    cfg: &L95Config,
    n_pairs: usize,
    doublings_per_pair: usize,
    transient_doublings: usize,
    seed: u64,
) -> f64 {
    use rand::Rng;
    const SIZE: f64 = 1e-8;
    let m = cfg.grid_size;
    let mut rng = crate::rng::stream(seed, "diagnostics/doubling-time");
    let mut ws = Rk4Workspace::new(m);
    let mut total_steps = 0usize;
    let mut total_log2_growth = 0.0;
    for _ in 0..n_pairs {
        let mut x: Vec<f64> = (0..m)
            .map(|_| cfg.forcing + rng.gen_range(-1.0..1.0))
            .collect();
        ws.propagate(&mut x, cfg.forcing, cfg.dt, 2000);
        let mut z = x.clone();
        z[rng.gen_range(0..m)] += SIZE;
        for d in 0..transient_doublings + doublings_per_pair {
            let mut steps = 0usize;
            let growth = loop {
                ws.step(&mut x, cfg.forcing, cfg.dt);
                ws.step(&mut z, cfg.forcing, cfg.dt);
                steps += 1;
                let sep = x
                    .iter()
                    .zip(&z)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if sep >= 2.0 * SIZE {
                    for (zi, xi) in z.iter_mut().zip(&x) {
                        *zi = xi + (*zi - xi) * SIZE / sep;
                    }
                    break (sep / SIZE).log2();
                }
            };
            if d >= transient_doublings {
                total_steps += steps;
                total_log2_growth += growth;
            }
        }
    }
    total_steps as f64 / total_log2_growth * cfg.step_days()
}
