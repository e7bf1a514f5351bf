//! Twin-experiment data: the truth trajectory, synthetic observations, and the
//! linear observation operator / diagonal error covariance they are drawn with.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{L95Config, Rk4Workspace, StateVector};
use crate::rng;

/// Linear observation operator that selects a subset of grid components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationOperator {
    observed_indices: Vec<usize>,
    state_size: usize,
}

impl ObservationOperator {
    pub fn new(observed_indices: Vec<usize>, state_size: usize) -> Result<Self> {
        if observed_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "observed indices must be strictly increasing".into(),
            ));
        }
        if let Some(&last) = observed_indices.last() {
            if last >= state_size {
                return Err(Error::Config(format!(
                    "observed index {last} outside a state of size {state_size}"
                )));
            }
        }
        Ok(Self {
            observed_indices,
            state_size,
        })
    }

    /// Every grid component observed.
    pub fn identity(state_size: usize) -> Self {
        Self {
            observed_indices: (0..state_size).collect(),
            state_size,
        }
    }

    pub fn observed_indices(&self) -> &[usize] {
        &self.observed_indices
    }

    pub fn state_size(&self) -> usize {
        self.state_size
    }

    pub fn obs_count(&self) -> usize {
        self.observed_indices.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.observed_indices.iter().map(|&i| x[i]).collect()
    }

    /// Rows of `matrix` at the observed indices (`H A`).
    pub fn apply_rows(&self, matrix: &DMatrix<f64>) -> DMatrix<f64> {
        matrix.select_rows(self.observed_indices.iter())
    }

    /// Transpose scatter `H^T y` into a state-sized vector.
    pub fn scatter(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_size];
        for (&i, &v) in self.observed_indices.iter().zip(y) {
            out[i] = v;
        }
        out
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.obs_count(), self.state_size);
        for (row, &col) in self.observed_indices.iter().enumerate() {
            h[(row, col)] = 1.0;
        }
        h
    }
}

pub fn apply_h(h: &ObservationOperator, x: &StateVector) -> Vec<f64> {
    h.apply(x.as_slice())
}

/// Diagonal observation-error covariance `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalCovariance {
    variances: Vec<f64>,
}

impl DiagonalCovariance {
    pub fn new(variances: Vec<f64>) -> Result<Self> {
        if let Some(i) = variances.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!(
                "observation variance {i} must be positive and finite, got {}",
                variances[i]
            )));
        }
        Ok(Self { variances })
    }

    pub fn uniform(variance: f64, d: usize) -> Result<Self> {
        Self::new(vec![variance; d])
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn len(&self) -> usize {
        self.variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variances.is_empty()
    }

    pub fn log_det(&self) -> f64 {
        self.variances.iter().map(|v| v.ln()).sum()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.variances))
    }

    /// Same variances reordered by `perm` (entry `i` of the result is entry `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            variances: perm.iter().map(|&i| self.variances[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationBatch {
    pub time_index: usize,
    pub values: Vec<f64>,
}

/// How the truth run reaches the attractor before the first recorded cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSpinup {
    pub burn_in_steps: usize,
    pub perturbation_std: f64,
}

impl Default for TruthSpinup {
    fn default() -> Self {
        Self {
            burn_in_steps: 10_000,
            perturbation_std: 0.01,
        }
    }
}

pub fn generate_truth(
    cfg: &L95Config,
    n_cycles: usize,
    cycle_interval_steps: usize,
    seed: u64,
) -> Result<Vec<StateVector>> {
    generate_truth_with(
        cfg,
        n_cycles,
        cycle_interval_steps,
        seed,
        TruthSpinup::default(),
    )
}

/// Truth trajectory starting from `F·1` plus seeded Gaussian noise, burnt in
/// and then recorded once per DA cycle (the first record is cycle 0).
pub fn generate_truth_with(
    cfg: &L95Config,
    n_cycles: usize,
    cycle_interval_steps: usize,
    seed: u64,
    spinup: TruthSpinup,
) -> Result<Vec<StateVector>> {
    cfg.validate()?;
    if n_cycles == 0 {
        return Err(Error::Config("truth needs at least one cycle".into()));
    }
    let mut rng = rng::stream(seed, rng::TRUTH_STREAM);
    let mut x: Vec<f64> = (0..cfg.grid_size)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.forcing + spinup.perturbation_std * z
        })
        .collect();
    let mut ws = Rk4Workspace::new(cfg.grid_size);
    ws.propagate(&mut x, cfg.forcing, cfg.dt, spinup.burn_in_steps);
    let mut truth = Vec::with_capacity(n_cycles);
    truth.push(StateVector::new(x.clone())?);
    for _ in 1..n_cycles {
        ws.propagate(&mut x, cfg.forcing, cfg.dt, cycle_interval_steps);
        truth.push(StateVector::new(x.clone())?);
    }
    Ok(truth)
}

/// `y_k = H x_k + e_k`, `e_k ~ N(0, R)`, from the seed's observation stream.
pub fn synthesize_observations(
    truth: &[StateVector],
    h: &ObservationOperator,
    r: &DiagonalCovariance,
    seed: u64,
) -> Result<Vec<ObservationBatch>> {
    if truth.is_empty() {
        return Err(Error::EmptySeries("truth"));
    }
    if r.len() != h.obs_count() {
        return Err(Error::Dimension(format!(
            "R has {} variances for {} observations",
            r.len(),
            h.obs_count()
        )));
    }
    let std: Vec<f64> = r.variances().iter().map(|v| v.sqrt()).collect();
    let mut rng = rng::stream(seed, rng::OBSERVATION_STREAM);
    truth
        .iter()
        .enumerate()
        .map(|(k, x)| {
            if x.len() != h.state_size() {
                return Err(Error::Dimension(format!(
                    "truth state {k} has length {} but H expects {}",
                    x.len(),
                    h.state_size()
                )));
            }
            let values = h
                .apply(x.as_slice())
                .into_iter()
                .zip(&std)
                .map(|(hx, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    hx + s * z
                })
                .collect();
            Ok(ObservationBatch {
                time_index: k,
                values,
            })
        })
        .collect()
}

/// Metadata written next to the truth/observation CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinMetadata {
    pub seed: u64,
    pub forcing: f64,
    pub grid_size: usize,
    pub dt: f64,
    pub cycle_interval_steps: usize,
    pub truth_burn_in_steps: usize,
    pub obs_variances: Vec<f64>,
    pub observed_indices: Vec<usize>,
}

/// Truth trajectory and its observations for one twin experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinRun {
    pub model: L95Config,
    pub operator: ObservationOperator,
    pub obs_error: DiagonalCovariance,
    pub truth: Vec<StateVector>,
    pub observations: Vec<ObservationBatch>,
    pub rng_seed: u64,
    pub cycle_interval_steps: usize,
    pub truth_burn_in_steps: usize,
}

pub const TRUTH_FILE: &str = "truth.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const METADATA_FILE: &str = "twin.json";

impl TwinRun {
    pub fn generate(
        model: L95Config,
        operator: ObservationOperator,
        obs_error: DiagonalCovariance,
        n_cycles: usize,
        cycle_interval_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        let spinup = TruthSpinup::default();
        let truth = generate_truth_with(&model, n_cycles, cycle_interval_steps, seed, spinup)?;
        let observations = synthesize_observations(&truth, &operator, &obs_error, seed)?;
        Ok(Self {
            model,
            operator,
            obs_error,
            truth,
            observations,
            rng_seed: seed,
            cycle_interval_steps,
            truth_burn_in_steps: spinup.burn_in_steps,
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn metadata(&self) -> TwinMetadata {
        TwinMetadata {
            seed: self.rng_seed,
            forcing: self.model.forcing,
            grid_size: self.model.grid_size,
            dt: self.model.dt,
            cycle_interval_steps: self.cycle_interval_steps,
            truth_burn_in_steps: self.truth_burn_in_steps,
            obs_variances: self.obs_error.variances().to_vec(),
            observed_indices: self.operator.observed_indices().to_vec(),
        }
    }

    /// Writes `truth.csv`, `observations.csv` and `twin.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let truth_path = dir.join(TRUTH_FILE);
        let obs_path = dir.join(OBSERVATIONS_FILE);
        let meta_path = dir.join(METADATA_FILE);
        write_rows(
            &truth_path,
            "x",
            self.model.grid_size,
            self.truth
                .iter()
                .enumerate()
                .map(|(k, x)| (k, x.as_slice())),
        )?;
        write_rows(
            &obs_path,
            "y",
            self.operator.obs_count(),
            self.observations
                .iter()
                .map(|b| (b.time_index, b.values.as_slice())),
        )?;
        let meta = serde_json::to_string_pretty(&self.metadata())?;
        std::fs::write(&meta_path, meta + "\n")?;
        Ok(vec![truth_path, obs_path, meta_path])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: TwinMetadata =
            serde_json::from_reader(BufReader::new(File::open(dir.join(METADATA_FILE))?))?;
        let model = L95Config::new(meta.forcing, meta.dt, meta.grid_size)?;
        let operator = ObservationOperator::new(meta.observed_indices.clone(), meta.grid_size)?;
        let obs_error = DiagonalCovariance::new(meta.obs_variances.clone())?;
        let truth = read_rows(&dir.join(TRUTH_FILE), meta.grid_size)?
            .into_iter()
            .map(|(_, v)| StateVector::new(v))
            .collect::<Result<Vec<_>>>()?;
        let observations: Vec<ObservationBatch> =
            read_rows(&dir.join(OBSERVATIONS_FILE), operator.obs_count())?
                .into_iter()
                .map(|(time_index, values)| ObservationBatch { time_index, values })
                .collect();
        if truth.len() != observations.len() {
            return Err(Error::Format(format!(
                "{} truth rows but {} observation rows",
                truth.len(),
                observations.len()
            )));
        }
        Ok(Self {
            model,
            operator,
            obs_error,
            truth,
            observations,
            rng_seed: meta.seed,
            cycle_interval_steps: meta.cycle_interval_steps,
            truth_burn_in_steps: meta.truth_burn_in_steps,
        })
    }
}

/// 17 significant digits: enough for every `f64` to parse back bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_rows<'a>(
    path: &Path,
    prefix: &str,
    width: usize,
    rows: impl Iterator<Item = (usize, &'a [f64])>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = std::iter::once("cycle".to_string())
        .chain((0..width).map(|i| format!("{prefix}{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (k, values) in rows {
        write!(w, "{k}")?;
        for v in values {
            write!(w, ",{}", fmt_f64(*v))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path, width: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let bad = |what: &str| Error::Format(format!("{}:{}: {what}", path.display(), lineno + 1));
        let k: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| bad("missing cycle index"))?;
        let values = fields
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad("unparsable value")))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != width {
            return Err(bad(&format!(
                "expected {width} values, found {}",
                values.len()
            )));
        }
        rows.push((k, values));
    }
    Ok(rows)
}
