//! CSV and manifest output of the experiments, and aggregation of summary
//! files into tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::{dl_cme, WeightScheme};
use crate::selection::{IndicatorKind, RocCurve};
use crate::twin::fmt_f64;

use super::config::{hex_digest, ExperimentConfig};
use super::runner::{RadiusSweepRow, SelectionCell, SelectionExperiment};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "indicator,F0,K,N,rho_loc,selection_probability,gini";
pub const ROC_HEADER: &str = "threshold,FPR,TPR";
pub const EVIDENCE_HEADER: &str = "cycle,model_tag,log_gcme,log_dlcme";
pub const RADIUS_SWEEP_FILE: &str = "radius_sweep.csv";
pub const RADIUS_SWEEP_HEADER: &str =
    "rho_loc,indicator,selection_probability,gini,rmse_truth_correct,rmse_truth_incorrect";
pub const WINDOW_SWEEP_FILE: &str = "window_sweep.csv";
pub const WINDOW_SWEEP_HEADER: &str = "K,indicator,selection_probability,gini";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflationRecord {
    pub model_tag: String,
    pub forcing: f64,
    pub inflation: f64,
    pub mean_rmse_truth: f64,
}

/// Everything needed to reproduce a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub software_version: String,
    pub observation_archive_hash: String,
    pub inflation: Vec<InflationRecord>,
    pub outputs: Vec<PathBuf>,
    pub config: ExperimentConfig,
}

/// Stable file name fragment for a forcing value.
pub fn forcing_label(f: f64) -> String {
    format!("{f}")
}

fn rho_field(cfg: &ExperimentConfig) -> String {
    cfg.localization
        .map_or_else(|| "none".to_string(), |l| fmt_f64(l.loc_radius))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_roc(path: &Path, roc: &RocCurve) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{ROC_HEADER}")?;
    for p in &roc.points {
        writeln!(
            w,
            "{},{},{}",
            fmt_f64(p.threshold),
            fmt_f64(p.fpr),
            fmt_f64(p.tpr)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_roc(path: &Path) -> Result<RocCurve> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != ROC_HEADER {
        return Err(Error::Format(format!(
            "{}: expected header '{ROC_HEADER}'",
            path.display()
        )));
    }
    let mut points = Vec::new();
    for line in lines {
        let line = line?;
        let f: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if f.len() != 3 {
            return Err(Error::Format(format!(
                "{}: expected 3 columns",
                path.display()
            )));
        }
        points.push(crate::selection::RocPoint {
            threshold: f[0],
            fpr: f[1],
            tpr: f[2],
        });
    }
    Ok(RocCurve { points })
}

fn summary_line(cfg: &ExperimentConfig, cell: &SelectionCell) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        cell.indicator,
        fmt_f64(cell.incorrect_forcing),
        cell.window,
        cfg.ensemble_size,
        rho_field(cfg),
        fmt_f64(cell.summary.selection_probability),
        fmt_f64(cell.summary.gini)
    )
}

pub fn roc_file_name(cell: &SelectionCell) -> String {
    format!(
        "roc_F0={}_{}_K{}.csv",
        forcing_label(cell.incorrect_forcing),
        cell.indicator,
        cell.window
    )
}

fn write_evidence(
    path: &Path,
    exp: &SelectionExperiment,
    run: &super::runner::ModelRun,
) -> Result<()> {
    let uniform = WeightScheme::uniform(exp.config.grid_size);
    let weights = exp.weights.as_ref().unwrap_or(&uniform);
    let emit_local = exp.config.emit_local_cme;
    let mut w = create(path)?;
    write!(w, "{EVIDENCE_HEADER}")?;
    if emit_local {
        for s in 0..exp.config.grid_size {
            write!(w, ",log_local_{s}")?;
        }
    }
    writeln!(w)?;
    for (i, gcme) in run.evidence.log_gcme.iter().enumerate() {
        let local = &run.evidence.log_local[i];
        let dl = if local.is_empty() {
            String::new()
        } else {
            fmt_f64(dl_cme(local, weights)?)
        };
        write!(
            w,
            "{},{},{},{}",
            exp.config.spinup_cycles + i,
            run.version.tag,
            fmt_f64(*gcme),
            dl
        )?;
        if emit_local {
            for s in 0..exp.config.grid_size {
                match local.get(s) {
                    Some(v) => write!(w, ",{}", fmt_f64(*v))?,
                    None => write!(w, ",")?,
                }
            }
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn write_deltas(path: &Path, exp: &SelectionExperiment, forcing: f64, window: usize) -> Result<()> {
    let cells: Vec<&SelectionCell> = exp
        .cells
        .iter()
        .filter(|c| c.incorrect_forcing == forcing && c.window == window)
        .collect();
    let mut w = create(path)?;
    write!(w, "cycle_end")?;
    for c in &cells {
        write!(w, ",delta_{}", c.indicator)?;
    }
    writeln!(w)?;
    if let Some(first) = cells.first() {
        for (i, end) in first.window_ends.iter().enumerate() {
            write!(w, "{}", exp.config.spinup_cycles + end)?;
            for c in &cells {
                write!(w, ",{}", fmt_f64(c.deltas.deltas[i]))?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn observation_hash(exp: &SelectionExperiment) -> String {
    let mut bytes = Vec::with_capacity(exp.twin.len() * exp.twin.operator.obs_count() * 8);
    for b in &exp.twin.observations {
        for v in &b.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    hex_digest(&bytes)
}

/// Writes the summary, ROC curves, per-cycle deltas, evidence series, tuning
/// log and manifest of a selection experiment into `dir`.
pub fn write_selection_outputs(exp: &SelectionExperiment, dir: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(dir)?;
    let cfg = &exp.config;
    let mut outputs = Vec::new();

    let summary_path = dir.join(SUMMARY_FILE);
    let mut w = create(&summary_path)?;
    writeln!(w, "{SUMMARY_HEADER}")?;
    for cell in &exp.cells {
        writeln!(w, "{}", summary_line(cfg, cell))?;
    }
    w.flush()?;
    outputs.push(summary_path);

    for cell in &exp.cells {
        let path = dir.join("roc").join(roc_file_name(cell));
        write_roc(&path, &cell.summary.roc)?;
        outputs.push(path);
    }

    for run in &exp.incorrect {
        for &window in &cfg.windows {
            let path = dir.join("deltas").join(format!(
                "deltas_F0={}_K{window}.csv",
                forcing_label(run.version.forcing)
            ));
            write_deltas(&path, exp, run.version.forcing, window)?;
            outputs.push(path);
        }
    }

    if exp.runs().any(|r| !r.evidence.is_empty()) {
        for run in exp.runs() {
            let name = run.version.tag.replace('/', "_");
            let path = dir.join("evidence").join(format!("evidence_{name}.csv"));
            write_evidence(&path, exp, run)?;
            outputs.push(path);
        }
    }

    let models_path = dir.join("models.csv");
    let mut w = create(&models_path)?;
    writeln!(
        w,
        "model_tag,forcing,inflation,mean_rmse_truth,mean_rmse_forecast,empty_domain_cycles"
    )?;
    for run in exp.runs() {
        let mean_rmse = run.rmse.iter().sum::<f64>() / run.rmse.len() as f64;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            run.version.tag,
            fmt_f64(run.version.forcing),
            fmt_f64(run.inflation),
            fmt_f64(run.mean_rmse_truth()),
            fmt_f64(mean_rmse),
            run.empty_domain_cycles
        )?;
    }
    w.flush()?;
    outputs.push(models_path);

    if !exp.tuning.is_empty() {
        let path = dir.join("tuning.csv");
        let mut w = create(&path)?;
        writeln!(w, "model_tag,factor,mean_rmse_truth,chosen")?;
        for log in &exp.tuning {
            for &(f, s) in &log.scores {
                writeln!(
                    w,
                    "{},{},{},{}",
                    log.version.tag,
                    fmt_f64(f),
                    fmt_f64(s),
                    f == log.chosen
                )?;
            }
        }
        w.flush()?;
        outputs.push(path);
    }

    let manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        observation_archive_hash: observation_hash(exp),
        inflation: exp
            .runs()
            .map(|r| InflationRecord {
                model_tag: r.version.tag.clone(),
                forcing: r.version.forcing,
                inflation: r.inflation,
                mean_rmse_truth: r.mean_rmse_truth(),
            })
            .collect(),
        outputs: outputs
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).to_path_buf())
            .collect(),
        config: cfg.clone(),
    };
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

pub fn write_radius_sweep(rows: &[RadiusSweepRow], dir: &Path) -> Result<PathBuf> {
    let path = dir.join(RADIUS_SWEEP_FILE);
    let mut w = create(&path)?;
    writeln!(w, "{RADIUS_SWEEP_HEADER}")?;
    for row in rows {
        for &(ind, p, g) in &row.scores {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                fmt_f64(row.loc_radius),
                ind,
                fmt_f64(p),
                fmt_f64(g),
                fmt_f64(row.rmse_truth_correct),
                fmt_f64(row.rmse_truth_incorrect)
            )?;
        }
    }
    w.flush()?;
    for row in rows {
        write_selection_outputs(
            &row.experiment,
            &dir.join(format!("rho_{}", forcing_label(row.loc_radius))),
        )?;
    }
    Ok(path)
}

pub fn write_window_sweep(exp: &SelectionExperiment, dir: &Path) -> Result<PathBuf> {
    write_selection_outputs(exp, dir)?;
    let path = dir.join(WINDOW_SWEEP_FILE);
    let mut w = create(&path)?;
    writeln!(w, "{WINDOW_SWEEP_HEADER}")?;
    for &window in &exp.config.windows {
        for cell in exp.cells.iter().filter(|c| c.window == window) {
            writeln!(
                w,
                "{},{},{},{}",
                window,
                cell.indicator,
                fmt_f64(cell.summary.selection_probability),
                fmt_f64(cell.summary.gini)
            )?;
        }
    }
    w.flush()?;
    Ok(path)
}

/// One parsed row of a `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub indicator: IndicatorKind,
    pub incorrect_forcing: f64,
    pub window: usize,
    pub ensemble_size: usize,
    pub loc_radius: Option<f64>,
    pub selection_probability: f64,
    pub gini: f64,
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != SUMMARY_HEADER {
        return Err(Error::Format(format!(
            "{}: expected header '{SUMMARY_HEADER}'",
            path.display()
        )));
    }
    let bad = |what: String| Error::Format(format!("{}: {what}", path.display()));
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 columns in '{line}'")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s}: {e}")));
        rows.push(SummaryRow {
            indicator: f[0].parse()?,
            incorrect_forcing: num(f[1])?,
            window: f[2].parse().map_err(|e| bad(format!("{}: {e}", f[2])))?,
            ensemble_size: f[3].parse().map_err(|e| bad(format!("{}: {e}", f[3])))?,
            loc_radius: if f[4] == "none" {
                None
            } else {
                Some(num(f[4])?)
            },
            selection_probability: num(f[5])?,
            gini: num(f[6])?,
        });
    }
    Ok(rows)
}

/// Finds every `summary.csv` below `root`, in sorted path order.
pub fn find_summaries(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == SUMMARY_FILE) {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Tables of selection probability and Gini with one row per
/// (N, rho_loc, K, F0) and one column per indicator.
pub fn render_tables(rows: &[SummaryRow]) -> (String, String) {
    type Key = (usize, String, usize, String);
    let mut prob: BTreeMap<Key, BTreeMap<IndicatorKind, f64>> = BTreeMap::new();
    let mut gini: BTreeMap<Key, BTreeMap<IndicatorKind, f64>> = BTreeMap::new();
    for r in rows {
        let rho = r
            .loc_radius
            .map_or_else(|| "none".into(), |v| format!("{v}"));
        let key = (
            r.ensemble_size,
            rho,
            r.window,
            format!("{:08.3}", r.incorrect_forcing),
        );
        prob.entry(key.clone())
            .or_default()
            .insert(r.indicator, r.selection_probability);
        gini.entry(key).or_default().insert(r.indicator, r.gini);
    }
    let render = |table: &BTreeMap<Key, BTreeMap<IndicatorKind, f64>>| {
        let mut out = String::from("N,rho_loc,K,F0,rmse,gcme,dlcme\n");
        for ((n, rho, k, f0), cols) in table {
            let f0: f64 = f0.parse().unwrap_or(f64::NAN);
            let _ = write!(out, "{n},{rho},{k},{f0}");
            for ind in IndicatorKind::ALL {
                match cols.get(&ind) {
                    Some(v) => {
                        let _ = write!(out, ",{v:.3}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    };
    (render(&prob), render(&gini))
}
