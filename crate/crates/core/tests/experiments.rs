use std::collections::BTreeMap;
use std::path::Path;

use cme_core::experiment::report::{self, RunManifest};
use cme_core::experiment::{
    build_twin, run_radius_sweep, run_selection_experiment, run_window_sweep, tune_inflation,
    write_radius_sweep, write_selection_outputs, DaContext, ExperimentConfig, InflationChoice,
    LocalizationConfig, ModelVersion,
};
use cme_core::selection::IndicatorKind;
use cme_core::Error;

/// Ten-member LETKF, short periods, three-value inflation grid.
fn small_localized() -> ExperimentConfig {
    ExperimentConfig {
        incorrect_forcings: vec![8.5, 8.9],
        assessment_cycles: 400,
        spinup_cycles: 200,
        tuning_cycles: 200,
        inflation_grid: vec![1.02, 1.05, 1.08],
        ..ExperimentConfig::localized_default()
    }
}

fn context<'a>(cfg: &ExperimentConfig, twin: &'a cme_core::twin::TwinRun) -> DaContext<'a> {
    DaContext {
        twin,
        ensemble_size: cfg.ensemble_size,
        initial_spread: cfg.initial_spread,
        localization: cfg.localization_spec().unwrap(),
        seed: cfg.seed,
    }
}

#[test]
fn tuning_returns_the_argmin_of_its_log() {
    let cfg = small_localized();
    let twin = build_twin(&cfg).unwrap();
    let ctx = context(&cfg, &twin);
    let version = ModelVersion::incorrect(8.9);
    let single = tune_inflation(&ctx, &version, &[1.07], 200).unwrap();
    assert_eq!(single.chosen, 1.07);
    assert_eq!(single.scores.len(), 1);

    let log = tune_inflation(&ctx, &version, &[1.0, 1.04, 1.08, 1.12], 200).unwrap();
    let best = log.scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let first_best = log.scores.iter().find(|s| s.1 == best).unwrap().0;
    assert_eq!(log.chosen, first_best);
    assert!(tune_inflation(&ctx, &version, &[], 200).is_err());
}

#[test]
fn tuned_inflation_of_the_global_filter_is_moderate() {
    let cfg = ExperimentConfig {
        assessment_cycles: 1,
        spinup_cycles: 2_000,
        ..ExperimentConfig::default()
    };
    let twin = build_twin(&cfg).unwrap();
    let ctx = context(&cfg, &twin);
    let log = tune_inflation(
        &ctx,
        &ModelVersion::correct(8.0),
        &cfg.inflation_grid,
        cfg.tuning_cycles,
    )
    .unwrap();
    assert!(
        log.chosen > 1.0 && log.chosen < 1.2,
        "chosen {}",
        log.chosen
    );
}

#[test]
fn decisions_are_conserved_per_window() {
    let cfg = ExperimentConfig {
        windows: vec![1, 3, 7],
        ..small_localized()
    };
    let exp = run_selection_experiment(&cfg).unwrap();
    assert_eq!(exp.cells.len(), 2 * 3 * 3);
    for cell in &exp.cells {
        let counts = cell.deltas.counts();
        assert_eq!(counts.total(), cfg.assessment_cycles - cell.window + 1);
        assert_eq!(cell.window_ends.len(), counts.total());
    }
    // every version assimilated the same archive
    assert!(exp.runs().all(|r| r.rmse.len() == cfg.assessment_cycles));
}

#[test]
fn identical_versions_are_indistinguishable() {
    let cfg = ExperimentConfig {
        incorrect_forcings: vec![8.0],
        allow_identical_forcing: true,
        inflation: InflationChoice::Fixed(1.05),
        ..ExperimentConfig::localized_default()
    };
    let exp = run_selection_experiment(&cfg).unwrap();
    for cell in &exp.cells {
        let p = cell.summary.selection_probability;
        assert!(
            p.abs() <= 0.02,
            "{}: selection probability {p}",
            cell.indicator
        );
    }
}

#[test]
fn single_radius_sweep_matches_the_selection_run() {
    let cfg = ExperimentConfig {
        radii: vec![3.0],
        radius_sweep_forcing: 8.9,
        ..small_localized()
    };
    let rows = run_radius_sweep(&cfg).unwrap();
    assert_eq!(rows.len(), 1);
    let direct = run_selection_experiment(&ExperimentConfig {
        incorrect_forcings: vec![8.9],
        localization: Some(LocalizationConfig::gaspari_cohn(3.0)),
        ..cfg.clone()
    })
    .unwrap();
    let row = &rows[0];
    assert_eq!(row.loc_radius, 3.0);
    for &(ind, p, g) in &row.scores {
        let cell = direct.cell(8.9, ind, 1).unwrap();
        assert_eq!(p, cell.summary.selection_probability);
        assert_eq!(g, cell.summary.gini);
    }
    assert_eq!(row.rmse_truth_correct, direct.correct.mean_rmse_truth());

    let dir = tempfile::tempdir().unwrap();
    let path = write_radius_sweep(&rows, dir.path()).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next().unwrap(), report::RADIUS_SWEEP_HEADER);
    assert_eq!(text.lines().count(), 1 + IndicatorKind::ALL.len());
}

#[test]
fn window_sweep_at_one_cycle_matches_the_selection_run() {
    let cfg = ExperimentConfig {
        windows: vec![1, 2],
        ..small_localized()
    };
    let sweep = run_window_sweep(&cfg).unwrap();
    let direct = run_selection_experiment(&ExperimentConfig {
        incorrect_forcings: vec![cfg.window_sweep_forcing],
        windows: vec![1],
        ..cfg.clone()
    })
    .unwrap();
    for ind in IndicatorKind::ALL {
        let a = sweep.cell(cfg.window_sweep_forcing, ind, 1).unwrap();
        let b = direct.cell(cfg.window_sweep_forcing, ind, 1).unwrap();
        assert_eq!(a.deltas, b.deltas);
        assert_eq!(a.summary, b.summary);
    }
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn run_in_pool(cfg: &ExperimentConfig, threads: usize, dir: &Path) -> RunManifest {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| {
        let exp = run_selection_experiment(cfg).unwrap();
        write_selection_outputs(&exp, dir).unwrap()
    })
}

#[test]
fn outputs_are_byte_identical_across_thread_counts() {
    let cfg = ExperimentConfig {
        emit_local_cme: true,
        ..small_localized()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = run_in_pool(&cfg, 1, a.path());
    let mb = run_in_pool(&cfg, 3, b.path());
    assert_eq!(ma, mb);
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert!(ta.len() > 10);
    assert_eq!(ta, tb);
}

#[test]
fn outputs_document_the_run() {
    let cfg = small_localized();
    let dir = tempfile::tempdir().unwrap();
    let exp = run_selection_experiment(&cfg).unwrap();
    let manifest = write_selection_outputs(&exp, dir.path()).unwrap();

    let on_disk: RunManifest = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join(report::MANIFEST_FILE)).unwrap(),
    )
    .unwrap();
    assert_eq!(on_disk, manifest);
    assert_eq!(manifest.config_hash, cfg.hash());
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.inflation.len(), 3);
    for rel in &manifest.outputs {
        assert!(dir.path().join(rel).is_file(), "{}", rel.display());
    }
    // a second experiment on the same seed sees the same observation archive
    let other = run_selection_experiment(&ExperimentConfig {
        incorrect_forcings: vec![8.7],
        ..cfg.clone()
    })
    .unwrap();
    let other_dir = tempfile::tempdir().unwrap();
    let other_manifest = write_selection_outputs(&other, other_dir.path()).unwrap();
    assert_eq!(
        other_manifest.observation_archive_hash,
        manifest.observation_archive_hash
    );
    assert_ne!(other_manifest.config_hash, manifest.config_hash);

    let rows = report::read_summary(&dir.path().join(report::SUMMARY_FILE)).unwrap();
    assert_eq!(rows.len(), exp.cells.len());
    for (row, cell) in rows.iter().zip(&exp.cells) {
        assert_eq!(row.indicator, cell.indicator);
        assert_eq!(row.incorrect_forcing, cell.incorrect_forcing);
        assert_eq!(row.window, cell.window);
        assert_eq!(
            row.selection_probability,
            cell.summary.selection_probability
        );
        assert_eq!(row.gini, cell.summary.gini);
    }
    for cell in &exp.cells {
        let roc =
            report::read_roc(&dir.path().join("roc").join(report::roc_file_name(cell))).unwrap();
        assert_eq!(roc, cell.summary.roc);
    }
    let evidence =
        std::fs::read_to_string(dir.path().join("evidence").join("evidence_correct_F=8.csv"))
            .unwrap();
    assert_eq!(evidence.lines().next().unwrap(), report::EVIDENCE_HEADER);
    assert_eq!(evidence.lines().count(), 1 + cfg.assessment_cycles);
}

#[test]
fn a_diverging_filter_aborts_the_run() {
    // a two-member ensemble without inflation cannot track observations this precise
    let cfg = ExperimentConfig {
        ensemble_size: 2,
        localization: None,
        indicators: vec![IndicatorKind::Rmse, IndicatorKind::Gcme],
        inflation: InflationChoice::Fixed(1.0),
        obs_variance: 1e-4,
        assessment_cycles: 300,
        spinup_cycles: 0,
        ..ExperimentConfig::default()
    };
    match run_selection_experiment(&cfg) {
        Err(Error::FilterDivergence { cycles, .. }) => assert_eq!(cycles, 100),
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|e| e.cells.len())
        ),
    }
}
