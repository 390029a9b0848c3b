use std::path::Path;

use maskdiff::manifest;
use maskdiff::sweep::{self, LoadedData, SweepSpec};
use maskdiff_core::harness::{DaMethod, ExperimentGrid};
use maskdiff_core::segmentor::TrainConfig;
use maskdiff_core::Provenance;

fn write_data(dir: &Path) -> SweepSpec {
    let real = manifest::phantom_pairs(40, 32, 1).unwrap();
    let m = manifest::write_pairs(&dir.join("real"), &real, 1).unwrap().with_split(0.6, 6, 1).unwrap();
    m.save(&dir.join("real/manifest.json")).unwrap();

    let mut syn = manifest::phantom_pairs(30, 32, 2).unwrap();
    for p in &mut syn {
        p.provenance = Provenance::SyntheticCurated;
    }
    manifest::write_pairs(&dir.join("syn"), &syn, 2)
        .unwrap()
        .save(&dir.join("syn/manifest.json"))
        .unwrap();

    let grid = ExperimentGrid {
        methods: vec![DaMethod::Baseline, DaMethod::SYN],
        n_real: vec![5, 10],
        total_budget: 20,
        seeds: vec![0, 1],
        train: TrainConfig {
            epochs: 1,
            learning_rate: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let spec = serde_json::json!({
        "grid": grid,
        "real_manifest": "real/manifest.json",
        "synthetic_manifest": "syn/manifest.json",
        "run_dir": "run",
    });
    std::fs::write(dir.join("grid.json"), spec.to_string()).unwrap();
    SweepSpec::load(&dir.join("grid.json")).unwrap()
}

#[test]
fn resume_skips_finished_cells() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_data(dir.path());
    let data = LoadedData::load(&spec).unwrap();

    let first = sweep::run_sweep(&spec, &data).unwrap();
    assert_eq!(first.new_runs, 2 * 2 * 2);
    assert_eq!(first.failed, 0);
    assert_eq!(first.rows.len(), 4);
    for r in &first.rows {
        assert_eq!(r.per_seed.len(), 2);
        assert!(r.mean_dsc.is_finite());
    }

    let second = sweep::run_sweep(&spec, &data).unwrap();
    assert_eq!(second.new_runs, 0);
    assert_eq!(second.rows, first.rows);

    let ckpts = std::fs::read_dir(spec.run_dir.join("checkpoints")).unwrap().count();
    assert!(ckpts >= 8);

    let rows = sweep::load_rows(&spec.run_dir).unwrap();
    let paths = sweep::emit_reports(&rows, &dir.path().join("report")).unwrap();
    for p in paths {
        assert!(p.exists());
    }
}

#[test]
fn changed_grid_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = write_data(dir.path());
    spec.grid.methods = vec![DaMethod::Baseline];
    spec.grid.n_real = vec![5];
    spec.grid.seeds = vec![0];
    let data = LoadedData::load(&spec).unwrap();
    sweep::run_sweep(&spec, &data).unwrap();
    spec.grid.total_budget = 25;
    assert!(sweep::run_sweep(&spec, &data).is_err());
}
