//! Resumable experiment sweeps and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use maskdiff_core::dataset::Split;
use maskdiff_core::harness::{
    aggregate, column_winners, run_cell, CellKey, CellOutcome, DaMethod, ExperimentGrid, HarnessError, ResultRow,
    SweepData,
};
use maskdiff_core::AnnotatedPair;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointError};
use crate::io::{self, IoError};
use crate::manifest::{self, ManifestError};

pub const JOURNAL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("run directory {0} holds a different configuration")]
    ConfigChanged(PathBuf),
    #[error("no result rows")]
    NoRows,
}

/// Contents of a grid file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub grid: ExperimentGrid,
    /// Real data with a train/val/test split.
    pub real_manifest: PathBuf,
    /// Curated synthetic pool; required when the grid contains SYN.
    #[serde(default)]
    pub synthetic_manifest: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, SweepError> {
        let mut s: Self = io::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        s.real_manifest = base.join(&s.real_manifest);
        s.synthetic_manifest = s.synthetic_manifest.map(|p| base.join(p));
        s.run_dir = base.join(&s.run_dir);
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellRecord {
    Done {
        outcome: CellOutcome,
        wall_time_s: f64,
        checkpoint: PathBuf,
        checkpoint_sha256: String,
    },
    Failed {
        key: CellKey,
        error: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Journal {
    pub version: u32,
    /// `method/n_real/seed` → record.
    pub cells: BTreeMap<String, CellRecord>,
}

pub fn cell_name(k: &CellKey) -> String {
    format!("{}/{}/{}", k.method, k.n_real, k.seed)
}

impl Journal {
    pub fn load_or_new(path: &Path) -> Result<Self, SweepError> {
        if path.is_file() {
            Ok(io::read_json(path)?)
        } else {
            Ok(Self {
                version: JOURNAL_VERSION,
                cells: BTreeMap::new(),
            })
        }
    }

    pub fn is_done(&self, k: &CellKey) -> bool {
        matches!(self.cells.get(&cell_name(k)), Some(CellRecord::Done { .. }))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, SweepError> {
    let bytes = std::fs::read(path).map_err(|source| IoError::Io {
        path: path.into(),
        source,
    })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug)]
pub struct LoadedData {
    pub real_pool: Vec<AnnotatedPair>,
    pub synth_pool: Vec<AnnotatedPair>,
    pub val: Vec<AnnotatedPair>,
    pub test: Vec<AnnotatedPair>,
}

impl LoadedData {
    pub fn load(spec: &SweepSpec) -> Result<Self, SweepError> {
        let synth_pool = match &spec.synthetic_manifest {
            Some(p) => manifest::load_pairs(p, None)?,
            None => Vec::new(),
        };
        Ok(Self {
            real_pool: manifest::load_pairs(&spec.real_manifest, Some(Split::Train))?,
            val: manifest::load_pairs(&spec.real_manifest, Some(Split::Val))?,
            test: manifest::load_pairs(&spec.real_manifest, Some(Split::Test))?,
            synth_pool,
        })
    }

    pub fn view(&self) -> SweepData<'_> {
        SweepData {
            real_pool: &self.real_pool,
            synth_pool: &self.synth_pool,
            val: &self.val,
            test: &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<ResultRow>,
    /// Cells trained during this invocation.
    pub new_runs: usize,
    pub failed: usize,
}

/// Run every cell not already completed in `run_dir/journal.json`.
///
/// Failed cells are recorded and retried on the next invocation; they do not
/// stop the sweep.
pub fn run_sweep(spec: &SweepSpec, data: &LoadedData) -> Result<SweepSummary, SweepError> {
    spec.grid.validate()?;
    let run = &spec.run_dir;
    let frozen = run.join("config.json");
    if frozen.is_file() {
        let old: SweepSpec = io::read_json(&frozen)?;
        if old.grid != spec.grid {
            return Err(SweepError::ConfigChanged(run.clone()));
        }
    } else {
        io::write_json(&frozen, spec)?;
    }
    let journal_path = run.join("journal.json");
    let mut journal = Journal::load_or_new(&journal_path)?;
    let mut new_runs = 0;
    for key in spec.grid.cells() {
        if journal.is_done(&key) {
            continue;
        }
        let name = cell_name(&key);
        log::info!("cell {name}: training");
        let t0 = Instant::now();
        let record = match run_cell(&spec.grid, data.view(), key) {
            Ok((outcome, model)) => {
                let rel = PathBuf::from("checkpoints").join(format!("{}_{}_{}.safetensors", key.method, key.n_real, key.seed));
                checkpoint::save_segmentor(&run.join(&rel), &model)?;
                let wall = t0.elapsed().as_secs_f64();
                log::info!("cell {name}: test DSC {:.4} in {wall:.1}s", outcome.test_dsc);
                CellRecord::Done {
                    checkpoint_sha256: sha256_file(&run.join(&rel))?,
                    checkpoint: rel,
                    outcome,
                    wall_time_s: wall,
                }
            }
            Err(e) => {
                log::warn!("cell {name} failed: {e}");
                CellRecord::Failed {
                    key,
                    error: e.to_string(),
                }
            }
        };
        new_runs += 1;
        journal.cells.insert(name, record);
        io::write_json(&journal_path, &journal)?;
    }
    let rows = rows_from_journal(&spec.grid, &journal);
    io::write_json(&run.join("rows.json"), &rows)?;
    let failed = journal.cells.values().filter(|c| matches!(c, CellRecord::Failed { .. })).count();
    Ok(SweepSummary { rows, new_runs, failed })
}

pub fn rows_from_journal(grid: &ExperimentGrid, journal: &Journal) -> Vec<ResultRow> {
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    let mut times = BTreeMap::new();
    for rec in journal.cells.values() {
        match rec {
            CellRecord::Done {
                outcome, wall_time_s, ..
            } => {
                times.insert(outcome.key, *wall_time_s);
                outcomes.push(outcome.clone());
            }
            CellRecord::Failed { key, error } => failures.push((*key, error.clone())),
        }
    }
    aggregate(grid, &outcomes, &failures, |k| times.get(k).copied().unwrap_or(0.0))
}

/// Row data for `experiment report`: `rows.json` of a run directory.
pub fn load_rows(run_dir: &Path) -> Result<Vec<ResultRow>, SweepError> {
    Ok(io::read_json(&run_dir.join("rows.json"))?)
}

pub const CSV_NOTE: &str = "# std_dsc is the population standard deviation over seeds";

pub fn results_csv(rows: &[ResultRow]) -> Result<String, SweepError> {
    if rows.is_empty() {
        return Err(SweepError::NoRows);
    }
    let seeds: BTreeSet<u64> = rows.iter().flat_map(|r| r.per_seed.iter().map(|p| p.0)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["da_method".to_string(), "n_real".into(), "mean_dsc".into(), "std_dsc".into()];
    header.extend(seeds.iter().map(|s| format!("seed_{s}")));
    let csv_err = |e: csv::Error| IoError::WriteFailure {
        path: "results.csv".into(),
        message: e.to_string(),
    };
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.da_method.to_string(), r.n_real.to_string(), fmt_f(r.mean_dsc), fmt_f(r.std_dsc)];
        for s in &seeds {
            rec.push(r.per_seed.iter().find(|p| p.0 == *s).map(|p| fmt_f(p.1)).unwrap_or_default());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf8");
    Ok(format!("{CSV_NOTE}\n{body}"))
}

fn fmt_f(v: f64) -> String {
    // shortest round-trip form so aggregates can be recomputed exactly
    format!("{v:?}")
}

/// Methods as rows, n_real as columns, `mean ± std` in percent; every
/// column maximum is bold.
pub fn markdown_table(rows: &[ResultRow]) -> Result<String, SweepError> {
    if rows.is_empty() {
        return Err(SweepError::NoRows);
    }
    let winners = column_winners(rows);
    let cols: Vec<usize> = winners.iter().map(|w| w.0).collect();
    let mut methods: Vec<DaMethod> = rows.iter().map(|r| r.da_method).collect();
    methods.sort();
    methods.dedup();
    let mut s = String::from("| DA method |");
    for c in &cols {
        let _ = write!(s, " N_real={c} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(cols.len()));
    s.push('\n');
    for m in &methods {
        let _ = write!(s, "| {m} |");
        for (c, best) in &winners {
            match rows.iter().find(|r| r.da_method == *m && r.n_real == *c) {
                Some(r) if r.mean_dsc.is_finite() => {
                    let cell = format!("{:.2} ± {:.2}", 100.0 * r.mean_dsc, 100.0 * r.std_dsc);
                    if best.contains(m) {
                        let _ = write!(s, " **{cell}** |");
                    } else {
                        let _ = write!(s, " {cell} |");
                    }
                }
                Some(_) => s.push_str(" failed |"),
                None => s.push_str(" – |"),
            }
        }
        s.push('\n');
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub method: DaMethod,
    pub x: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<PlotSeries>,
}

pub fn plot_data(rows: &[ResultRow]) -> Result<PlotData, SweepError> {
    if rows.is_empty() {
        return Err(SweepError::NoRows);
    }
    let mut by: BTreeMap<DaMethod, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.mean_dsc.is_finite()) {
        by.entry(r.da_method).or_default().push(r);
    }
    let series = by
        .into_iter()
        .map(|(method, mut rs)| {
            rs.sort_by_key(|r| r.n_real);
            PlotSeries {
                method,
                x: rs.iter().map(|r| r.n_real).collect(),
                mean: rs.iter().map(|r| r.mean_dsc).collect(),
                std: rs.iter().map(|r| r.std_dsc).collect(),
            }
        })
        .collect();
    Ok(PlotData {
        x_label: "n_real".into(),
        y_label: "mean DSC".into(),
        series,
    })
}

/// Write `results.csv`, `table.md` and `plot.json` into `out`.
pub fn emit_reports(rows: &[ResultRow], out: &Path) -> Result<[PathBuf; 3], SweepError> {
    let csv = results_csv(rows)?;
    let md = markdown_table(rows)?;
    let plot = plot_data(rows)?;
    let paths = [out.join("results.csv"), out.join("table.md"), out.join("plot.json")];
    io::write_atomic(&paths[0], csv.as_bytes())?;
    io::write_atomic(&paths[1], md.as_bytes())?;
    io::write_json(&paths[2], &plot)?;
    Ok(paths)
}
