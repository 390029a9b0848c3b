//! Experiment grid: hybrid training sets, per-cell fine-tuning, aggregation.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;

use crate::augment::{AugmentPolicy, PolicyKind};
use crate::image::{AnnotatedPair, Provenance};
use crate::rng;
use crate::segmentor::{evaluate, fine_tune, SegConfig, SegError, SegModel, TrainConfig};

/// Fixed training-set size of every synthetic-augmented cell.
pub const DEFAULT_TOTAL_BUDGET: usize = 500;
pub const DEFAULT_REPEATS: usize = 5;
/// Real-image counts of the published grid.
pub const PAPER_N_REAL: [usize; 7] = [5, 10, 20, 50, 100, 300, 500];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DaMethod {
    #[cfg_attr(feature = "serde", serde(rename = "baseline"))]
    Baseline,
    WA,
    SA,
    SYN,
}

impl DaMethod {
    pub const ALL: [DaMethod; 4] = [DaMethod::Baseline, DaMethod::WA, DaMethod::SA, DaMethod::SYN];

    pub fn as_str(self) -> &'static str {
        match self {
            DaMethod::Baseline => "baseline",
            DaMethod::WA => "WA",
            DaMethod::SA => "SA",
            DaMethod::SYN => "SYN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for DaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("{which} pool has {available} usable items, {needed} needed")]
    InsufficientPool {
        which: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("invalid experiment config: {0}")]
    BadConfig(String),
    #[error("no result rows")]
    NoRows,
    #[error(transparent)]
    Seg(#[from] SegError),
}

/// One cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CellKey {
    pub method: DaMethod,
    pub n_real: usize,
    pub seed: u64,
}

/// Parameters of the classical baselines (`augment.weak.*`, `augment.strong.*`).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AugmentConfig {
    pub weak: AugmentPolicy,
    pub strong: AugmentPolicy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak: AugmentPolicy::for_kind(PolicyKind::Weak),
            strong: AugmentPolicy::for_kind(PolicyKind::Strong),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ExperimentGrid {
    pub methods: Vec<DaMethod>,
    pub n_real: Vec<usize>,
    pub total_budget: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub model: SegConfig,
    pub augment: AugmentConfig,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            methods: DaMethod::ALL.to_vec(),
            n_real: PAPER_N_REAL.to_vec(),
            total_budget: DEFAULT_TOTAL_BUDGET,
            seeds: (0..DEFAULT_REPEATS as u64).collect(),
            train: TrainConfig::default(),
            model: SegConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.methods.is_empty() || self.n_real.is_empty() || self.seeds.is_empty() {
            return Err(HarnessError::BadConfig("methods, n_real and seeds must be non-empty".into()));
        }
        if let Some(n) = self.n_real.iter().find(|&&n| n == 0 || n > self.total_budget) {
            return Err(HarnessError::BadConfig(alloc::format!(
                "n_real {n} must lie in 1..={}",
                self.total_budget
            )));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Every (method, n_real, seed) cell in a fixed order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &n_real in &self.n_real {
                for &seed in &self.seeds {
                    out.push(CellKey { method, n_real, seed });
                }
            }
        }
        out
    }
}

fn sample_indices(len: usize, k: usize, seed: u64, tag: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::stream(seed, tag));
    idx.truncate(k);
    idx
}

/// The real subset for (n_real, seed): identical across methods.
pub fn choose_real(real: &[AnnotatedPair], n_real: usize, seed: u64) -> Result<Vec<AnnotatedPair>, HarnessError> {
    if real.len() < n_real {
        return Err(HarnessError::InsufficientPool {
            which: "real",
            needed: n_real,
            available: real.len(),
        });
    }
    Ok(sample_indices(real.len(), n_real, rng::derive(seed, n_real as u64), 0x8EA1)
        .into_iter()
        .map(|i| real[i].clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridSet {
    pub pairs: Vec<AnnotatedPair>,
    pub n_real: usize,
    pub n_synthetic: usize,
}

impl HybridSet {
    /// "id:provenance" per entry, for the run log.
    pub fn composition(&self) -> Vec<String> {
        self.pairs
            .iter()
            .map(|p| {
                let tag = match p.provenance {
                    Provenance::Real => "real",
                    Provenance::SyntheticRaw => "synthetic_raw",
                    Provenance::SyntheticCurated => "synthetic_curated",
                };
                alloc::format!("{}:{tag}", p.id)
            })
            .collect()
    }
}

/// `n_real` real pairs plus `total − n_real` curated synthetic pairs.
/// Only `SyntheticCurated` items of the pool are eligible.
pub fn build_hybrid(
    real: &[AnnotatedPair],
    synth_pool: &[AnnotatedPair],
    n_real: usize,
    total: usize,
    seed: u64,
) -> Result<HybridSet, HarnessError> {
    if n_real > total {
        return Err(HarnessError::BadConfig(alloc::format!("n_real {n_real} exceeds budget {total}")));
    }
    let mut pairs = choose_real(real, n_real, seed)?;
    let eligible: Vec<&AnnotatedPair> =
        synth_pool.iter().filter(|p| p.provenance == Provenance::SyntheticCurated).collect();
    let need = total - n_real;
    if eligible.len() < need {
        return Err(HarnessError::InsufficientPool {
            which: "synthetic_curated",
            needed: need,
            available: eligible.len(),
        });
    }
    let picked = sample_indices(eligible.len(), need, rng::derive(seed, n_real as u64), 0x5E7);
    pairs.extend(picked.into_iter().map(|i| eligible[i].clone()));
    Ok(HybridSet {
        pairs,
        n_real,
        n_synthetic: need,
    })
}

/// Inputs shared by every cell of a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a> {
    pub real_pool: &'a [AnnotatedPair],
    pub synth_pool: &'a [AnnotatedPair],
    pub val: &'a [AnnotatedPair],
    pub test: &'a [AnnotatedPair],
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CellOutcome {
    pub key: CellKey,
    pub test_dsc: f64,
    pub train_size: usize,
    pub n_synthetic: usize,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    /// Validation DSC per epoch.
    pub val_history: Vec<f64>,
    /// Checksum of the selected decoder weights.
    pub decoder_checksum: u64,
    pub encoder_checksum: u64,
    pub prompt_checksum: u64,
    pub real_ids: Vec<String>,
}

/// Assemble the cell's training data, fine-tune, and score on the test set.
/// Returns the outcome and the selected model.
pub fn run_cell(
    grid: &ExperimentGrid,
    data: SweepData<'_>,
    key: CellKey,
) -> Result<(CellOutcome, SegModel), HarnessError> {
    let model = SegModel::new(SegConfig {
        seed: rng::derive(grid.model.seed, key.seed),
        ..grid.model.clone()
    });
    let cfg = TrainConfig {
        seed: rng::derive(key.seed, key.n_real as u64),
        ..grid.train.clone()
    };
    let (train, n_synthetic) = match key.method {
        DaMethod::SYN => {
            let h = build_hybrid(data.real_pool, data.synth_pool, key.n_real, grid.total_budget, key.seed)?;
            (h.pairs, h.n_synthetic)
        }
        _ => (choose_real(data.real_pool, key.n_real, key.seed)?, 0),
    };
    let policy = match key.method {
        DaMethod::WA => Some(&grid.augment.weak),
        DaMethod::SA => Some(&grid.augment.strong),
        _ => None,
    };
    let hook = policy.map(|p| move |pair: &AnnotatedPair, s: u64| p.apply(pair, s));
    let out = match &hook {
        Some(h) => fine_tune(&model, &train, data.val, &cfg, Some(h))?,
        None => fine_tune(&model, &train, data.val, &cfg, None)?,
    };
    let test = evaluate(&out.best, data.test, cfg.q_max)?;
    let outcome = CellOutcome {
        key,
        test_dsc: test.mean,
        train_size: train.len(),
        n_synthetic,
        best_epoch: out.best_epoch,
        best_val_dsc: out.best_val_dsc,
        val_history: out.history.iter().filter_map(|e| e.val_dsc).collect(),
        decoder_checksum: out.best.decoder_checksum(),
        encoder_checksum: out.encoder_checksum,
        prompt_checksum: out.prompt_checksum,
        real_ids: train.iter().filter(|p| p.provenance == Provenance::Real).map(|p| p.id.to_string()).collect(),
    };
    Ok((outcome, out.best))
}

/// Aggregated DSC of one (method, n_real).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ResultRow {
    pub da_method: DaMethod,
    pub n_real: usize,
    /// NaN when every seed failed (written as null in JSON).
    #[cfg_attr(feature = "serde", serde(deserialize_with = "null_as_nan"))]
    pub mean_dsc: f64,
    /// Population standard deviation over seeds.
    #[cfg_attr(feature = "serde", serde(deserialize_with = "null_as_nan"))]
    pub std_dsc: f64,
    pub per_seed: Vec<(u64, f64)>,
    pub wall_time_s: f64,
    /// Seeds whose cell failed, with the error text.
    pub failed: Vec<(u64, String)>,
}

#[cfg(feature = "serde")]
fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    use serde::Deserialize;
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Group per-cell outcomes into rows in grid order. `failures` holds cells
/// that errored; `wall_time` maps a cell to its seconds (0 when unknown).
pub fn aggregate(
    grid: &ExperimentGrid,
    outcomes: &[CellOutcome],
    failures: &[(CellKey, String)],
    wall_time: impl Fn(&CellKey) -> f64,
) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for &m in &grid.methods {
        for &n in &grid.n_real {
            let mut per_seed = Vec::new();
            let mut time = 0.0;
            for &s in &grid.seeds {
                if let Some(o) = outcomes.iter().find(|o| o.key == CellKey { method: m, n_real: n, seed: s }) {
                    per_seed.push((s, o.test_dsc));
                    time += wall_time(&o.key);
                }
            }
            let failed: Vec<(u64, String)> = failures
                .iter()
                .filter(|(k, _)| k.method == m && k.n_real == n)
                .map(|(k, e)| (k.seed, e.clone()))
                .collect();
            if per_seed.is_empty() && failed.is_empty() {
                continue;
            }
            let (mean_dsc, std_dsc) = mean_std(&per_seed.iter().map(|p| p.1).collect::<Vec<_>>());
            rows.push(ResultRow {
                da_method: m,
                n_real: n,
                mean_dsc,
                std_dsc,
                per_seed,
                wall_time_s: time,
                failed,
            });
        }
    }
    rows
}

/// For each n_real, the methods whose mean equals the column maximum.
pub fn column_winners(rows: &[ResultRow]) -> Vec<(usize, Vec<DaMethod>)> {
    let mut cols: Vec<usize> = rows.iter().map(|r| r.n_real).collect();
    cols.sort_unstable();
    cols.dedup();
    cols.into_iter()
        .map(|n| {
            let in_col: Vec<&ResultRow> = rows.iter().filter(|r| r.n_real == n && r.mean_dsc.is_finite()).collect();
            let best = in_col.iter().map(|r| r.mean_dsc).fold(f64::NEG_INFINITY, f64::max);
            (n, in_col.iter().filter(|r| r.mean_dsc == best).map(|r| r.da_method).collect())
        })
        .collect()
}
