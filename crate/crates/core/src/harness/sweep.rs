use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{evaluate, probe_sites, ratio_summary, variance_ratio, Dataset};
use crate::baselines::{magnitude_prune, Norm, PruneSpec};
use crate::folding::{fold_network, FoldError, FoldPlan, RepairMode};
use crate::nn::io::{write_atomic, IoError};
use crate::nn::{bn_recalibrate, BlockRef, Network, NnError};
use crate::repair::{apply_fold_ar, data_repair, deep_inversion, DIConfig, Inversion, RepairError};

/// A compression method compared in sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    FoldNaive,
    FoldAr,
    FoldDir,
    FoldR,
    PruneL1,
    PruneL2,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FoldNaive,
        Method::FoldAr,
        Method::FoldDir,
        Method::FoldR,
        Method::PruneL1,
        Method::PruneL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FoldNaive => "fold-naive",
            Method::FoldAr => "fold-ar",
            Method::FoldDir => "fold-dir",
            Method::FoldR => "fold-r",
            Method::PruneL1 => "prune-l1",
            Method::PruneL2 => "prune-l2",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub sparsities: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub inversion: DIConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sparsities: vec![0.3, 0.5, 0.7],
            methods: Method::ALL.to_vec(),
            seeds: vec![0],
            inversion: DIConfig::default(),
        }
    }
}

/// One grid point. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub sparsity: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub var_ratio_last: f64,
    pub var_ratio_mean_abs_dev: f64,
    /// Total fold cost for folding; removed producer energy for pruning.
    #[serde(rename = "total_J")]
    pub total_j: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep config: {0}")]
    Config(String),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error(transparent)]
    Fold(#[from] FoldError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("sweep table: {0}")]
    Csv(#[from] csv::Error),
    #[error("sweep sidecar: {0}")]
    Json(#[from] serde_json::Error),
}

/// Data shared by every grid point.
pub struct SweepInputs<'a> {
    pub base: &'a Network,
    pub test: &'a Dataset,
    pub calibration: &'a Dataset,
}

type Key = (Method, u64, u64);
type RowSink<'a> = &'a (dyn Fn(&BTreeMap<Key, SweepRow>) -> Result<(), SweepError> + Sync);

fn key(method: Method, sparsity: f64, seed: u64) -> Key {
    (method, sparsity.to_bits(), seed)
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.sparsities.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(SweepError::Config(
                "sparsities, methods and seeds must be non-empty".into(),
            ));
        }
        if let Some(s) = self.sparsities.iter().find(|s| !(0.0..1.0).contains(*s)) {
            return Err(SweepError::Config(format!("sparsity {s} outside [0, 1)")));
        }
        self.inversion.validate()?;
        Ok(())
    }

    /// Grid points in canonical (method, sparsity, seed) order.
    pub fn points(&self) -> Vec<(Method, f64, u64)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            for &s in &self.sparsities {
                for &seed in &self.seeds {
                    out.push((m, s, seed));
                }
            }
        }
        out
    }
}

fn rows_in_grid_order(config: &SweepConfig, done: &BTreeMap<Key, SweepRow>) -> Vec<SweepRow> {
    config
        .points()
        .into_iter()
        .filter_map(|(m, s, seed)| done.get(&key(m, s, seed)).cloned())
        .collect()
}

/// Evaluates one compressed network against the base.
fn measure(
    inputs: &SweepInputs,
    net: &Network,
    reference: &Network,
    channel_map: &[(BlockRef, Vec<Vec<usize>>)],
) -> Result<(f64, f64, f64), NnError> {
    let accuracy = evaluate(net, inputs.test)?;
    let sites = probe_sites(reference);
    let ratios = variance_ratio(reference, net, &inputs.test.features, &sites, channel_map)?;
    let (last, dev) = ratio_summary(&ratios);
    Ok((accuracy, last, dev))
}

/// Runs one grid point. `inversion` must be present for Fold-DIR.
pub fn run_point(
    inputs: &SweepInputs,
    method: Method,
    sparsity: f64,
    seed: u64,
    inversion: Option<&Inversion>,
) -> Result<SweepRow, SweepError> {
    let base = inputs.base;
    let plan = |repair| FoldPlan::uniform(sparsity, repair, seed);
    let (net, map, total_j) = match method {
        Method::PruneL1 | Method::PruneL2 => {
            let norm = if method == Method::PruneL1 { Norm::L1 } else { Norm::L2 };
            let (net, report) = magnitude_prune(base, &PruneSpec { sparsity, norm })?;
            (net, report.channel_map(), report.total_removed_energy())
        }
        _ => {
            let (folded, report) = match method {
                Method::FoldNaive => fold_network(base, &plan(RepairMode::Naive))?,
                Method::FoldAr => apply_fold_ar(base, &plan(RepairMode::Ar))?,
                Method::FoldR => fold_network(base, &plan(RepairMode::Data))?,
                _ => fold_network(base, &plan(RepairMode::Dir))?,
            };
            // A fold with k = n everywhere is the identity; there is nothing to repair.
            let identity = report.groups.iter().all(|g| g.k == g.n);
            let net = match method {
                _ if identity => folded,
                Method::FoldR => data_repair(
                    base,
                    &folded,
                    &report,
                    std::slice::from_ref(&inputs.calibration.features),
                )?,
                Method::FoldDir => {
                    let inv = inversion.expect("Fold-DIR points need a synthesized batch");
                    bn_recalibrate(&folded, std::slice::from_ref(&inv.batch))?
                }
                _ => folded,
            };
            (net, report.channel_map(), report.total_cost())
        }
    };
    let (accuracy, var_ratio_last, var_ratio_mean_abs_dev) = measure(inputs, &net, base, &map)?;
    Ok(SweepRow {
        method,
        sparsity,
        seed,
        accuracy,
        var_ratio_last,
        var_ratio_mean_abs_dev,
        total_j,
    })
}

/// Runs every grid point not already in `done`, calling `on_row` as each completes.
fn run_missing(
    inputs: &SweepInputs,
    config: &SweepConfig,
    jobs: usize,
    done: BTreeMap<Key, SweepRow>,
    on_row: RowSink<'_>,
) -> Result<Vec<SweepRow>, SweepError> {
    config.validate()?;
    let todo: Vec<_> = config
        .points()
        .into_iter()
        .filter(|&(m, s, seed)| !done.contains_key(&key(m, s, seed)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| SweepError::Config(e.to_string()))?;
    let done = Mutex::new(done);
    pool.install(|| -> Result<(), SweepError> {
        let dir_seeds: Vec<u64> = {
            let mut s: Vec<u64> = todo.iter().filter(|p| p.0 == Method::FoldDir).map(|p| p.2).collect();
            s.dedup();
            s.sort_unstable();
            s.dedup();
            s
        };
        let inversions: BTreeMap<u64, Inversion> = dir_seeds
            .par_iter()
            .map(|&seed| {
                let di = DIConfig {
                    seed,
                    ..config.inversion.clone()
                };
                Ok((seed, deep_inversion(inputs.base, &di)?))
            })
            .collect::<Result<_, SweepError>>()?;
        todo.par_iter().try_for_each(|&(m, s, seed)| {
            let row = run_point(inputs, m, s, seed, inversions.get(&seed))?;
            let mut guard = done.lock().expect("no panics while holding the lock");
            guard.insert(key(m, s, seed), row);
            on_row(&guard)
        })
    })?;
    Ok(rows_in_grid_order(config, &done.into_inner().expect("lock released")))
}

/// Runs the full factorial grid with `jobs` worker threads. Rows come back in canonical
/// (method, sparsity, seed) order regardless of scheduling.
pub fn sweep(inputs: &SweepInputs, config: &SweepConfig, jobs: usize) -> Result<SweepResult, SweepError> {
    let rows = run_missing(inputs, config, jobs, BTreeMap::new(), &|_| Ok(()))?;
    Ok(SweepResult { rows })
}

pub fn encode_csv(rows: &[SweepRow]) -> Result<Vec<u8>, SweepError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "method",
            "sparsity",
            "seed",
            "accuracy",
            "var_ratio_last",
            "var_ratio_mean_abs_dev",
            "total_J",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| SweepError::Config(e.to_string()))
}

pub fn decode_csv(bytes: &[u8]) -> Result<Vec<SweepRow>, SweepError> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .map(|r| r.map_err(SweepError::from))
        .collect()
}

/// Sidecar describing a sweep table.
#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a SweepConfig,
    /// How original variances are aggregated when channels merge.
    variance_aggregation: &'static str,
    probe: &'static str,
    rows: &'a [SweepRow],
}

/// Runs the grid, resuming from rows already present in `csv_path`, and rewrites the CSV
/// (atomically, canonical order) after every completed point. The JSON sidecar with the
/// full config is written at the end.
pub fn sweep_to_files(
    inputs: &SweepInputs,
    config: &SweepConfig,
    jobs: usize,
    csv_path: &Path,
    json_path: &Path,
) -> Result<SweepResult, SweepError> {
    let mut done = BTreeMap::new();
    if csv_path.exists() {
        let bytes = std::fs::read(csv_path).map_err(|source| IoError::Io {
            path: csv_path.display().to_string(),
            source,
        })?;
        for row in decode_csv(&bytes)? {
            done.insert(key(row.method, row.sparsity, row.seed), row);
        }
    }
    let write = |done: &BTreeMap<Key, SweepRow>| -> Result<(), SweepError> {
        write_atomic(csv_path, &encode_csv(&rows_in_grid_order(config, done))?)?;
        Ok(())
    };
    let rows = run_missing(inputs, config, jobs, done, &write)?;
    write_atomic(csv_path, &encode_csv(&rows)?)?;
    let sidecar = Sidecar {
        config,
        variance_aggregation: "cluster-mean",
        probe: "test split, post-activation sites",
        rows: &rows,
    };
    write_atomic(json_path, &serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(SweepResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{train, Architecture, SyntheticTask, TrainConfig};

    fn setup() -> (Network, Dataset, Dataset) {
        let task = SyntheticTask {
            seed: 1,
            ..SyntheticTask::default()
        };
        let splits = task.splits(256, 128, 64);
        let net = Architecture::MlpBn { width: 8 }.build(16, 8, 0).unwrap();
        let net = train(
            &net,
            &splits.train,
            &TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        (net, splits.test, splits.calibration)
    }

    fn small_config() -> SweepConfig {
        SweepConfig {
            sparsities: vec![0.0, 0.5],
            methods: vec![Method::FoldNaive, Method::PruneL1],
            seeds: vec![0, 1],
            inversion: DIConfig {
                steps: 5,
                batch: 8,
                ..DIConfig::default()
            },
        }
    }

    #[test]
    fn grid_cardinality_and_base_accuracy_at_zero() {
        let (net, test, calibration) = setup();
        let inputs = SweepInputs {
            base: &net,
            test: &test,
            calibration: &calibration,
        };
        let result = sweep(&inputs, &small_config(), 2).unwrap();
        assert_eq!(result.rows.len(), 8);
        let base = evaluate(&net, &test).unwrap();
        let config = SweepConfig {
            sparsities: vec![0.0],
            methods: Method::ALL.to_vec(),
            ..small_config()
        };
        for row in sweep(&inputs, &config, 2).unwrap().rows {
            assert_eq!(row.accuracy, base, "{}", row.method);
            assert_eq!(row.var_ratio_last, 1.0, "{}", row.method);
        }
    }

    #[test]
    fn csv_round_trip_and_resume() {
        let (net, test, calibration) = setup();
        let inputs = SweepInputs {
            base: &net,
            test: &test,
            calibration: &calibration,
        };
        let dir = tempfile::tempdir().unwrap();
        let (csv_path, json_path) = (dir.path().join("s.csv"), dir.path().join("s.json"));
        let config = small_config();
        let full = sweep_to_files(&inputs, &config, 1, &csv_path, &json_path).unwrap();
        let bytes = std::fs::read(&csv_path).unwrap();
        assert!(bytes.starts_with(b"method,sparsity,seed,accuracy,var_ratio_last,var_ratio_mean_abs_dev,total_J\n"));
        assert_eq!(decode_csv(&bytes).unwrap(), full.rows);
        // Drop the last rows and resume: the rewritten file must be byte-identical.
        let partial = encode_csv(&full.rows[..5]).unwrap();
        std::fs::write(&csv_path, partial).unwrap();
        sweep_to_files(&inputs, &config, 3, &csv_path, &json_path).unwrap();
        assert_eq!(std::fs::read(&csv_path).unwrap(), bytes);
    }
}
