use std::collections::HashSet;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auroc, max_violation};
use crate::data::{
    load_dataset, split_indices, synthesize, DatasetSchema, Standardizer, SyntheticSpec,
};
use crate::fairret::Fairret;
use crate::model::{train, EpochMetrics, Mlp, TrainConfig};
use crate::statistics::{Statistic, StatisticKind};
use crate::{Error, Result, SampleBatch};

/// Statistics whose violations are recorded for every run.
pub const EVALUATED: [StatisticKind; 4] = [
    StatisticKind::DemographicParity,
    StatisticKind::EqualOpportunity,
    StatisticKind::PredictiveParity,
    StatisticKind::TreatmentEquality,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        name: String,
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
    Csv {
        name: String,
        schema: PathBuf,
        data: PathBuf,
    },
}

impl DataSource {
    pub fn name(&self) -> &str {
        match self {
            DataSource::Synthetic { name, .. } | DataSource::Csv { name, .. } => name,
        }
    }

    /// Relative paths are resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<LoadedData> {
        match self {
            DataSource::Synthetic { name, spec } => {
                let batch = synthesize(spec)?.batch;
                Ok(LoadedData {
                    name: name.clone(),
                    numeric_columns: (0..batch.d_x()).collect(),
                    batch,
                })
            }
            DataSource::Csv { name, schema, data } => {
                let schema = DatasetSchema::from_path(base.join(schema))?;
                let (batch, encoder) = load_dataset(&schema, base.join(data))?;
                Ok(LoadedData {
                    name: name.clone(),
                    numeric_columns: if schema.standardize {
                        encoder.numeric_columns
                    } else {
                        Vec::new()
                    },
                    batch,
                })
            }
        }
    }
}

/// An encoded dataset and the columns to standardize on each training split.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub name: String,
    pub batch: SampleBatch,
    pub numeric_columns: Vec<usize>,
}

impl LoadedData {
    /// Seeded split with features standardized on the training part.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(SampleBatch, SampleBatch)> {
        let (train_idx, test_idx) = split_indices(self.batch.n(), ratio, seed)?;
        let (train, test) = (self.batch.select(&train_idx), self.batch.select(&test_idx));
        let scaler = Standardizer::fit(train.features(), &self.numeric_columns)?;
        Ok((scaler.apply(train)?, scaler.apply(test)?))
    }
}

fn default_split() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub data: DataSource,
    pub statistics: Vec<StatisticKind>,
    pub fairrets: Vec<Fairret>,
    pub strengths: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Base configuration; statistic, fairret, strength and seed are set per cell.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_split")]
    pub split_ratio: f64,
}

impl GridSpec {
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &statistic in &self.statistics {
            for &fairret in &self.fairrets {
                for &strength in &self.strengths {
                    for &seed in &self.seeds {
                        cells.push(Cell {
                            dataset: self.data.name().to_string(),
                            statistic,
                            fairret,
                            strength,
                            seed,
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub dataset: String,
    pub statistic: StatisticKind,
    pub fairret: Fairret,
    pub strength: f64,
    pub seed: u64,
}

impl Cell {
    pub fn key(&self) -> String {
        key_of(
            &self.dataset,
            self.statistic,
            self.fairret,
            self.strength,
            self.seed,
        )
    }

    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            statistic: self.statistic,
            fairret: self.fairret,
            strength: self.strength,
            seed: self.seed,
            ..base.clone()
        }
    }
}

pub fn key_of(
    dataset: &str,
    statistic: StatisticKind,
    fairret: Fairret,
    strength: f64,
    seed: u64,
) -> String {
    format!(
        "{dataset}/{}/{fairret}/{strength}/{seed}",
        statistic.short_name()
    )
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: TrainConfig,
    pub model: Mlp,
    pub epochs: Vec<EpochMetrics>,
    pub train_auroc: f64,
    pub test_auroc: f64,
    /// Max violation per statistic in [`EVALUATED`], NaN when undefined on the split.
    pub train_violation: [f64; 4],
    pub test_violation: [f64; 4],
    pub seconds: f64,
    pub skipped_batches: usize,
    pub capped_solves: usize,
}

impl RunResult {
    pub fn test_violation_of(&self, kind: StatisticKind) -> Option<f64> {
        EVALUATED
            .iter()
            .position(|&k| k == kind)
            .map(|i| self.test_violation[i])
    }

    pub fn train_violation_of(&self, kind: StatisticKind) -> Option<f64> {
        EVALUATED
            .iter()
            .position(|&k| k == kind)
            .map(|i| self.train_violation[i])
    }
}

/// AUROC and the violation of every statistic in [`EVALUATED`].
pub fn evaluate(model: &Mlp, batch: &SampleBatch, surrogate_scale: f64) -> Result<(f64, [f64; 4])> {
    let scores = model.forward(batch.features(), surrogate_scale)?;
    let auc = auroc(&scores, batch.labels()).unwrap_or(f64::NAN);
    let mut violations = [f64::NAN; 4];
    for (v, &kind) in violations.iter_mut().zip(&EVALUATED) {
        let stat = Statistic::new(kind)?;
        *v = max_violation(&stat, batch, &scores).unwrap_or(f64::NAN);
    }
    Ok((auc, violations))
}

pub fn train_and_evaluate(
    train_set: &SampleBatch,
    test_set: &SampleBatch,
    config: &TrainConfig,
) -> Result<RunResult> {
    let start = Instant::now();
    let outcome = train(train_set, config)?;
    let (train_auroc, train_violation) =
        evaluate(&outcome.model, train_set, config.surrogate_scale)?;
    let (test_auroc, test_violation) = evaluate(&outcome.model, test_set, config.surrogate_scale)?;
    Ok(RunResult {
        config: config.clone(),
        model: outcome.model,
        epochs: outcome.epochs,
        train_auroc,
        test_auroc,
        train_violation,
        test_violation,
        seconds: start.elapsed().as_secs_f64(),
        skipped_batches: outcome.skipped_batches,
        capped_solves: outcome.capped_solves,
    })
}

/// Trains and evaluates one cell on its own seeded split.
pub fn run_cell(data: &LoadedData, cell: &Cell, spec: &GridSpec) -> Result<RunResult> {
    let (train_set, test_set) = data.split(spec.split_ratio, cell.seed)?;
    train_and_evaluate(&train_set, &test_set, &cell.config(&spec.train))
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub statistic: String,
    pub fairret: String,
    pub strength: f64,
    pub seed: u64,
    pub status: String,
    pub train_auroc: Option<f64>,
    pub test_auroc: Option<f64>,
    pub train_dp: Option<f64>,
    pub train_eo: Option<f64>,
    pub train_pp: Option<f64>,
    pub train_te: Option<f64>,
    pub test_dp: Option<f64>,
    pub test_eo: Option<f64>,
    pub test_pp: Option<f64>,
    pub test_te: Option<f64>,
    pub skipped_batches: Option<usize>,
    pub seconds: f64,
    pub message: String,
}

impl ResultRow {
    pub fn key(&self) -> String {
        format!(
            "{}/{}/{}/{}/{}",
            self.dataset, self.statistic, self.fairret, self.strength, self.seed
        )
    }

    fn from_outcome(cell: &Cell, outcome: &Result<RunResult>, seconds: f64) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        let mut row = Self {
            dataset: cell.dataset.clone(),
            statistic: cell.statistic.short_name().to_string(),
            fairret: cell.fairret.to_string(),
            strength: cell.strength,
            seed: cell.seed,
            status: "ok".into(),
            train_auroc: None,
            test_auroc: None,
            train_dp: None,
            train_eo: None,
            train_pp: None,
            train_te: None,
            test_dp: None,
            test_eo: None,
            test_pp: None,
            test_te: None,
            skipped_batches: None,
            seconds,
            message: String::new(),
        };
        match outcome {
            Ok(r) => {
                row.train_auroc = finite(r.train_auroc);
                row.test_auroc = finite(r.test_auroc);
                [row.train_dp, row.train_eo, row.train_pp, row.train_te] =
                    r.train_violation.map(finite);
                [row.test_dp, row.test_eo, row.test_pp, row.test_te] = r.test_violation.map(finite);
                row.skipped_batches = Some(r.skipped_batches);
            }
            Err(e) => {
                row.status = "failed".into();
                row.message = e.to_string();
            }
        }
        row
    }

    /// Test violation of the optimized statistic.
    pub fn optimized_test_violation(&self) -> Option<f64> {
        match self.statistic.as_str() {
            "dp" => self.test_dp,
            "eo" => self.test_eo,
            "pp" => self.test_pp,
            "te" => self.test_te,
            _ => None,
        }
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub path: PathBuf,
    /// Every row of the table after the run, in cell order.
    pub rows: Vec<ResultRow>,
    pub computed: usize,
    pub skipped: usize,
}

/// Runs every cell not yet present in `out_dir/results.csv` and appends its
/// row. Relative data paths resolve against `base`.
pub fn run_grid(
    spec: &GridSpec,
    base: &Path,
    out_dir: &Path,
    workers: usize,
) -> Result<GridReport> {
    let cells = spec.cells();
    if cells.is_empty() {
        return Err(Error::InvalidConfig("grid has no cells".into()));
    }
    spec.train.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("results.csv");
    let existing = read_results(&path)?;
    let done: HashSet<String> = existing.iter().map(ResultRow::key).collect();
    let todo: Vec<&Cell> = cells.iter().filter(|c| !done.contains(&c.key())).collect();

    if !todo.is_empty() {
        let data = spec.data.load(base)?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let writer = Mutex::new(
            csv::WriterBuilder::new()
                .has_headers(existing.is_empty() && std::fs::metadata(&path)?.len() == 0)
                .from_writer(file),
        );
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        pool.install(|| {
            todo.par_iter().try_for_each(|cell| -> Result<()> {
                let start = Instant::now();
                let outcome = run_cell(&data, cell, spec);
                let row = ResultRow::from_outcome(cell, &outcome, start.elapsed().as_secs_f64());
                let mut w = writer.lock().expect("result writer poisoned");
                w.serialize(&row)?;
                w.flush()?;
                Ok(())
            })
        })?;
    }

    let table = read_results(&path)?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let key = cell.key();
        if let Some(row) = table.iter().find(|r| r.key() == key) {
            rows.push(row.clone());
        }
    }
    Ok(GridReport {
        path,
        rows,
        computed: todo.len(),
        skipped: cells.len() - todo.len(),
    })
}
