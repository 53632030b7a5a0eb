use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fairgrad::autodiff::Tensor;
use fairgrad::data::{synthesize, SyntheticSpec};
use fairgrad::fairret::{solve_projection, DivergenceKind, ProjectionSolverConfig};
use fairgrad::harness::{
    batch_size_study, run_grid, scatter_svg, train_and_evaluate, DataSource, GridSpec, EVALUATED,
};
use fairgrad::model::TrainConfig;
use fairgrad::statistics::{Statistic, StatisticKind};
use fairgrad::SampleBatch;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "fairgrad",
    version,
    about = "Fairness-regularized training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and report test AUROC and violations as JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Write the trained model as JSON.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Run every missing cell of a grid and append to `<out>/results.csv`.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Also write a violation/AUROC scatter plot.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Project the scores in a CSV onto the fair set and print the result.
    Project {
        /// CSV with a `score` column, a `label` column and the sensitive columns.
        #[arg(long)]
        scores: PathBuf,
        /// Comma-separated sensitive column names.
        #[arg(long, value_delimiter = ',', required = true)]
        sensitive: Vec<String>,
        #[arg(long, default_value = "kl")]
        divergence: DivergenceKind,
        #[arg(long, default_value = "demographic_parity")]
        statistic: StatisticKind,
        #[arg(long, default_value_t = 200)]
        max_iterations: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare mini-batch SmoothMax estimates with the full-data value on a
    /// synthetic set scored by its generating probabilities.
    StudyBatches {
        /// JSON synthetic dataset parameters.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024,4096")]
        sizes: Vec<usize>,
        #[arg(long, default_value = "demographic_parity")]
        statistic: StatisticKind,
    },
}

/// A single training run.
#[derive(Debug, Serialize, Deserialize)]
struct TrainRun {
    data: DataSource,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "default_split")]
    split_ratio: f64,
}

fn default_split() -> f64 {
    0.8
}

#[derive(Serialize)]
struct TrainSummary {
    dataset: String,
    train_auroc: f64,
    test_auroc: f64,
    test_violation: Vec<(String, f64)>,
    seconds: f64,
    skipped_batches: usize,
    capped_solves: usize,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn train(config: &Path, model_out: Option<&Path>) -> Result<()> {
    let run: TrainRun = read_json(config)?;
    let data = run.data.load(&base_dir(config))?;
    let (train_set, test_set) = data.split(run.split_ratio, run.train.seed)?;
    let result = train_and_evaluate(&train_set, &test_set, &run.train)?;
    if let Some(path) = model_out {
        fs::write(path, serde_json::to_string(&result.model)?)?;
    }
    let summary = TrainSummary {
        dataset: data.name,
        train_auroc: result.train_auroc,
        test_auroc: result.test_auroc,
        test_violation: EVALUATED
            .iter()
            .map(|k| k.to_string())
            .zip(result.test_violation)
            .collect(),
        seconds: result.seconds,
        skipped_batches: result.skipped_batches,
        capped_solves: result.capped_solves,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn grid(config: &Path, out: &Path, workers: usize, svg: Option<&Path>) -> Result<()> {
    let spec: GridSpec = read_json(config)?;
    let report = run_grid(&spec, &base_dir(config), out, workers)?;
    let failed = report.rows.iter().filter(|r| r.status != "ok").count();
    eprintln!(
        "{} cells computed, {} already present, {} failed; results in {}",
        report.computed,
        report.skipped,
        failed,
        report.path.display()
    );
    if let Some(path) = svg {
        fs::write(path, scatter_svg(&report.rows, spec.data.name()))?;
    }
    Ok(())
}

/// Reads `score`, `label` and the named sensitive columns.
fn read_scores(path: &Path, sensitive: &[String]) -> Result<(Vec<f64>, SampleBatch)> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("{} has no column {name:?}", path.display()))
    };
    let score_col = column("score")?;
    let label_col = column("label")?;
    let sensitive_cols = sensitive
        .iter()
        .map(|s| column(s))
        .collect::<Result<Vec<_>>>()?;
    let (mut scores, mut labels, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let number = |c: usize| -> Result<f64> {
            record[c]
                .trim()
                .parse()
                .with_context(|| format!("row {}: {:?} is not a number", line + 1, &record[c]))
        };
        scores.push(number(score_col)?);
        labels.push(number(label_col)?);
        rows.push(
            sensitive_cols
                .iter()
                .map(|&c| number(c))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    let n = rows.len();
    let batch = SampleBatch::new(Tensor::zeros(&[n, 1]), labels, Tensor::from_rows(&rows)?)?;
    Ok((scores, batch))
}

#[allow(clippy::too_many_arguments)]
fn project(
    scores_path: &Path,
    sensitive: &[String],
    divergence: DivergenceKind,
    statistic: StatisticKind,
    max_iterations: usize,
    tolerance: f64,
    out: Option<&Path>,
) -> Result<()> {
    let (h, batch) = read_scores(scores_path, sensitive)?;
    let solver = ProjectionSolverConfig {
        max_iterations,
        residual_tolerance: tolerance,
        ..ProjectionSolverConfig::full_convergence()
    };
    let stat = Statistic::new(statistic)?;
    let result = solve_projection(divergence, &stat, &batch, &h, &solver, None)?;
    let mut writer: csv::Writer<Box<dyn std::io::Write>> = csv::Writer::from_writer(match out {
        Some(path) => Box::new(fs::File::create(path)?),
        None => Box::new(std::io::stdout()),
    });
    writer.write_record(["score", "projected"])?;
    for (a, b) in h.iter().zip(&result.f_star) {
        writer.write_record([a.to_string(), b.to_string()])?;
    }
    writer.flush()?;
    eprintln!(
        "{divergence} projection for {statistic}: R = {:.6e}, {} iterations, max residual {:.2e}{}",
        result.objective,
        result.iterations,
        result.max_residual(),
        if result.converged { "" } else { " (capped)" }
    );
    Ok(())
}

fn study_batches(config: &Path, sizes: &[usize], statistic: StatisticKind) -> Result<()> {
    let spec: SyntheticSpec = read_json(config)?;
    let data = synthesize(&spec)?;
    let mut all = vec![data.batch.n()];
    all.extend_from_slice(sizes);
    let rows = batch_size_study(
        &Statistic::new(statistic)?,
        &data.batch,
        &data.bayes_scores,
        &all,
    )?;
    println!("size,chunks,skipped,chunked_mean,full,relative_error");
    for row in rows {
        println!(
            "{},{},{},{},{},{}",
            row.size,
            row.chunks,
            row.skipped,
            row.chunked_mean,
            row.full,
            row.relative_error()
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, model_out } => train(&config, model_out.as_deref()),
        Command::Grid {
            config,
            out,
            workers,
            svg,
        } => grid(&config, &out, workers, svg.as_deref()),
        Command::Project {
            scores,
            sensitive,
            divergence,
            statistic,
            max_iterations,
            tolerance,
            out,
        } => project(
            &scores,
            &sensitive,
            divergence,
            statistic,
            max_iterations,
            tolerance,
            out.as_deref(),
        ),
        Command::StudyBatches {
            config,
            sizes,
            statistic,
        } => study_batches(&config, &sizes, statistic),
    }
}
