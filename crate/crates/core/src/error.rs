use thiserror::Error;

use crate::autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("unknown statistic `{0}`")]
    UnknownStatistic(String),
    #[error("unknown fairret `{0}`")]
    UnknownFairret(String),
    #[error("statistic `{0}` requires condition weights")]
    MissingConditionWeights(String),
    #[error("group {group} has a degenerate denominator ({denominator:e})")]
    DegenerateGroup { group: usize, denominator: f64 },
    #[error("overall statistic has a degenerate denominator ({denominator:e})")]
    DegenerateOverall { denominator: f64 },
    #[error("projection infeasible: no sample in group {group} can move its constraint")]
    Infeasible { group: usize },
    #[error("projection solver: {0}")]
    Solver(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("{count} row(s) contain unknown category values (first: column `{column}`, value `{value}`)")]
    UnknownCategories {
        count: usize,
        column: String,
        value: String,
    },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
