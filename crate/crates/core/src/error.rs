use crate::{bounds::BoundsError, channel::ChannelError, fbl::FblError, graph::GraphError};
use crate::{pipeline::PipelineError, quant::QuantError, ratesolver::SolverError};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Fbl(#[from] FblError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
