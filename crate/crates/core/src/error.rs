//! Crate-level error wrapping every module error.

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::config::ConfigError;
use crate::evaluator::EvalError;
use crate::graph::GraphError;
use crate::metrics::MetricsError;
use crate::pipeline::PipelineError;
use crate::prompts::PromptError;
use crate::sampler::SampleError;
use crate::services::ServiceError;
use crate::store::StoreError;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Transport,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        let transport = match self {
            Error::Service(e) => e.is_transport(),
            Error::Pipeline(e) => e.is_transport(),
            Error::Eval(e) => e.is_transport(),
            _ => false,
        };
        if transport {
            ErrorKind::Transport
        } else {
            ErrorKind::Validation
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
