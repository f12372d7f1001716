//! Process exit codes.

use selfexplain::backend::BackendError;
use selfexplain::corpus::CorpusError;
use selfexplain::metrics::MetricsError;
use selfexplain::selfexplain::PipelineError;
use thiserror::Error;

pub const OK: i32 = 0;
pub const OTHER: i32 = 1;
pub const VALIDATION: i32 = 2;
pub const TRANSPORT: i32 = 3;
pub const CAPABILITY: i32 = 4;

/// Bad configuration or input, detected before or instead of backend work.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct ValidationError(pub String);

fn backend_code(e: &BackendError) -> i32 {
    match e {
        BackendError::Capability(_) => CAPABILITY,
        BackendError::Transport { .. }
        | BackendError::Protocol { .. }
        | BackendError::Script(_) => TRANSPORT,
        BackendError::Config(_) | BackendError::MissingApiKey(_) => VALIDATION,
        BackendError::EmptyContinuation | BackendError::Cache { .. } => OTHER,
    }
}

/// Maps an error to its exit code from the first cause that decides it.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ValidationError>() || cause.is::<CorpusError>() {
            return VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<BackendError>() {
            return backend_code(e);
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            match e {
                PipelineError::Generation { source, .. }
                | PipelineError::Inference { source, .. } => return backend_code(source),
                PipelineError::Io { .. } => return OTHER,
                _ => return VALIDATION,
            }
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            match e {
                MetricsError::Scoring { source, .. } => return backend_code(source),
                MetricsError::Io { .. } => return OTHER,
                _ => return VALIDATION,
            }
        }
    }
    OTHER
}
