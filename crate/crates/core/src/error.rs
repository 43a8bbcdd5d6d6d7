use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AssetId, CollectionId, EndpointId, FlowId, FunctionId, RunId, TaskId};

pub type Result<T, E = AeroError> = std::result::Result<T, E>;

/// Whether a failure is worth retrying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Transient,
    Terminal,
}

#[derive(Debug, Error)]
pub enum AeroError {
    #[error("an asset named {name:?} already exists for this owner")]
    DuplicateName { name: String },
    #[error("invalid source url {0:?}: must be an absolute http(s) url")]
    InvalidUrl(String),
    #[error("malformed checksum {0:?}")]
    MalformedChecksum(String),
    #[error("unknown asset {0}")]
    UnknownAsset(AssetId),
    #[error("asset {asset} has no version {version}")]
    UnknownVersion { asset: AssetId, version: u64 },
    #[error("unknown flow {0}")]
    UnknownFlow(FlowId),
    #[error("unknown run {0}")]
    UnknownRun(RunId),
    #[error("unknown function {0}")]
    UnknownFunction(FunctionId),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(EndpointId),
    #[error("unknown collection {0}")]
    UnknownCollection(CollectionId),
    #[error("unknown object key {0}")]
    UnknownKey(String),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("an identical flow is already registered as {0}")]
    DuplicateFlow(FlowId),
    #[error("invalid flow: {0}")]
    InvalidFlow(String),
    #[error("invalid function entry: {0}")]
    InvalidEntry(String),
    #[error("function {function} is not allowed on endpoint {endpoint}")]
    FunctionNotAllowed {
        function: FunctionId,
        endpoint: EndpointId,
    },
    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error("disk full: {0}")]
    DiskFull(String),
    #[error("authentication required")]
    Unauthenticated,
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("malformed filter: {0}")]
    MalformedFilter(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("task failed: {0}")]
    TaskFailed(String),
    #[error("fetch failed ({class:?}): {message}")]
    Fetch { class: ErrorClass, message: String },
    #[error("{class:?} flow failure: {message}")]
    Flow { class: ErrorClass, message: String },
    #[error("state store error: {0}")]
    Persist(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl AeroError {
    /// Retry classification for errors surfacing inside a flow run.
    pub fn class(&self) -> ErrorClass {
        match self {
            AeroError::EndpointUnavailable(_)
            | AeroError::StorageUnavailable(_)
            | AeroError::DiskFull(_)
            | AeroError::Timeout(_)
            | AeroError::Persist(_)
            | AeroError::Io(_) => ErrorClass::Transient,
            AeroError::Fetch { class, .. } | AeroError::Flow { class, .. } => *class,
            _ => ErrorClass::Terminal,
        }
    }

    pub(crate) fn io_transient(err: io::Error) -> Self {
        if err.raw_os_error() == Some(28) {
            AeroError::DiskFull(err.to_string())
        } else {
            AeroError::StorageUnavailable(err.to_string())
        }
    }
}
