//! Catalog records: assets, versions, flows, runs and provenance.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::checksum::Checksum;
use crate::error::ErrorClass;
use crate::ids::{AssetId, CollectionId, EndpointId, FlowId, FunctionId, PrincipalId, RunId, StorageKey};
use crate::trigger::TriggerRule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataAsset {
    pub asset_id: AssetId,
    pub name: String,
    pub description: String,
    pub tags: BTreeSet<String>,
    pub collection_ref: CollectionId,
    pub source_url: Option<String>,
    pub owner: PrincipalId,
    /// Public assets are visible to every caller in search.
    #[serde(default)]
    pub public: bool,
    pub created_at: DateTime<Utc>,
    /// Last time a flow checked this asset's source, whether or not content changed.
    #[serde(default)]
    pub last_polled_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub deleted: bool,
}

/// Parameters for [`crate::registry::Registry::create_asset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewAsset {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    pub collection_ref: CollectionId,
    #[serde(default)]
    pub source_url: Option<String>,
    #[serde(default)]
    pub public: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataVersion {
    pub asset_id: AssetId,
    pub version: u64,
    pub checksum: Checksum,
    pub size_bytes: u64,
    pub media_type: String,
    pub storage_key: StorageKey,
    pub created_at: DateTime<Utc>,
    pub provenance: Option<ProvenanceRecord>,
}

/// A version plus the URL at which the collection server hands out its bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionMetadata {
    #[serde(flatten)]
    pub version: DataVersion,
    pub collection_ref: CollectionId,
    pub download_url: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionSelector {
    Latest,
    Pinned(u64),
}

impl std::str::FromStr for VersionSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "latest" {
            return Ok(Self::Latest);
        }
        match s.parse::<u64>() {
            Ok(n) if n > 0 => Ok(Self::Pinned(n)),
            _ => Err(format!("expected `latest` or a positive version number, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub output: VersionRef,
    pub run_id: RunId,
    pub function_ref: FunctionId,
    pub inputs: Vec<VersionRef>,
    pub recorded_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VersionRef {
    pub asset_id: AssetId,
    pub version: u64,
}

impl VersionRef {
    pub fn new(asset_id: AssetId, version: u64) -> Self {
        Self { asset_id, version }
    }
}

/// Outcome of committing staged content to an asset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitResult {
    NewVersion(u64),
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    Ingestion,
    Analysis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputBinding {
    pub asset_id: AssetId,
    #[serde(default = "latest")]
    pub selector: VersionSelector,
}

fn latest() -> VersionSelector {
    VersionSelector::Latest
}

/// Where a flow output lands: an existing asset, or one created at registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputDecl {
    Existing { asset_id: AssetId },
    New(NewAsset),
}

/// A flow as submitted by a user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRequest {
    pub kind: FlowKind,
    pub function: FunctionId,
    pub endpoint: EndpointId,
    #[serde(default)]
    pub inputs: BTreeMap<String, InputBinding>,
    pub outputs: BTreeMap<String, OutputDecl>,
    #[serde(default)]
    pub kwargs: BTreeMap<String, serde_json::Value>,
    pub rule: TriggerRule,
    #[serde(default)]
    pub contact: String,
}

/// A registered flow. Output templates have been materialized into assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub flow_id: FlowId,
    pub kind: FlowKind,
    pub function: FunctionId,
    pub endpoint: EndpointId,
    pub inputs: BTreeMap<String, InputBinding>,
    pub outputs: BTreeMap<String, AssetId>,
    pub kwargs: BTreeMap<String, serde_json::Value>,
    pub rule: TriggerRule,
    pub contact: String,
    pub owner: PrincipalId,
    pub dedup_key: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub deleted: bool,
}

impl FlowSpec {
    /// Input params bound to the latest version of their asset; only these are monitored.
    pub fn monitored_inputs(&self) -> BTreeMap<String, AssetId> {
        self.inputs
            .iter()
            .filter(|(_, b)| b.selector == VersionSelector::Latest)
            .map(|(p, b)| (p.clone(), b.asset_id))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Fetching,
    Executing,
    Committing,
    Succeeded,
    Skipped,
    FailedTransient,
    FailedTerminal,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RunStatus::Succeeded
                | RunStatus::Skipped
                | RunStatus::FailedTransient
                | RunStatus::FailedTerminal
        )
    }

    /// Whether `self -> next` is a legal run transition.
    pub fn can_become(self, next: RunStatus) -> bool {
        use RunStatus::*;
        if self.is_terminal() {
            return false;
        }
        match next {
            FailedTransient | FailedTerminal => true,
            Fetching => self == Pending,
            Executing => matches!(self, Pending | Fetching),
            Committing => self == Executing,
            Succeeded => self == Committing,
            Skipped => matches!(self, Fetching | Executing | Committing),
            Pending => false,
        }
    }
}

/// Why a flow was started.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum DispatchReason {
    Timer,
    InputUpdate { asset_id: AssetId, version: u64 },
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub name: String,
    pub started_at: DateTime<Utc>,
    pub ended_at: DateTime<Utc>,
    pub outcome: StepOutcome,
    /// Timestamps reported by the user function itself, when the step ran one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polls: Option<u32>,
    /// When each status poll happened.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub poll_at: Vec<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub started: DateTime<Utc>,
    pub ended: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunError {
    pub class: ErrorClass,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRun {
    pub run_id: RunId,
    pub flow_id: FlowId,
    pub status: RunStatus,
    pub attempt: u32,
    /// The first attempt of the dispatch this run retries, if any.
    #[serde(default)]
    pub retry_of: Option<RunId>,
    pub reason: DispatchReason,
    pub resolved_inputs: BTreeMap<String, VersionRef>,
    pub produced_outputs: BTreeMap<String, VersionRef>,
    pub step_records: Vec<StepRecord>,
    pub error: Option<RunError>,
    pub started_at: DateTime<Utc>,
    pub ended_at: Option<DateTime<Utc>>,
}

/// A terminal-failure notification and whether the sink accepted it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub flow_id: FlowId,
    pub run_id: RunId,
    pub contact: String,
    pub sink: String,
    pub delivered: bool,
    pub error: Option<String>,
    pub at: DateTime<Utc>,
}

/// A version and, recursively, the versions it was computed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceTree {
    pub asset_id: AssetId,
    pub version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<RunId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub function_ref: Option<FunctionId>,
    pub children: Vec<ProvenanceTree>,
}

impl ProvenanceTree {
    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(|c| c.node_count()).sum::<usize>()
    }
}
