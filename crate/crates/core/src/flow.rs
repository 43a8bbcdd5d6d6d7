//! Flow execution: ingestion (fetch, transform, commit) and analysis (resolve, execute, commit).
//!
//! Each dispatch runs one or more attempts. Every attempt is its own [`FlowRun`]
//! record; retries point back at the first attempt through `retry_of`. Work
//! happens in a run-scoped directory that is removed when the attempt ends.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::collection::CollectionStore;
use crate::error::{AeroError, ErrorClass, Result};
use crate::executor::{Executor, FunctionManifest, OutputEntry, PollingPolicy, ResultManifest, ResultStatus};
use crate::fetch::{FetchConfig, Fetcher};
use crate::ids::{AssetId, RunId};
use crate::model::{
    CommitResult, DataVersion, DispatchReason, FlowKind, FlowRun, FlowSpec, RunError, RunStatus,
    StepOutcome, StepRecord, TaskTiming, VersionRef,
};
use crate::notify::{Notification, Notifier};
use crate::registry::{CommitRequest, ProvenanceInput, Registry};

/// Parameter name under which ingestion functions receive the fetched source.
pub const SOURCE_PARAM: &str = "source";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_secs: f64,
    pub factor: f64,
    pub max_delay_secs: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_secs: 5.0,
            factor: 2.0,
            max_delay_secs: 300.0,
        }
    }
}

impl RetryPolicy {
    /// Wait before the attempt following `attempt` (attempts count from 1).
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1).min(1024) as i32;
        Duration::from_secs_f64((self.base_delay_secs * self.factor.powi(exp)).min(self.max_delay_secs))
    }
}

pub fn retry_delay(policy: &RetryPolicy, attempt: u32) -> Duration {
    policy.delay(attempt)
}

/// Where a failure came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceCategory {
    ConnectionTimeout,
    Network,
    HttpStatus(u16),
    EndpointUnavailable,
    QueueFull,
    StorageUnavailable,
    TaskTimeout,
    Validation,
    MalformedSource,
    UnknownAsset,
    FunctionError,
}

pub fn classify_error(category: SourceCategory) -> ErrorClass {
    use SourceCategory::*;
    match category {
        ConnectionTimeout | Network | EndpointUnavailable | QueueFull | StorageUnavailable
        | TaskTimeout => ErrorClass::Transient,
        HttpStatus(code) => crate::fetch::status_class(code),
        Validation | MalformedSource | UnknownAsset | FunctionError => ErrorClass::Terminal,
    }
}

fn terminal(message: impl Into<String>) -> AeroError {
    AeroError::Flow {
        class: ErrorClass::Terminal,
        message: message.into(),
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub work_root: PathBuf,
    pub retry: RetryPolicy,
    pub polling: PollingPolicy,
    pub task_timeout: Duration,
    pub fetch: FetchConfig,
}

impl EngineConfig {
    pub fn new(work_root: impl Into<PathBuf>) -> Self {
        Self {
            work_root: work_root.into(),
            retry: RetryPolicy::default(),
            polling: PollingPolicy::default(),
            task_timeout: Duration::from_secs(3600),
            fetch: FetchConfig::default(),
        }
    }
}

/// Everything one dispatch did: its attempts and the versions it committed.
#[derive(Debug, Clone, Default)]
pub struct DispatchOutcome {
    pub runs: Vec<FlowRun>,
    pub commits: Vec<DataVersion>,
}

impl DispatchOutcome {
    pub fn final_run(&self) -> Option<&FlowRun> {
        self.runs.last()
    }
}

enum Ended {
    Succeeded(Vec<DataVersion>),
    Skipped,
}

pub struct FlowEngine {
    registry: Arc<Registry>,
    store: Arc<CollectionStore>,
    executor: Arc<Executor>,
    notifier: Notifier,
    fetcher: Fetcher,
    config: EngineConfig,
}

impl FlowEngine {
    pub fn new(
        registry: Arc<Registry>,
        store: Arc<CollectionStore>,
        executor: Arc<Executor>,
        notifier: Notifier,
        config: EngineConfig,
    ) -> Result<Self> {
        fs::create_dir_all(config.work_root.join("runs"))?;
        Ok(Self {
            fetcher: Fetcher::new(config.fetch.clone())?,
            registry,
            store,
            executor,
            notifier,
            config,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub async fn run_ingestion_flow(&self, flow: &FlowSpec, reason: DispatchReason) -> Result<DispatchOutcome> {
        if flow.kind != FlowKind::Ingestion {
            return Err(AeroError::InvalidFlow(format!("{} is not an ingestion flow", flow.flow_id)));
        }
        Ok(self.execute(flow, reason).await)
    }

    pub async fn run_analysis_flow(&self, flow: &FlowSpec, reason: DispatchReason) -> Result<DispatchOutcome> {
        if flow.kind != FlowKind::Analysis {
            return Err(AeroError::InvalidFlow(format!("{} is not an analysis flow", flow.flow_id)));
        }
        Ok(self.execute(flow, reason).await)
    }

    /// Runs a dispatch to completion, retrying transient failures per the retry policy.
    pub async fn execute(&self, flow: &FlowSpec, reason: DispatchReason) -> DispatchOutcome {
        let mut outcome = DispatchOutcome::default();
        let mut first: Option<RunId> = None;
        // Latest bindings resolve once per dispatch; retries reuse the same versions.
        let mut resolved: Option<BTreeMap<String, VersionRef>> = None;
        let max = self.config.retry.max_attempts.max(1);
        for attempt in 1..=max {
            let mut run = FlowRun {
                run_id: RunId::new(),
                flow_id: flow.flow_id,
                status: RunStatus::Pending,
                attempt,
                retry_of: first,
                reason: reason.clone(),
                resolved_inputs: BTreeMap::new(),
                produced_outputs: BTreeMap::new(),
                step_records: Vec::new(),
                error: None,
                started_at: Utc::now(),
                ended_at: None,
            };
            first.get_or_insert(run.run_id);
            if let Err(e) = self.registry.create_run(run.clone()) {
                tracing::error!(flow = %flow.flow_id, "cannot record run: {e}");
                return outcome;
            }

            let run_dir = self.config.work_root.join("runs").join(run.run_id.to_string());
            let result = match flow.kind {
                FlowKind::Ingestion => self.ingest_attempt(flow, &mut run, &run_dir).await,
                FlowKind::Analysis => self.analysis_attempt(flow, &mut run, &run_dir, &mut resolved).await,
            };
            let _ = fs::remove_dir_all(&run_dir);

            let retry = match result {
                Ok(Ended::Succeeded(commits)) => {
                    run.status = RunStatus::Succeeded;
                    outcome.commits.extend(commits);
                    false
                }
                Ok(Ended::Skipped) => {
                    run.status = RunStatus::Skipped;
                    false
                }
                Err(e) => {
                    let class = e.class();
                    run.status = match class {
                        ErrorClass::Transient => RunStatus::FailedTransient,
                        ErrorClass::Terminal => RunStatus::FailedTerminal,
                    };
                    run.error = Some(RunError {
                        class,
                        message: e.to_string(),
                    });
                    class == ErrorClass::Transient && attempt < max
                }
            };
            run.ended_at = Some(Utc::now());
            self.save(&run);
            outcome.runs.push(run.clone());

            if retry {
                tracing::info!(flow = %flow.flow_id, attempt, "transient failure, retrying");
                tokio::time::sleep(self.config.retry.delay(attempt)).await;
                continue;
            }
            if matches!(run.status, RunStatus::FailedTerminal | RunStatus::FailedTransient) {
                // Exhausted transient retries escalate like terminal failures.
                self.notify_terminal(flow, &run).await;
            }
            break;
        }
        outcome
    }

    /// Sends the one notification owed for a failed run and records its delivery.
    pub async fn notify_terminal(&self, flow: &FlowSpec, run: &FlowRun) {
        let note = Notification {
            flow_id: flow.flow_id,
            run_id: run.run_id,
            status: run.status,
            error_message: run.error.as_ref().map(|e| e.message.clone()).unwrap_or_default(),
            timestamp: Utc::now(),
        };
        let record = self.notifier.deliver(&flow.contact, &note).await;
        if let Err(e) = self.registry.record_delivery(record) {
            tracing::error!(run = %run.run_id, "cannot record delivery: {e}");
        }
    }

    fn save(&self, run: &FlowRun) {
        if let Err(e) = self.registry.update_run(run.run_id, |r| *r = run.clone()) {
            tracing::error!(run = %run.run_id, "cannot update run: {e}");
        }
    }

    fn advance(&self, run: &mut FlowRun, status: RunStatus) {
        run.status = status;
        self.save(run);
    }

    async fn ingest_attempt(&self, flow: &FlowSpec, run: &mut FlowRun, run_dir: &Path) -> Result<Ended> {
        let target = *flow
            .outputs
            .values()
            .next()
            .ok_or_else(|| terminal("ingestion flow has no output"))?;

        self.advance(run, RunStatus::Fetching);
        let mut step = Step::start("fetch");
        let fetched = async {
            let asset = self.registry.asset(target)?;
            let url = asset
                .source_url
                .ok_or_else(|| terminal("target asset has no source_url"))?;
            let in_dir = run_dir.join("in");
            fs::create_dir_all(&in_dir).map_err(AeroError::io_transient)?;
            let path = in_dir.join(SOURCE_PARAM);
            let fetched = self.fetcher.fetch_to(&url, &path).await?;
            let latest = self.registry.latest_checksum(target)?;
            Ok::<_, AeroError>((path, fetched, latest))
        }
        .await;
        let (source_path, fetched, latest) = step.finish(run, fetched)?;
        if latest.as_ref() == Some(&fetched.checksum) {
            self.registry.touch_polled(target)?;
            run.step_records.last_mut().expect("fetch step").outcome = StepOutcome::Skipped;
            return Ok(Ended::Skipped);
        }

        self.advance(run, RunStatus::Executing);
        let inputs = BTreeMap::from([(SOURCE_PARAM.to_string(), source_path)]);
        let result = match self.run_function(flow, run, run_dir, inputs, "transform").await? {
            Some(r) => r,
            None => return Ok(Ended::Skipped),
        };
        let outputs = match_outputs(&flow.outputs, &result)?;

        self.advance(run, RunStatus::Committing);
        let mut step = Step::start("commit");
        let committed = self.commit_outputs(flow, run.run_id, outputs, None);
        let commits = step.finish(run, committed)?;
        debug_assert!(commits.iter().all(|(_, v)| v.asset_id == target));
        self.finish_commits(run, commits)
    }

    async fn analysis_attempt(
        &self,
        flow: &FlowSpec,
        run: &mut FlowRun,
        run_dir: &Path,
        resolved: &mut Option<BTreeMap<String, VersionRef>>,
    ) -> Result<Ended> {
        self.advance(run, RunStatus::Fetching);
        let mut step = Step::start("resolve");
        let staged = (|| {
            if resolved.is_none() {
                let mut map = BTreeMap::new();
                for (param, binding) in &flow.inputs {
                    let v = self.registry.version(binding.asset_id, binding.selector)?;
                    map.insert(param.clone(), VersionRef::new(v.asset_id, v.version));
                }
                *resolved = Some(map);
            }
            let map = resolved.clone().expect("resolved above");
            let in_dir = run_dir.join("in");
            fs::create_dir_all(&in_dir).map_err(AeroError::io_transient)?;
            let mut paths = BTreeMap::new();
            for (param, vref) in &map {
                let asset = self.registry.asset(vref.asset_id)?;
                let dv = self.registry.version(vref.asset_id, crate::model::VersionSelector::Pinned(vref.version))?;
                self.store.check(asset.collection_ref, flow.owner, crate::auth::Permission::Read)?;
                let src = self.store.object_path(asset.collection_ref, dv.storage_key)?;
                let dest = in_dir.join(param);
                fs::copy(&src, &dest).map_err(AeroError::io_transient)?;
                paths.insert(param.clone(), dest);
            }
            Ok::<_, AeroError>((map, paths))
        })();
        let (map, paths) = step.finish(run, staged)?;
        run.resolved_inputs = map;

        self.advance(run, RunStatus::Executing);
        let result = match self.run_function(flow, run, run_dir, paths, "execute").await? {
            Some(r) => r,
            None => return Ok(Ended::Skipped),
        };
        let outputs = match_outputs(&flow.outputs, &result)?;

        self.advance(run, RunStatus::Committing);
        let provenance = ProvenanceInput {
            run_id: run.run_id,
            function_ref: flow.function,
            inputs: run.resolved_inputs.values().copied().collect(),
        };
        let mut step = Step::start("commit");
        let committed = self.commit_outputs(flow, run.run_id, outputs, Some(provenance));
        let commits = step.finish(run, committed)?;
        self.finish_commits(run, commits)
    }

    /// Submits the flow's function and waits for it. `None` means the function chose to skip.
    async fn run_function(
        &self,
        flow: &FlowSpec,
        run: &mut FlowRun,
        run_dir: &Path,
        inputs: BTreeMap<String, PathBuf>,
        step_name: &str,
    ) -> Result<Option<ResultManifest>> {
        let mut step = Step::start(step_name);
        let mut poll_at = Vec::new();
        let result = async {
            let out_dir = run_dir.join("out");
            fs::create_dir_all(&out_dir).map_err(AeroError::io_transient)?;
            let manifest = FunctionManifest {
                run_id: run.run_id,
                inputs,
                kwargs: flow.kwargs.clone(),
                output_dir: out_dir,
                outputs: flow.outputs.keys().cloned().collect(),
                contact: Some(flow.contact.clone()).filter(|c| !c.is_empty()),
            };
            let endpoint = self.registry.endpoint(flow.endpoint)?;
            let function = self.registry.function(flow.function)?;
            let handle = self.executor.submit(&endpoint, &function, &manifest)?;
            let done = self
                .executor
                .await_completion(handle, &self.config.polling, self.config.task_timeout)
                .await?;
            poll_at = done.polls;
            Ok::<_, AeroError>(done.result)
        }
        .await;
        step.polls = Some(poll_at.len() as u32);
        step.poll_at = poll_at;
        if let Ok(r) = &result {
            step.task = Some(TaskTiming {
                started: r.task_started,
                ended: r.task_ended,
            });
        }
        let result = step.finish(run, result)?;
        match result.status {
            ResultStatus::Ok => Ok(Some(result)),
            ResultStatus::Skip => {
                run.step_records.last_mut().expect("step").outcome = StepOutcome::Skipped;
                Ok(None)
            }
            ResultStatus::Error => {
                run.step_records.last_mut().expect("step").outcome = StepOutcome::Failed;
                Err(terminal(format!(
                    "function reported an error: {}",
                    result.error.as_deref().unwrap_or("no message")
                )))
            }
        }
    }

    fn commit_outputs(
        &self,
        flow: &FlowSpec,
        run_id: RunId,
        outputs: Vec<(String, AssetId, OutputEntry)>,
        provenance: Option<ProvenanceInput>,
    ) -> Result<Vec<(String, DataVersion)>> {
        let mut commits = Vec::new();
        for (name, asset_id, entry) in outputs {
            let asset = self.registry.asset(asset_id)?;
            let staged = self.store.stage_file(asset.collection_ref, flow.owner, &entry.path)?;
            let (result, version) = self.registry.commit_version(
                &self.store,
                &CommitRequest {
                    asset_id,
                    checksum: staged.checksum.to_string(),
                    size_bytes: staged.size_bytes,
                    media_type: entry.media_type.clone(),
                    staged_key: staged.key,
                    provenance: provenance.clone(),
                },
            )?;
            if let (CommitResult::NewVersion(_), Some(v)) = (result, version) {
                commits.push((name, v));
            }
        }
        tracing::debug!(flow = %flow.flow_id, run = %run_id, new = commits.len(), "outputs committed");
        Ok(commits)
    }

    fn finish_commits(&self, run: &mut FlowRun, commits: Vec<(String, DataVersion)>) -> Result<Ended> {
        if commits.is_empty() {
            run.step_records.last_mut().expect("commit step").outcome = StepOutcome::Skipped;
            return Ok(Ended::Skipped);
        }
        run.produced_outputs = commits
            .iter()
            .map(|(n, v)| (n.clone(), VersionRef::new(v.asset_id, v.version)))
            .collect();
        Ok(Ended::Succeeded(commits.into_iter().map(|(_, v)| v).collect()))
    }
}

/// Pairs each result output with the declared output of the same name.
pub fn match_outputs(
    declared: &BTreeMap<String, AssetId>,
    result: &ResultManifest,
) -> Result<Vec<(String, AssetId, OutputEntry)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for entry in &result.outputs {
        let asset = declared
            .get(&entry.name)
            .ok_or_else(|| terminal(format!("function produced undeclared output {:?}", entry.name)))?;
        if !seen.insert(entry.name.clone()) {
            return Err(terminal(format!("output {:?} reported twice", entry.name)));
        }
        out.push((entry.name.clone(), *asset, entry.clone()));
    }
    let missing: Vec<&String> = declared.keys().filter(|k| !seen.contains(*k)).collect();
    if !missing.is_empty() {
        return Err(terminal(format!("declared outputs missing from result: {missing:?}")));
    }
    Ok(out)
}

struct Step {
    name: String,
    started_at: chrono::DateTime<Utc>,
    task: Option<TaskTiming>,
    polls: Option<u32>,
    poll_at: Vec<chrono::DateTime<Utc>>,
}

impl Step {
    fn start(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            started_at: Utc::now(),
            task: None,
            polls: None,
            poll_at: Vec::new(),
        }
    }

    fn finish<T>(&mut self, run: &mut FlowRun, result: Result<T>) -> Result<T> {
        run.step_records.push(StepRecord {
            name: std::mem::take(&mut self.name),
            started_at: self.started_at,
            ended_at: Utc::now(),
            outcome: if result.is_ok() { StepOutcome::Ok } else { StepOutcome::Failed },
            task: self.task.take(),
            polls: self.polls.take(),
            poll_at: std::mem::take(&mut self.poll_at),
        });
        result
    }
}
