//! The running service: wires registry, storage, triggers, executor and search together.
//!
//! Every public method takes the calling principal and enforces the ACLs. Flow
//! runs are spawned onto the tokio runtime, bounded by `max_concurrent_flows`.
//! Commits made by runs are indexed for search and fed to the trigger engine,
//! which may dispatch downstream flows.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use tokio::sync::{watch, Semaphore};
use tokio::task::JoinHandle;

use crate::auth::{IssuedToken, Permission, Principal, ResourceRef};
use crate::collection::{Collection, CollectionStore};
use crate::error::{AeroError, Result};
use crate::executor::{EndpointKind, EndpointRef, Executor, FunctionRef, TaskEndpoint};
use crate::fetch::FetchConfig;
use crate::flow::{DispatchOutcome, EngineConfig, FlowEngine, RetryPolicy};
use crate::ids::{AssetId, CollectionId, EndpointId, FlowId, FunctionId, PrincipalId, StorageKey};
use crate::model::{
    CommitResult, DataAsset, DataVersion, DeliveryRecord, DispatchReason, FlowRequest, FlowRun,
    FlowSpec, NewAsset, OutputDecl, ProvenanceTree, RunStatus, VersionMetadata, VersionSelector,
};
use crate::executor::PollingPolicy;
use crate::notify::Notifier;
use crate::registry::{CommitRequest, Registry};
use crate::search::{ProvenanceSummary, SearchEntry, SearchHit, SearchIndex, SearchQuery};
use crate::trigger::{FlowDispatch, TriggerEngine, TriggerRule};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Holds `state/registry.db`, `collections/` and `work/`.
    pub state_dir: PathBuf,
    pub max_concurrent_flows: usize,
    pub tick_interval: Duration,
    pub retry: RetryPolicy,
    pub polling: PollingPolicy,
    pub task_timeout: Duration,
    pub fetch: FetchConfig,
    pub notifier: Notifier,
    /// Staged objects older than this are removed at startup.
    pub staging_ttl: Duration,
}

impl ServiceConfig {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        Self {
            state_dir: state_dir.into(),
            max_concurrent_flows: 32,
            tick_interval: Duration::from_secs(1),
            retry: RetryPolicy::default(),
            polling: PollingPolicy::default(),
            task_timeout: Duration::from_secs(3600),
            fetch: FetchConfig::default(),
            notifier: Notifier::Log,
            staging_ttl: Duration::from_secs(24 * 3600),
        }
    }
}

pub struct Aero {
    registry: Arc<Registry>,
    store: Arc<CollectionStore>,
    executor: Arc<Executor>,
    index: SearchIndex,
    engine: FlowEngine,
    triggers: Mutex<TriggerEngine>,
    slots: Arc<Semaphore>,
    in_flight: watch::Sender<usize>,
    tick_interval: Duration,
}

impl Aero {
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>> {
        let state = config.state_dir.join("state");
        std::fs::create_dir_all(&state)?;
        let registry = Arc::new(Registry::open(state.join("registry.db"))?);
        let store = Arc::new(CollectionStore::open(config.state_dir.join("collections"))?);
        let removed = store.gc_staging(config.staging_ttl)?;
        if removed > 0 {
            tracing::info!(removed, "expired staged objects removed");
        }
        let work = config.state_dir.join("work");
        let executor = Arc::new(Executor::new(work.join("tasks")));
        for ep in registry.endpoints() {
            executor.attach(&ep)?;
        }
        let engine = FlowEngine::new(
            registry.clone(),
            store.clone(),
            executor.clone(),
            config.notifier,
            EngineConfig {
                work_root: work,
                retry: config.retry,
                polling: config.polling,
                task_timeout: config.task_timeout,
                fetch: config.fetch,
            },
        )?;
        let aero = Arc::new(Self {
            registry,
            store,
            executor,
            index: SearchIndex::new(),
            engine,
            triggers: Mutex::new(TriggerEngine::new()),
            slots: Arc::new(Semaphore::new(config.max_concurrent_flows.max(1))),
            in_flight: watch::channel(0).0,
            tick_interval: config.tick_interval,
        });
        aero.close_abandoned_runs()?;
        aero.reindex()?;
        aero.restore_triggers()?;
        Ok(aero)
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn store(&self) -> &CollectionStore {
        &self.store
    }

    pub fn executor(&self) -> &Executor {
        &self.executor
    }

    pub fn index(&self) -> &SearchIndex {
        &self.index
    }

    /// Sets the collection server URL used in download links.
    pub fn set_collection_base_url(&self, url: &str) -> Result<()> {
        self.store.set_base_url(url)?;
        self.reindex()
    }

    /// Starts the timer loop. It stops when the returned handle is aborted.
    pub fn start(self: &Arc<Self>) -> JoinHandle<()> {
        let me = Arc::downgrade(self);
        let period = self.tick_interval;
        tokio::spawn(async move {
            let mut ticker = tokio::time::interval(period);
            ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
            loop {
                ticker.tick().await;
                let Some(me) = me.upgrade() else { break };
                me.tick(Utc::now());
            }
        })
    }

    /// Evaluates timers at `now` and starts whatever is due.
    pub fn tick(self: &Arc<Self>, now: DateTime<Utc>) {
        let due = self.triggers.lock().tick(now);
        for d in due {
            self.spawn(d);
        }
    }

    /// Resolves once no run is executing or queued.
    pub async fn quiesce(&self) {
        let mut rx = self.in_flight.subscribe();
        let _ = rx.wait_for(|n| *n == 0).await;
    }

    /// Params of an update-rule flow whose inputs changed since its last dispatch.
    pub fn pending(&self, flow: FlowId) -> BTreeSet<String> {
        self.triggers.lock().pending(flow)
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.borrow()
    }

    // --- principals ---

    /// Creates the first admin. Refused once any principal exists.
    pub fn bootstrap_admin(&self, name: &str) -> Result<(Principal, IssuedToken)> {
        if !self.registry.principals().is_empty() {
            return Err(AeroError::Forbidden("already bootstrapped".into()));
        }
        let p = self.registry.create_principal(name, true)?;
        let t = self.registry.issue_token(p.principal_id, None)?;
        Ok((p, t))
    }

    pub fn authenticate(&self, token: &str) -> Result<Principal> {
        self.registry.authenticate(token)
    }

    fn require_admin(&self, caller: PrincipalId) -> Result<()> {
        if self.registry.principal(caller)?.is_admin {
            Ok(())
        } else {
            Err(AeroError::Forbidden("admin only".into()))
        }
    }

    /// Creates a principal with a token, or a new token for an existing principal. Admin only.
    pub fn issue_token(
        &self,
        caller: PrincipalId,
        principal: Option<PrincipalId>,
        display_name: &str,
        expires_at: Option<DateTime<Utc>>,
    ) -> Result<(Principal, IssuedToken)> {
        self.require_admin(caller)?;
        let p = match principal {
            Some(id) => self.registry.principal(id)?,
            None => self.registry.create_principal(display_name, false)?,
        };
        let t = self.registry.issue_token(p.principal_id, expires_at)?;
        Ok((p, t))
    }

    pub fn revoke_token(&self, caller: PrincipalId, token: crate::ids::TokenId) -> Result<()> {
        self.require_admin(caller)?;
        self.registry.revoke_token(token)
    }

    // --- collections and ACLs ---

    pub fn create_collection(&self, caller: PrincipalId) -> Result<Collection> {
        self.registry.principal(caller)?;
        self.store.create(caller)
    }

    pub fn grant(
        &self,
        caller: PrincipalId,
        resource: ResourceRef,
        principal: PrincipalId,
        perms: &BTreeSet<Permission>,
    ) -> Result<()> {
        self.registry.principal(principal)?;
        match resource {
            ResourceRef::Collection(cid) => self.store.grant(cid, caller, principal, perms),
            _ => {
                self.registry.grant(caller, resource, principal, perms)?;
                self.refresh_visibility(resource);
                Ok(())
            }
        }
    }

    pub fn revoke(
        &self,
        caller: PrincipalId,
        resource: ResourceRef,
        principal: PrincipalId,
        perms: &BTreeSet<Permission>,
    ) -> Result<()> {
        match resource {
            ResourceRef::Collection(cid) => self.store.revoke(cid, caller, principal, perms),
            _ => {
                self.registry.revoke(caller, resource, principal, perms)?;
                self.refresh_visibility(resource);
                Ok(())
            }
        }
    }

    fn refresh_visibility(&self, resource: ResourceRef) {
        if let ResourceRef::Asset(id) = resource {
            if let Ok(v) = self.registry.visibility(id) {
                self.index.set_visibility(id, &v);
            }
        }
    }

    // --- assets ---

    pub fn create_asset(&self, caller: PrincipalId, spec: &NewAsset) -> Result<DataAsset> {
        self.store.check(spec.collection_ref, caller, Permission::Write)?;
        self.registry.create_asset(caller, spec)
    }

    pub fn asset(&self, caller: PrincipalId, id: AssetId) -> Result<DataAsset> {
        self.registry.authorize(caller, ResourceRef::Asset(id), Permission::Read)?;
        self.registry.asset(id)
    }

    pub fn delete_asset(&self, caller: PrincipalId, id: AssetId) -> Result<()> {
        self.registry.authorize(caller, ResourceRef::Asset(id), Permission::Admin)?;
        self.registry.delete_asset(id)?;
        self.index.remove_asset(id);
        Ok(())
    }

    /// Version metadata with a link to the bytes on the collection server.
    pub fn metadata(&self, caller: PrincipalId, id: AssetId, selector: VersionSelector) -> Result<VersionMetadata> {
        self.registry.authorize(caller, ResourceRef::Asset(id), Permission::Read)?;
        let asset = self.registry.asset(id)?;
        let version = self.registry.version(id, selector)?;
        let download_url = self.store.download_url(asset.collection_ref, version.storage_key)?;
        Ok(VersionMetadata {
            version,
            collection_ref: asset.collection_ref,
            download_url,
        })
    }

    pub fn versions(&self, caller: PrincipalId, id: AssetId) -> Result<Vec<DataVersion>> {
        self.registry.authorize(caller, ResourceRef::Asset(id), Permission::Read)?;
        self.registry.versions(id)
    }

    /// Commits caller-supplied bytes as the asset's next version (unless unchanged).
    pub fn upload(
        self: &Arc<Self>,
        caller: PrincipalId,
        id: AssetId,
        media_type: &str,
        body: impl Read,
    ) -> Result<CommitResult> {
        self.registry.authorize(caller, ResourceRef::Asset(id), Permission::Write)?;
        let asset = self.registry.asset(id)?;
        let staged = self.store.put_staged(asset.collection_ref, caller, body)?;
        let (result, version) = self.registry.commit_version(
            &self.store,
            &CommitRequest {
                asset_id: id,
                checksum: staged.checksum.to_string(),
                size_bytes: staged.size_bytes,
                media_type: media_type.to_owned(),
                staged_key: staged.key,
                provenance: None,
            },
        )?;
        if let Some(v) = version {
            self.after_commit(&v);
        }
        Ok(result)
    }

    pub fn provenance(
        &self,
        caller: PrincipalId,
        id: AssetId,
        version: u64,
        depth: Option<usize>,
    ) -> Result<ProvenanceTree> {
        self.registry.authorize(caller, ResourceRef::Asset(id), Permission::Read)?;
        self.registry.provenance_of(id, version, depth)
    }

    /// Opens a stored object for the collection server.
    pub fn open_object(
        &self,
        caller: PrincipalId,
        cid: CollectionId,
        key: StorageKey,
    ) -> Result<(std::fs::File, crate::collection::ObjectMeta)> {
        self.store.get_object(cid, key, caller)
    }

    // --- functions and endpoints ---

    pub fn register_function(&self, caller: PrincipalId, entry: Vec<String>, description: &str) -> Result<FunctionRef> {
        self.registry.principal(caller)?;
        self.registry.register_function(entry, description, caller)
    }

    pub fn register_endpoint(
        &self,
        caller: PrincipalId,
        kind: EndpointKind,
        slots: Option<u32>,
        base_url: Option<String>,
        allowed_functions: Option<BTreeSet<FunctionId>>,
    ) -> Result<EndpointRef> {
        self.registry.principal(caller)?;
        let ep = self.registry.register_endpoint(EndpointRef {
            endpoint_id: EndpointId::new(),
            kind,
            slots,
            base_url,
            allowed_functions,
            owner: caller,
            created_at: Utc::now(),
        })?;
        self.executor.attach(&ep)?;
        Ok(ep)
    }

    /// Swaps the runtime behind an endpoint (fault injection, custom adapters).
    pub fn attach_runtime(&self, endpoint: EndpointId, runtime: Arc<dyn TaskEndpoint>) -> Result<()> {
        self.registry.endpoint(endpoint)?;
        self.executor.attach_runtime(endpoint, runtime);
        Ok(())
    }

    // --- flows ---

    /// Registers a flow after checking the caller may read its inputs' collections and
    /// write its outputs' collections.
    pub fn register_flow(&self, caller: PrincipalId, req: &FlowRequest) -> Result<FlowSpec> {
        for binding in req.inputs.values() {
            let a = self.registry.asset(binding.asset_id)?;
            self.store.check(a.collection_ref, caller, Permission::Read)?;
        }
        for decl in req.outputs.values() {
            let cid = match decl {
                OutputDecl::Existing { asset_id } => self.registry.asset(*asset_id)?.collection_ref,
                OutputDecl::New(spec) => spec.collection_ref,
            };
            self.store.check(cid, caller, Permission::Write)?;
        }
        let spec = self.registry.register_flow(caller, req)?;
        let first_due = match spec.rule {
            TriggerRule::Periodic { interval_secs } => spec.created_at + chrono::Duration::seconds(interval_secs as i64),
            _ => spec.created_at,
        };
        self.triggers.lock().install(&spec, first_due);
        Ok(spec)
    }

    pub fn flow(&self, caller: PrincipalId, id: FlowId) -> Result<FlowSpec> {
        self.registry.authorize(caller, ResourceRef::Flow(id), Permission::ViewRuns)?;
        self.registry.flow(id)
    }

    pub fn delete_flow(&self, caller: PrincipalId, id: FlowId) -> Result<()> {
        self.registry.authorize(caller, ResourceRef::Flow(id), Permission::Admin)?;
        self.registry.delete_flow(id)?;
        self.triggers.lock().remove(id);
        Ok(())
    }

    pub fn runs(&self, caller: PrincipalId, id: FlowId) -> Result<Vec<FlowRun>> {
        self.registry.list_runs(id, caller)
    }

    pub fn deliveries(&self) -> Vec<DeliveryRecord> {
        self.registry.deliveries()
    }

    /// Manually dispatches a flow. Returns false when it was coalesced into an already queued run.
    pub fn dispatch(self: &Arc<Self>, caller: PrincipalId, id: FlowId) -> Result<bool> {
        self.registry.authorize(caller, ResourceRef::Flow(id), Permission::Execute)?;
        self.registry.flow(id)?;
        let mut triggers = self.triggers.lock();
        let queued_before = triggers.has_queued(id);
        let admitted = triggers.request(FlowDispatch {
            flow_id: id,
            reason: DispatchReason::Manual,
        });
        let accepted = admitted.is_some() || !queued_before;
        drop(triggers);
        if let Some(d) = admitted {
            self.spawn(d);
        }
        Ok(accepted)
    }

    /// Runs a flow right now on the caller's task, outside the trigger gate. For tools and tests.
    pub async fn run_now(self: &Arc<Self>, id: FlowId, reason: DispatchReason) -> Result<DispatchOutcome> {
        let flow = self.registry.flow(id)?;
        let outcome = self.engine.execute(&flow, reason).await;
        for v in &outcome.commits {
            self.after_commit(v);
        }
        Ok(outcome)
    }

    // --- search ---

    pub fn search(&self, caller: Option<PrincipalId>, query: &SearchQuery) -> Result<Vec<SearchHit>> {
        self.index.query(query, caller)
    }

    // --- internals ---

    fn spawn(self: &Arc<Self>, dispatch: FlowDispatch) {
        self.in_flight.send_modify(|n| *n += 1);
        let me = self.clone();
        tokio::spawn(async move {
            let permit = me.slots.clone().acquire_owned().await.expect("never closed");
            let flow_id = dispatch.flow_id;
            match me.registry.flow(flow_id) {
                Ok(flow) => {
                    let outcome = me.engine.execute(&flow, dispatch.reason).await;
                    if let Some(run) = outcome.final_run() {
                        tracing::info!(flow = %flow_id, run = %run.run_id, status = ?run.status, "run finished");
                    }
                    for v in &outcome.commits {
                        me.after_commit(v);
                    }
                }
                Err(e) => tracing::warn!(flow = %flow_id, "dispatch dropped: {e}"),
            }
            drop(permit);
            let next = me.triggers.lock().run_finished(flow_id);
            if let Some(next) = next {
                me.spawn(next);
            }
            me.in_flight.send_modify(|n| *n -= 1);
        });
    }

    /// Indexes a fresh version and starts the flows it satisfies.
    fn after_commit(self: &Arc<Self>, v: &DataVersion) {
        match self.entry_for(v) {
            Ok(e) => {
                self.index.index_version(e);
            }
            Err(e) => tracing::error!(asset = %v.asset_id, "cannot index version: {e}"),
        }
        let dispatches = self.triggers.lock().on_commit(v.asset_id, v.version);
        for d in dispatches {
            self.spawn(d);
        }
    }

    fn entry_for(&self, v: &DataVersion) -> Result<SearchEntry> {
        let asset = self.registry.asset(v.asset_id)?;
        let original_source = match (&asset.source_url, &v.provenance) {
            (Some(url), _) => url.clone(),
            (None, Some(p)) => format!("run:{}", p.run_id),
            (None, None) => "upload".into(),
        };
        Ok(SearchEntry {
            asset_id: v.asset_id,
            version: v.version,
            name: asset.name,
            description: asset.description,
            original_source,
            download_url: self.store.download_url(asset.collection_ref, v.storage_key)?,
            tags: asset.tags,
            size_bytes: v.size_bytes,
            checksum: v.checksum.clone(),
            created_at: v.created_at,
            provenance: v.provenance.as_ref().map(|p| ProvenanceSummary {
                run_id: p.run_id,
                function_ref: p.function_ref,
                inputs: p.inputs.clone(),
            }),
            visibility: self.registry.visibility(v.asset_id)?,
        })
    }

    /// Rebuilds the search index from the registry.
    pub fn reindex(&self) -> Result<()> {
        let mut entries = Vec::new();
        for (_, v) in self.registry.all_versions() {
            entries.push(self.entry_for(&v)?);
        }
        self.index.replace_all(entries);
        Ok(())
    }

    /// Reinstalls timers and pending sets for every live flow.
    fn restore_triggers(&self) -> Result<()> {
        let now = Utc::now();
        let mut triggers = self.triggers.lock();
        for flow in self.registry.flows() {
            match flow.rule {
                TriggerRule::Periodic { interval_secs } => {
                    // Next point of the registration-aligned grid; time spent down is not replayed.
                    let step = interval_secs as i64;
                    let elapsed = (now - flow.created_at).num_seconds().max(0);
                    let k = elapsed / step + 1;
                    triggers.install(&flow, flow.created_at + chrono::Duration::seconds(k * step));
                }
                _ => {
                    triggers.install(&flow, now);
                    let consumed = self.registry.last_consumed_inputs(flow.flow_id)?;
                    let mut pending = BTreeSet::new();
                    for (param, asset) in flow.monitored_inputs() {
                        let Ok(latest) = self.registry.version(asset, VersionSelector::Latest) else {
                            continue;
                        };
                        let newer = match consumed.get(&param) {
                            Some(c) => latest.version > c.version,
                            None => latest.created_at > flow.created_at,
                        };
                        if newer {
                            pending.insert(param);
                        }
                    }
                    triggers.restore_pending(flow.flow_id, pending);
                }
            }
        }
        Ok(())
    }

    /// Marks runs left mid-flight by a previous process as failed.
    fn close_abandoned_runs(&self) -> Result<()> {
        for flow in self.registry.flows() {
            for run in self.registry.runs_of(flow.flow_id)? {
                if run.status.is_terminal() {
                    continue;
                }
                self.registry.update_run(run.run_id, |r| {
                    r.status = RunStatus::FailedTransient;
                    r.error = Some(crate::model::RunError {
                        class: crate::error::ErrorClass::Transient,
                        message: "interrupted by a service restart".into(),
                    });
                    r.ended_at = Some(Utc::now());
                })?;
            }
        }
        Ok(())
    }

    /// Latest run status per flow, for status displays.
    pub fn flow_status(&self) -> BTreeMap<FlowId, RunStatus> {
        self.registry
            .flows()
            .iter()
            .filter_map(|f| {
                let runs = self.registry.runs_of(f.flow_id).ok()?;
                runs.last().map(|r| (f.flow_id, r.status))
            })
            .collect()
    }
}
