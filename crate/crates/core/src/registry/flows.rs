use std::collections::{BTreeMap, BTreeSet};

use chrono::Utc;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::assets::new_asset_row;
use super::Registry;
use crate::auth::{Permission, ResourceRef};
use crate::error::{AeroError, Result};
use crate::ids::{AssetId, EndpointId, FlowId, FunctionId, PrincipalId, RunId};
use crate::model::{
    FlowKind, FlowRequest, FlowRun, FlowSpec, InputBinding, OutputDecl, RunStatus, VersionRef,
    VersionSelector,
};

/// Fields that decide whether two flows are the same. Declared in key order so the
/// serialized form is key-sorted; serde_json emits no whitespace.
#[derive(Serialize)]
struct DedupView<'a> {
    endpoint: EndpointId,
    function: FunctionId,
    inputs: &'a BTreeMap<String, InputBinding>,
    kwargs: &'a BTreeMap<String, serde_json::Value>,
    /// Ingestion flows read from their target's source URL instead of bound inputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    source: Option<&'a str>,
}

/// SHA-256 (hex) of the canonical encoding of a flow's function, endpoint, inputs and kwargs.
pub fn canonical_dedup_key(
    function: FunctionId,
    endpoint: EndpointId,
    inputs: &BTreeMap<String, InputBinding>,
    kwargs: &BTreeMap<String, serde_json::Value>,
    source: Option<&str>,
) -> String {
    let view = DedupView {
        endpoint,
        function,
        inputs,
        kwargs,
        source,
    };
    let text = serde_json::to_string(&view).expect("dedup view serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl super::State {
    /// Asset-level edges (input -> output) of every live flow's latest-bound inputs.
    fn flow_edges(&self) -> BTreeMap<AssetId, BTreeSet<AssetId>> {
        let mut edges: BTreeMap<AssetId, BTreeSet<AssetId>> = BTreeMap::new();
        for f in self.flows.values().filter(|f| !f.deleted) {
            for input in f.monitored_inputs().values() {
                edges.entry(*input).or_default().extend(f.outputs.values());
            }
        }
        edges
    }
}

fn reaches(edges: &BTreeMap<AssetId, BTreeSet<AssetId>>, from: AssetId, to: AssetId) -> bool {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from];
    while let Some(n) = stack.pop() {
        if n == to {
            return true;
        }
        if seen.insert(n) {
            if let Some(next) = edges.get(&n) {
                stack.extend(next.iter().copied());
            }
        }
    }
    false
}

impl Registry {
    /// Validates and stores a flow, creating any template output assets in the same transaction.
    pub fn register_flow(&self, owner: PrincipalId, req: &FlowRequest) -> Result<FlowSpec> {
        for (name, value) in &req.kwargs {
            if value.is_array() || value.is_object() {
                return Err(AeroError::InvalidFlow(format!(
                    "kwarg {name} must be a scalar or string"
                )));
            }
        }
        let mut new_rows = Vec::new();
        for decl in req.outputs.values() {
            if let OutputDecl::New(spec) = decl {
                new_rows.push(new_asset_row(owner, spec)?);
            }
        }

        self.transact(|st| {
            if !st.functions.contains_key(&req.function) {
                return Err(AeroError::UnknownFunction(req.function));
            }
            if !st.endpoints.contains_key(&req.endpoint) {
                return Err(AeroError::UnknownEndpoint(req.endpoint));
            }
            st.authorize(owner, ResourceRef::Endpoint(req.endpoint), Permission::Execute)?;
            for binding in req.inputs.values() {
                st.authorize(owner, ResourceRef::Asset(binding.asset_id), Permission::Read)?;
                if let VersionSelector::Pinned(n) = binding.selector {
                    let row = st.live_asset(binding.asset_id)?;
                    if n == 0 || n as usize > row.versions.len() {
                        return Err(AeroError::UnknownVersion {
                            asset: binding.asset_id,
                            version: n,
                        });
                    }
                }
            }

            let mut new_rows = new_rows.into_iter();
            let mut outputs = BTreeMap::new();
            for (name, decl) in &req.outputs {
                let asset_id = match decl {
                    OutputDecl::Existing { asset_id } => {
                        st.authorize(owner, ResourceRef::Asset(*asset_id), Permission::Write)?;
                        *asset_id
                    }
                    OutputDecl::New(_) => {
                        let row = new_rows.next().expect("one row per template");
                        st.insert_asset(row)?.asset_id
                    }
                };
                outputs.insert(name.clone(), asset_id);
            }

            let source = match req.kind {
                FlowKind::Ingestion => {
                    if outputs.len() != 1 || !req.inputs.is_empty() {
                        return Err(AeroError::InvalidFlow(
                            "ingestion flows have exactly one output and no inputs".into(),
                        ));
                    }
                    let target = outputs.values().next().expect("one output");
                    let url = st.live_asset(*target)?.asset.source_url.clone();
                    Some(url.ok_or_else(|| {
                        AeroError::InvalidFlow("ingestion target asset has no source_url".into())
                    })?)
                }
                FlowKind::Analysis => {
                    if outputs.is_empty() {
                        return Err(AeroError::InvalidFlow(
                            "analysis flows declare at least one output".into(),
                        ));
                    }
                    None
                }
            };

            let flow_id = FlowId::new();
            let spec = FlowSpec {
                flow_id,
                kind: req.kind,
                function: req.function,
                endpoint: req.endpoint,
                inputs: req.inputs.clone(),
                outputs,
                kwargs: req.kwargs.clone(),
                rule: req.rule,
                contact: req.contact.clone(),
                owner,
                dedup_key: canonical_dedup_key(
                    req.function,
                    req.endpoint,
                    &req.inputs,
                    &req.kwargs,
                    source.as_deref(),
                ),
                created_at: Utc::now(),
                deleted: false,
            };
            spec.rule.validate(spec.monitored_inputs().len())?;
            if let Some(existing) = st.derived.dedup.get(&spec.dedup_key) {
                return Err(AeroError::DuplicateFlow(*existing));
            }

            let edges = st.flow_edges();
            for input in spec.monitored_inputs().values() {
                for output in spec.outputs.values() {
                    if input == output || reaches(&edges, *output, *input) {
                        return Err(AeroError::InvalidFlow(format!(
                            "output {output} feeds back into input {input}"
                        )));
                    }
                }
            }

            st.derived.dedup.insert(spec.dedup_key.clone(), flow_id);
            if spec.rule.is_update_rule() {
                for asset in spec.monitored_inputs().values() {
                    st.derived.dependents.entry(*asset).or_default().insert(flow_id);
                }
            }
            st.flows.insert(flow_id, spec.clone());
            Ok(spec)
        })
    }

    pub fn flow(&self, id: FlowId) -> Result<FlowSpec> {
        self.read(|st| st.flows.get(&id).filter(|f| !f.deleted).cloned())
            .ok_or(AeroError::UnknownFlow(id))
    }

    pub fn flows(&self) -> Vec<FlowSpec> {
        self.read(|st| st.flows.values().filter(|f| !f.deleted).cloned().collect())
    }

    /// Tombstones a flow; its runs and the provenance it produced remain.
    pub fn delete_flow(&self, id: FlowId) -> Result<()> {
        self.transact(|st| {
            let spec = st
                .flows
                .get(&id)
                .filter(|f| !f.deleted)
                .cloned()
                .ok_or(AeroError::UnknownFlow(id))?;
            st.derived.dedup.remove(&spec.dedup_key);
            for deps in st.derived.dependents.values_mut() {
                deps.remove(&id);
            }
            st.derived.dependents.retain(|_, deps| !deps.is_empty());
            st.flows.get_mut(&id).expect("checked").deleted = true;
            Ok(())
        })
    }

    /// Live update-rule flows consuming the latest version of `asset`.
    pub fn dependents_of(&self, asset: AssetId) -> Result<Vec<FlowId>> {
        self.read(|st| {
            st.live_asset(asset)?;
            Ok(st
                .derived
                .dependents
                .get(&asset)
                .map(|s| s.iter().copied().collect())
                .unwrap_or_default())
        })
    }

    // --- runs ---

    pub fn create_run(&self, run: FlowRun) -> Result<FlowRun> {
        self.transact(|st| {
            if !st.flows.contains_key(&run.flow_id) {
                return Err(AeroError::UnknownFlow(run.flow_id));
            }
            st.runs.insert(run.run_id, run.clone());
            Ok(run)
        })
    }

    /// Applies `f` to a run. Status changes must follow the run state machine.
    pub fn update_run(&self, id: RunId, f: impl FnOnce(&mut FlowRun)) -> Result<FlowRun> {
        self.transact(|st| {
            let run = st.runs.get_mut(&id).ok_or(AeroError::UnknownRun(id))?;
            let mut next = run.clone();
            f(&mut next);
            if next.status != run.status && !run.status.can_become(next.status) {
                return Err(AeroError::InvalidRequest(format!(
                    "run {id}: illegal transition {:?} -> {:?}",
                    run.status, next.status
                )));
            }
            if next.status == RunStatus::Executing && next.resolved_inputs != run.resolved_inputs
                && run.status == RunStatus::Executing
            {
                return Err(AeroError::InvalidRequest(format!(
                    "run {id}: inputs are fixed once executing"
                )));
            }
            *run = next.clone();
            Ok(next)
        })
    }

    pub fn run(&self, id: RunId) -> Result<FlowRun> {
        self.read(|st| st.runs.get(&id).cloned())
            .ok_or(AeroError::UnknownRun(id))
    }

    /// Runs of a flow in start-time order.
    pub fn runs_of(&self, flow: FlowId) -> Result<Vec<FlowRun>> {
        self.read(|st| {
            if !st.flows.contains_key(&flow) {
                return Err(AeroError::UnknownFlow(flow));
            }
            let mut runs: Vec<FlowRun> = st
                .runs
                .values()
                .filter(|r| r.flow_id == flow)
                .cloned()
                .collect();
            runs.sort_by_key(|r| (r.started_at, r.attempt));
            Ok(runs)
        })
    }

    /// Runs visible to `caller`: the flow owner, or anyone granted `view_runs`.
    pub fn list_runs(&self, flow: FlowId, caller: PrincipalId) -> Result<Vec<FlowRun>> {
        self.authorize(caller, ResourceRef::Flow(flow), Permission::ViewRuns)?;
        self.runs_of(flow)
    }

    /// Inputs consumed by the flow's most recent successful run.
    pub fn last_consumed_inputs(&self, flow: FlowId) -> Result<BTreeMap<String, VersionRef>> {
        Ok(self
            .runs_of(flow)?
            .into_iter()
            .rev()
            .find(|r| r.status == RunStatus::Succeeded)
            .map(|r| r.resolved_inputs)
            .unwrap_or_default())
    }
}
