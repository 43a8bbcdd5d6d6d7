mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use aero_core::auth::{Permission, ResourceRef};
use aero_core::checksum::Checksum;
use aero_core::error::{AeroError, ErrorClass, Result};
use aero_core::executor::{FunctionManifest, FunctionRef, LocalEndpoint, TaskEndpoint, TaskStatus};
use aero_core::ids::{AssetId, FunctionId, TaskId};
use aero_core::model::{
    FlowKind, FlowRequest, InputBinding, OutputDecl, RunStatus, StepOutcome, VersionSelector,
};
use aero_core::search::SearchQuery;
use aero_core::trigger::TriggerRule;
use aero_core::Aero;
use common::*;

fn ingestion(h: &Harness, function: FunctionId, target: AssetId) -> FlowRequest {
    FlowRequest {
        kind: FlowKind::Ingestion,
        function,
        endpoint: h.endpoint,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::from([("data".to_string(), OutputDecl::Existing { asset_id: target })]),
        kwargs: BTreeMap::new(),
        rule: TriggerRule::Periodic { interval_secs: 86_400 },
        contact: "ops@example.org".into(),
    }
}

fn analysis(h: &Harness, function: FunctionId, inputs: &[(&str, AssetId)], out: AssetId, rule: TriggerRule) -> FlowRequest {
    FlowRequest {
        kind: FlowKind::Analysis,
        function,
        endpoint: h.endpoint,
        inputs: inputs
            .iter()
            .map(|(p, a)| (p.to_string(), InputBinding { asset_id: *a, selector: VersionSelector::Latest }))
            .collect(),
        outputs: BTreeMap::from([("result".to_string(), OutputDecl::Existing { asset_id: out })]),
        kwargs: BTreeMap::new(),
        rule,
        contact: "ops@example.org".into(),
    }
}

async fn dispatch_and_wait(aero: &Arc<Aero>, h: &Harness, flow: aero_core::ids::FlowId) {
    assert!(aero.dispatch(h.user, flow).unwrap());
    settle(aero).await;
}

#[tokio::test]
async fn ingestion_commits_only_changed_content() {
    let h = Harness::new();
    let src = Source::start().await;
    let url = src.set("/cases.csv", 200, b"day,cases\n1,10\n");
    let target = h.asset("cases", Some(&url));
    let flow = h.aero.register_flow(h.user, &ingestion(&h, h.concat, target)).unwrap();

    dispatch_and_wait(&h.aero, &h, flow.flow_id).await;
    dispatch_and_wait(&h.aero, &h, flow.flow_id).await;
    src.set("/cases.csv", 200, b"day,cases\n1,10\n2,12\n");
    dispatch_and_wait(&h.aero, &h, flow.flow_id).await;

    let runs = h.aero.runs(h.user, flow.flow_id).unwrap();
    let statuses: Vec<RunStatus> = runs.iter().map(|r| r.status).collect();
    assert_eq!(statuses, [RunStatus::Succeeded, RunStatus::Skipped, RunStatus::Succeeded]);
    let versions = h.aero.versions(h.user, target).unwrap();
    assert_eq!(versions.len(), 2);
    assert_eq!(versions[1].checksum, Checksum::of_bytes(b"day,cases\n1,10\n2,12\n"));
    assert!(h.aero.asset(h.user, target).unwrap().last_polled_at.is_some());

    // The skipped run stopped after fetching; no function ran.
    let names: Vec<&str> = runs[1].step_records.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["fetch"]);
    assert_eq!(runs[1].step_records[0].outcome, StepOutcome::Skipped);

    let names: Vec<&str> = runs[0].step_records.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["fetch", "transform", "commit"]);
    let transform = &runs[0].step_records[1];
    let task = transform.task.expect("task timing recorded");
    assert!(transform.ended_at - transform.started_at >= task.ended - task.started);
    assert_eq!(runs[0].produced_outputs["data"].version, 1);

    // Ingested versions are provenance leaves and indexed for search.
    assert_eq!(h.aero.provenance(h.user, target, 1, None).unwrap().node_count(), 1);
    let hits = h.aero.search(Some(h.user), &SearchQuery::text("cases")).unwrap();
    assert_eq!(hits.len(), 2);
    assert!(hits.iter().all(|hit| hit.entry.original_source == url));

    // Run directories are cleaned up.
    let runs_dir = h.dir.path().join("aero/work/runs");
    assert_eq!(std::fs::read_dir(runs_dir).unwrap().count(), 0);
}

#[tokio::test]
async fn http_errors_are_classified() {
    let h = Harness::new();
    let src = Source::start().await;
    let gone = h.asset("gone", Some(&src.set("/gone", 404, b"")));
    let busy = h.asset("busy", Some(&src.set("/busy", 503, b"")));
    let f_gone = h.aero.register_flow(h.user, &ingestion(&h, h.concat, gone)).unwrap();
    let f_busy = h.aero.register_flow(h.user, &ingestion(&h, h.concat, busy)).unwrap();
    dispatch_and_wait(&h.aero, &h, f_gone.flow_id).await;
    dispatch_and_wait(&h.aero, &h, f_busy.flow_id).await;

    let runs = h.aero.runs(h.user, f_gone.flow_id).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].status, RunStatus::FailedTerminal);
    assert_eq!(runs[0].error.as_ref().unwrap().class, ErrorClass::Terminal);

    let runs = h.aero.runs(h.user, f_busy.flow_id).unwrap();
    assert_eq!(runs.len(), 4);
    assert!(runs.iter().all(|r| r.status == RunStatus::FailedTransient));
    assert!(runs.iter().skip(1).all(|r| r.retry_of == Some(runs[0].run_id)));
    assert_eq!(runs.iter().map(|r| r.attempt).collect::<Vec<_>>(), [1, 2, 3, 4]);

    // One notification each: the terminal failure and the exhausted retries.
    let deliveries = h.aero.deliveries();
    assert_eq!(deliveries.len(), 2);
    assert!(deliveries.iter().any(|d| d.run_id == runs[3].run_id));
    assert!(h.aero.versions(h.user, gone).unwrap().is_empty());
}

#[tokio::test]
async fn cascade_records_provenance() {
    let h = Harness::new();
    let a = h.asset("a", None);
    let b = h.asset("b", None);
    let c = h.asset("c", None);
    let f1 = h.aero.register_flow(h.user, &analysis(&h, h.concat, &[("x", a)], b, TriggerRule::OnAnyInputUpdate)).unwrap();
    let f2 = h.aero
        .register_flow(h.user, &analysis(&h, h.concat, &[("a", a), ("b", b)], c, TriggerRule::OnAllInputUpdates))
        .unwrap();

    h.aero.upload(h.user, a, "text/plain", &b"alpha"[..]).unwrap();
    settle(&h.aero).await;

    let vb = h.aero.versions(h.user, b).unwrap();
    let vc = h.aero.versions(h.user, c).unwrap();
    assert_eq!((vb.len(), vc.len()), (1, 1));
    assert_eq!(vb[0].checksum, Checksum::of_bytes(b"alpha"));
    assert_eq!(vc[0].checksum, Checksum::of_bytes(b"alphaalpha"));

    let pb = vb[0].provenance.as_ref().unwrap();
    assert_eq!(pb.inputs, vec![aero_core::model::VersionRef::new(a, 1)]);
    let pc = vc[0].provenance.as_ref().unwrap();
    let run_c = h.aero.registry().run(pc.run_id).unwrap();
    assert_eq!(run_c.flow_id, f2.flow_id);
    let mut expected: Vec<_> = run_c.resolved_inputs.values().copied().collect();
    expected.sort();
    let mut got = pc.inputs.clone();
    got.sort();
    assert_eq!(got, expected);

    let tree = h.aero.provenance(h.user, c, 1, None).unwrap();
    assert_eq!(tree.node_count(), 4);
    assert_eq!(h.aero.provenance(h.user, c, 1, Some(1)).unwrap().node_count(), 3);

    // Index completeness after quiescence.
    let total: usize = [a, b, c].iter().map(|x| h.aero.versions(h.user, *x).unwrap().len()).sum();
    assert_eq!(h.aero.index().len(), total);
    assert_eq!(h.aero.runs(h.user, f1.flow_id).unwrap().len(), 1);
}

#[tokio::test]
async fn skip_and_reject() {
    let h = Harness::new();
    let skip = h.function("skip.sh", SKIP);
    let reject = h.function("reject.sh", REJECT);
    let a = h.asset("a", None);
    let b = h.asset("b", None);
    let c = h.asset("c", None);
    let d = h.asset("d", None);
    let fs = h.aero.register_flow(h.user, &analysis(&h, skip, &[("x", a)], b, TriggerRule::OnAnyInputUpdate)).unwrap();
    let fr = h.aero.register_flow(h.user, &analysis(&h, reject, &[("x", a)], c, TriggerRule::OnAnyInputUpdate)).unwrap();
    // Would cascade from b if b ever changed.
    h.aero.register_flow(h.user, &analysis(&h, h.concat, &[("x", b)], d, TriggerRule::OnAnyInputUpdate)).unwrap();

    h.aero.upload(h.user, a, "text/plain", &b"data"[..]).unwrap();
    settle(&h.aero).await;

    let runs = h.aero.runs(h.user, fs.flow_id).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].status, RunStatus::Skipped);
    assert!(runs[0].produced_outputs.is_empty());
    assert!(h.aero.versions(h.user, b).unwrap().is_empty());
    assert!(h.aero.versions(h.user, d).unwrap().is_empty());

    let runs = h.aero.runs(h.user, fr.flow_id).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].status, RunStatus::FailedTerminal);
    assert!(runs[0].error.as_ref().unwrap().message.contains("validation failed"));
    let deliveries = h.aero.deliveries();
    assert_eq!(deliveries.len(), 1);
    assert_eq!(deliveries[0].run_id, runs[0].run_id);
    assert_eq!(deliveries[0].contact, "ops@example.org");
}

/// Refuses the first `failures` submissions as if the endpoint were down.
struct Flaky {
    inner: LocalEndpoint,
    failures: AtomicU32,
}

impl TaskEndpoint for Flaky {
    fn submit(&self, function: &FunctionRef, manifest: &FunctionManifest) -> Result<TaskId> {
        if self
            .failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            return Err(AeroError::EndpointUnavailable("injected".into()));
        }
        self.inner.submit(function, manifest)
    }

    fn poll(&self, task: TaskId) -> Result<TaskStatus> {
        self.inner.poll(task)
    }
}

#[tokio::test]
async fn transient_failures_are_retried() {
    let h = Harness::new();
    h.aero
        .attach_runtime(
            h.endpoint,
            Arc::new(Flaky {
                inner: LocalEndpoint::new(h.dir.path().join("flaky"), 2).unwrap(),
                failures: AtomicU32::new(2),
            }),
        )
        .unwrap();
    let a = h.asset("a", None);
    let b = h.asset("b", None);
    let f = h.aero.register_flow(h.user, &analysis(&h, h.concat, &[("x", a)], b, TriggerRule::OnAnyInputUpdate)).unwrap();
    h.aero.upload(h.user, a, "text/plain", &b"x"[..]).unwrap();
    settle(&h.aero).await;

    let runs = h.aero.runs(h.user, f.flow_id).unwrap();
    assert_eq!(runs.len(), 3);
    assert_eq!(runs[2].status, RunStatus::Succeeded);
    assert_eq!(runs[2].attempt, 3);
    assert_eq!(runs[0].status, RunStatus::FailedTransient);
    // Every attempt consumed the same resolved inputs.
    assert_eq!(runs[0].resolved_inputs, runs[2].resolved_inputs);
    assert!(h.aero.deliveries().is_empty());
}

#[tokio::test]
async fn one_active_run_plus_one_queued() {
    let h = Harness::new();
    let slow = h.function("slow.sh", &format!("sleep 1\n{CONCAT}"));
    let a = h.asset("a", None);
    let b = h.asset("b", None);
    let f = h.aero.register_flow(h.user, &analysis(&h, slow, &[("x", a)], b, TriggerRule::OnAnyInputUpdate)).unwrap();
    h.aero.upload(h.user, a, "text/plain", &b"1"[..]).unwrap();
    h.aero.upload(h.user, a, "text/plain", &b"2"[..]).unwrap();
    h.aero.upload(h.user, a, "text/plain", &b"3"[..]).unwrap();
    assert!(!h.aero.dispatch(h.user, f.flow_id).unwrap(), "coalesced into the queued run");
    settle(&h.aero).await;

    let runs = h.aero.runs(h.user, f.flow_id).unwrap();
    assert_eq!(runs.len(), 2);
    assert!(runs[0].ended_at.unwrap() <= runs[1].started_at);
    // The queued run saw the newest input.
    assert_eq!(runs[1].resolved_inputs["x"].version, 3);
}

#[tokio::test]
async fn access_control() {
    let h = Harness::new();
    let (stranger, _) = h.aero.issue_token(h.admin, None, "stranger", None).unwrap();
    let stranger = stranger.principal_id;
    let a = h.asset("private_a", None);
    let b = h.asset("private_b", None);
    let f = h.aero.register_flow(h.user, &analysis(&h, h.concat, &[("x", a)], b, TriggerRule::OnAnyInputUpdate)).unwrap();
    h.aero.upload(h.user, a, "text/plain", &b"secret"[..]).unwrap();
    settle(&h.aero).await;

    assert!(matches!(h.aero.metadata(stranger, a, VersionSelector::Latest), Err(AeroError::Forbidden(_))));
    assert!(matches!(h.aero.runs(stranger, f.flow_id), Err(AeroError::Forbidden(_))));
    assert!(h.aero.search(Some(stranger), &SearchQuery::text("private_a")).unwrap().is_empty());
    assert!(h.aero.search(None, &SearchQuery::text("private_a")).unwrap().is_empty());
    assert!(matches!(h.aero.issue_token(h.user, None, "x", None), Err(AeroError::Forbidden(_))));

    h.aero.grant(h.user, ResourceRef::Flow(f.flow_id), stranger, &Harness::perms(&[Permission::ViewRuns])).unwrap();
    assert_eq!(h.aero.runs(stranger, f.flow_id).unwrap().len(), 1);

    // Asset read makes metadata and search visible; the bytes still need collection read.
    h.aero.grant(h.user, ResourceRef::Asset(a), stranger, &Harness::perms(&[Permission::Read])).unwrap();
    let meta = h.aero.metadata(stranger, a, VersionSelector::Latest).unwrap();
    assert_eq!(h.aero.search(Some(stranger), &SearchQuery::text("private_a")).unwrap().len(), 1);
    let key = meta.version.storage_key;
    assert!(matches!(h.aero.open_object(stranger, h.col, key), Err(AeroError::Forbidden(_))));
    h.aero.grant(h.user, ResourceRef::Collection(h.col), stranger, &Harness::perms(&[Permission::Read])).unwrap();
    assert!(h.aero.open_object(stranger, h.col, key).is_ok());
    h.aero.revoke(h.user, ResourceRef::Collection(h.col), stranger, &Harness::perms(&[Permission::Read])).unwrap();
    assert!(matches!(h.aero.open_object(stranger, h.col, key), Err(AeroError::Forbidden(_))));

    // Registering a flow into someone else's collection is refused.
    let c = h.asset("c", None);
    let req = analysis(&h, h.concat, &[("x", a)], c, TriggerRule::OnAnyInputUpdate);
    assert!(matches!(h.aero.register_flow(stranger, &req), Err(AeroError::Forbidden(_))));
}

#[tokio::test]
async fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let (user, a, b, f) = {
        let h = Harness::with_config(cfg.clone(), tempfile::tempdir().unwrap());
        let a = h.asset("a", None);
        let b = h.asset("b", None);
        let f = h.aero
            .register_flow(h.user, &analysis(&h, h.concat, &[("x", a)], b, TriggerRule::OnAnyInputUpdate))
            .unwrap();
        h.aero.upload(h.user, a, "text/plain", &b"one"[..]).unwrap();
        settle(&h.aero).await;
        (h.user, a, b, f.flow_id)
    };
    // The harness's script dir is gone; only data state is checked here.
    let aero = Aero::open(cfg).unwrap();
    assert_eq!(aero.versions(user, a).unwrap().len(), 1);
    assert_eq!(aero.versions(user, b).unwrap().len(), 1);
    assert_eq!(aero.runs(user, f).unwrap().len(), 1);
    assert_eq!(aero.index().len(), 2);
    assert!(aero.registry().flow(f).is_ok());
}
