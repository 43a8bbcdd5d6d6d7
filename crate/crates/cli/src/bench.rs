//! Synthetic ingestion benchmark.
//!
//! For each concurrency level N, registers N no-op ingestion flows that differ only in an
//! unused random kwarg, each writing to its own fresh asset, starts them together and
//! measures the makespan: last run end minus first run start, from the server's own run
//! records. Every level is repeated `reps` times.

use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use aero_core::flow::RetryPolicy;
use aero_core::ids::{AssetId, FlowId, RunId};
use aero_core::model::{FlowRun, RunStatus, VersionMetadata};
use aero_gateway::{Gateway, GatewayConfig};
use axum::body::Body;
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use chrono::{DateTime, Utc};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::task::JoinHandle;

use crate::client::{ApiClient, ClientError};

/// 61.68 MB, read as decimal megabytes.
pub const DEFAULT_SIZE: u64 = 61_680_000;
pub const DEFAULT_SWEEP: [u32; 4] = [1, 5, 10, 20];
pub const DEFAULT_REPS: u32 = 5;
pub const DEFAULT_SEED: u64 = 20_230_613;
pub const MAX_CONCURRENCY: u32 = 20;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("endpoint has {slots} slots but the sweep needs {concurrency}")]
    EndpointTooSmall { slots: u32, concurrency: u32 },
    #[error("concurrency must be within 1..={MAX_CONCURRENCY}, got {0}")]
    BadConcurrency(u32),
    #[error("at least one repetition is required")]
    NoRepetitions,
    #[error("server unreachable: {0}")]
    ServerUnreachable(String),
    #[error("timed out waiting for {0} flows")]
    Timeout(usize),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cannot start local server: {0}")]
    Local(String),
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub concurrency: Vec<u32>,
    pub reps: u32,
    pub size: u64,
    pub seed: u64,
    /// Slots of the endpoint the bench registers.
    pub slots: u32,
    /// Command that implements the no-op transform, e.g. `["/usr/bin/aero", "fn", "copy"]`.
    pub function_entry: Vec<String>,
    /// Free-form label for the report's `executor` column.
    pub executor: String,
    /// How often the driver checks for finished runs.
    pub poll_every: Duration,
    /// Gives up on a batch after this long.
    pub batch_timeout: Duration,
}

impl BenchConfig {
    pub fn new(function_entry: Vec<String>) -> Self {
        Self {
            concurrency: DEFAULT_SWEEP.to_vec(),
            reps: DEFAULT_REPS,
            size: DEFAULT_SIZE,
            seed: DEFAULT_SEED,
            slots: 32,
            function_entry,
            executor: "aero-local".into(),
            poll_every: Duration::from_millis(250),
            batch_timeout: Duration::from_secs(600),
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.reps == 0 {
            return Err(BenchError::NoRepetitions);
        }
        for &n in &self.concurrency {
            if !(1..=MAX_CONCURRENCY).contains(&n) {
                return Err(BenchError::BadConcurrency(n));
            }
            if n > self.slots {
                return Err(BenchError::EndpointTooSmall { slots: self.slots, concurrency: n });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub name: String,
    pub secs: f64,
    /// Time the function itself ran, when the step ran one.
    pub task_secs: Option<f64>,
    pub polls: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTiming {
    pub flow_id: FlowId,
    pub asset_id: AssetId,
    pub run_id: RunId,
    pub status: RunStatus,
    pub attempts: u32,
    /// Version the run committed, if any.
    pub version: Option<u64>,
    /// Digest the server recorded for that version.
    #[serde(default)]
    pub checksum: Option<String>,
    pub started_at: DateTime<Utc>,
    pub ended_at: DateTime<Utc>,
    pub duration_secs: f64,
    pub steps: Vec<StepTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    pub rep: u32,
    pub makespan_secs: f64,
    pub flows: Vec<FlowTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub concurrency: u32,
    pub executor: String,
    pub repetitions: Vec<Repetition>,
    pub median_makespan_secs: f64,
    pub min_makespan_secs: f64,
    pub max_makespan_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub size_bytes: u64,
    pub payload_sha256: String,
    pub endpoint_slots: u32,
    pub executor: String,
    pub started_at: DateTime<Utc>,
    pub rows: Vec<BenchRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

impl BenchRow {
    fn new(concurrency: u32, executor: &str, repetitions: Vec<Repetition>) -> Self {
        let spans: Vec<f64> = repetitions.iter().map(|r| r.makespan_secs).collect();
        Self {
            concurrency,
            executor: executor.to_owned(),
            median_makespan_secs: median(&spans),
            min_makespan_secs: spans.iter().copied().fold(f64::INFINITY, f64::min),
            max_makespan_secs: spans.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            repetitions,
        }
    }
}

impl BenchReport {
    pub fn row(&self, concurrency: u32) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.concurrency == concurrency)
    }

    /// One line per concurrency level: median, min, max, then each repetition.
    pub fn gnuplot(&self) -> String {
        let reps = self.rows.iter().map(|r| r.repetitions.len()).max().unwrap_or(0);
        let mut out = format!(
            "# aero bench seed={} size_bytes={} slots={}\n# concurrency executor median_s min_s max_s",
            self.seed, self.size_bytes, self.endpoint_slots
        );
        for i in 1..=reps {
            out.push_str(&format!(" rep{i}_s"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{} {} {:.4} {:.4} {:.4}",
                r.concurrency, r.executor, r.median_makespan_secs, r.min_makespan_secs, r.max_makespan_secs
            ));
            for rep in &r.repetitions {
                out.push_str(&format!(" {:.4}", rep.makespan_secs));
            }
            out.push('\n');
        }
        out
    }

    /// Problems that would make the numbers meaningless: failed or skipped flows,
    /// flows that did not produce version 1 of the payload, a flow longer than its
    /// batch, a step shorter than the task it ran.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for row in &self.rows {
            for rep in &row.repetitions {
                let tag = format!("N={} rep {}", row.concurrency, rep.rep);
                if rep.flows.len() != row.concurrency as usize {
                    out.push(format!("{tag}: {} flows recorded", rep.flows.len()));
                }
                for f in &rep.flows {
                    if f.status != RunStatus::Succeeded || f.version != Some(1) {
                        out.push(format!("{tag}: flow {} ended {:?} with version {:?}", f.flow_id, f.status, f.version));
                    } else if f.checksum.as_deref() != Some(self.payload_sha256.as_str()) {
                        out.push(format!("{tag}: flow {} committed bytes that differ from the payload", f.flow_id));
                    }
                    if f.duration_secs > rep.makespan_secs + 1e-6 {
                        out.push(format!("{tag}: flow {} outlasts its batch", f.flow_id));
                    }
                    for s in &f.steps {
                        if s.task_secs.is_some_and(|t| t > s.secs + 1e-3) {
                            out.push(format!("{tag}: step {} shorter than its task", s.name));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Writes `size` pseudo-random bytes derived from `seed`.
pub fn write_payload(path: &Path, size: u64, seed: u64) -> std::io::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BufWriter::with_capacity(1 << 20, std::fs::File::create(path)?);
    let mut buf = vec![0u8; 1 << 20];
    let mut left = size;
    while left > 0 {
        let n = left.min(buf.len() as u64) as usize;
        rng.fill_bytes(&mut buf[..n]);
        out.write_all(&buf[..n])?;
        left -= n as u64;
    }
    out.into_inner().map_err(|e| e.into_error())?.sync_all()
}

/// Serves one file over plain HTTP at `/payload`.
pub struct SourceServer {
    pub addr: SocketAddr,
    task: JoinHandle<()>,
}

impl SourceServer {
    pub async fn start(file: PathBuf) -> std::io::Result<Self> {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let app = Router::new().route(
            "/payload",
            get(move || {
                let file = file.clone();
                async move {
                    let Ok(f) = tokio::fs::File::open(&file).await else {
                        return StatusCode::NOT_FOUND.into_response();
                    };
                    let len = f.metadata().await.map(|m| m.len()).unwrap_or(0);
                    let stream = tokio_util::io::ReaderStream::with_capacity(f, 256 * 1024);
                    ([(header::CONTENT_LENGTH, len.to_string())], Body::from_stream(stream)).into_response()
                }
            }),
        );
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app.into_make_service()).await;
        });
        Ok(Self { addr, task })
    }

    pub fn url(&self) -> String {
        format!("http://{}/payload", self.addr)
    }
}

impl Drop for SourceServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

fn secs(a: DateTime<Utc>, b: DateTime<Utc>) -> f64 {
    (b - a).num_microseconds().unwrap_or(i64::MAX) as f64 / 1e6
}

/// The run that closes a dispatch: anything terminal except a transient failure
/// that will still be retried.
fn is_final(run: &FlowRun, max_attempts: u32) -> bool {
    run.status.is_terminal() && !(run.status == RunStatus::FailedTransient && run.attempt < max_attempts)
}

fn timing(flow: FlowId, asset: AssetId, runs: &[FlowRun]) -> FlowTiming {
    let first = &runs[0];
    let last = &runs[runs.len() - 1];
    let ended_at = last.ended_at.unwrap_or(last.started_at);
    FlowTiming {
        flow_id: flow,
        asset_id: asset,
        run_id: last.run_id,
        status: last.status,
        attempts: last.attempt,
        version: last.produced_outputs.values().next().map(|v| v.version),
        checksum: None,
        started_at: first.started_at,
        ended_at,
        duration_secs: secs(first.started_at, ended_at),
        steps: last
            .step_records
            .iter()
            .map(|s| StepTiming {
                name: s.name.clone(),
                secs: secs(s.started_at, s.ended_at),
                task_secs: s.task.as_ref().map(|t| secs(t.started, t.ended)),
                polls: s.polls,
            })
            .collect(),
    }
}

struct Setup {
    collection: String,
    function: String,
    endpoint: String,
    source: String,
}

async fn batch(client: &ApiClient, cfg: &BenchConfig, setup: &Setup, n: u32, rep: u32, rng: &mut ChaCha8Rng) -> Result<Repetition, BenchError> {
    let batch_tag: u64 = rng.random();
    let mut flows = Vec::with_capacity(n as usize);
    for i in 0..n {
        let asset: Value = client
            .post(
                "/assets",
                &json!({
                    "name": format!("bench-{batch_tag:016x}-{i}"),
                    "description": format!("synthetic payload, concurrency {n}, repetition {rep}"),
                    "tags": ["bench"],
                    "collection_ref": setup.collection,
                    "source_url": setup.source,
                }),
            )
            .await?;
        let asset_id: AssetId = serde_json::from_value(asset["asset_id"].clone()).map_err(|e| ClientError::Decode(e.to_string()))?;
        let flow: Value = client
            .post(
                "/flows",
                &json!({
                    "kind": "ingestion",
                    "function": setup.function,
                    "endpoint": setup.endpoint,
                    "outputs": { "data": { "asset_id": asset_id } },
                    // Unused by the function; keeps the flows distinct.
                    "kwargs": { "nonce": rng.random::<u64>() },
                    "rule": { "periodic": { "interval_secs": 7 * 24 * 3600 } },
                }),
            )
            .await?;
        let flow_id: FlowId = serde_json::from_value(flow["flow_id"].clone()).map_err(|e| ClientError::Decode(e.to_string()))?;
        flows.push((flow_id, asset_id));
    }

    let paths: Vec<String> = flows.iter().map(|(f, _)| format!("/flows/{f}/dispatch")).collect();
    let dispatches = paths.iter().map(|p| client.post::<Value>(p, &Value::Null));
    for r in futures::future::join_all(dispatches).await {
        r?;
    }

    let max_attempts = RetryPolicy::default().max_attempts;
    let deadline = tokio::time::Instant::now() + cfg.batch_timeout;
    let mut done: Vec<Option<FlowTiming>> = vec![None; flows.len()];
    loop {
        for (slot, (flow, asset)) in done.iter_mut().zip(&flows) {
            if slot.is_some() {
                continue;
            }
            let runs: Vec<FlowRun> = client.get(&format!("/flows/{flow}/runs")).await?;
            if runs.last().is_some_and(|r| is_final(r, max_attempts)) {
                *slot = Some(timing(*flow, *asset, &runs));
            }
        }
        let pending = done.iter().filter(|d| d.is_none()).count();
        if pending == 0 {
            break;
        }
        if tokio::time::Instant::now() > deadline {
            return Err(BenchError::Timeout(pending));
        }
        tokio::time::sleep(cfg.poll_every).await;
    }
    let mut flows: Vec<FlowTiming> = done.into_iter().flatten().collect();
    for f in &mut flows {
        if let Some(v) = f.version {
            let meta: VersionMetadata = client.get(&format!("/assets/{}/versions/{v}", f.asset_id)).await?;
            f.checksum = Some(meta.version.checksum.to_string());
        }
    }
    let start = flows.iter().map(|f| f.started_at).min().expect("n >= 1");
    let end = flows.iter().map(|f| f.ended_at).max().expect("n >= 1");
    Ok(Repetition {
        rep,
        makespan_secs: secs(start, end),
        flows,
    })
}

/// Runs the sweep against a server. `work` holds the payload file.
pub async fn run(client: &ApiClient, cfg: &BenchConfig, work: &Path) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    client.health().await.map_err(|e| BenchError::ServerUnreachable(e.to_string()))?;
    let payload = work.join("payload.bin");
    {
        let (path, size, seed) = (payload.clone(), cfg.size, cfg.seed);
        tokio::task::spawn_blocking(move || write_payload(&path, size, seed))
            .await
            .map_err(|e| BenchError::Local(e.to_string()))??;
    }
    let digest = {
        let path = payload.clone();
        tokio::task::spawn_blocking(move || aero_core::checksum::Checksum::of_reader(std::fs::File::open(path)?))
            .await
            .map_err(|e| BenchError::Local(e.to_string()))??
            .0
    };
    let source = SourceServer::start(payload).await?;

    let col: Value = client.post("/collections", &Value::Null).await?;
    let func: Value = client
        .post("/functions", &json!({ "entry": cfg.function_entry, "description": "bench no-op copy" }))
        .await?;
    let ep: Value = client.post("/endpoints", &json!({ "slots": cfg.slots })).await?;
    let field = |v: &Value, k: &str| v[k].as_str().map(str::to_owned).ok_or_else(|| ClientError::Decode(format!("missing {k}")));
    let setup = Setup {
        collection: field(&col, "collection_id")?,
        function: field(&func, "function_id")?,
        endpoint: field(&ep, "endpoint_id")?,
        source: source.url(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let started_at = Utc::now();
    let mut rows = Vec::new();
    for &n in &cfg.concurrency {
        let mut reps = Vec::new();
        for rep in 1..=cfg.reps {
            let r = batch(client, cfg, &setup, n, rep, &mut rng).await?;
            tracing::info!(concurrency = n, rep, makespan = r.makespan_secs, "batch done");
            reps.push(r);
        }
        rows.push(BenchRow::new(n, &cfg.executor, reps));
    }
    Ok(BenchReport {
        seed: cfg.seed,
        size_bytes: cfg.size,
        payload_sha256: digest.to_string(),
        endpoint_slots: cfg.slots,
        executor: cfg.executor.clone(),
        started_at,
        rows,
    })
}

/// Runs the sweep against a private in-process server in a temporary state directory.
pub async fn run_local(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let dir = tempfile::tempdir()?;
    let gw_cfg = GatewayConfig {
        bind: "127.0.0.1:0".parse().expect("literal"),
        collection_bind: "127.0.0.1:0".parse().expect("literal"),
        state_dir: dir.path().join("state"),
        max_concurrent_flows: cfg.slots as usize,
        ..GatewayConfig::default()
    };
    let aero = aero_core::Aero::open(gw_cfg.service_config()).map_err(|e| BenchError::Local(e.to_string()))?;
    let (_, token) = aero.bootstrap_admin("bench").map_err(|e| BenchError::Local(e.to_string()))?;
    let gw = Gateway::serve(aero, &gw_cfg).await.map_err(|e| BenchError::Local(e.to_string()))?;
    let client = ApiClient::new(&gw.api_url(), Some(token.token));
    let result = run(&client, cfg, dir.path()).await;
    gw.shutdown();
    result
}
