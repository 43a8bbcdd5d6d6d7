//! Function registration and task execution on endpoints.
//!
//! User functions are plain executables. For each task the endpoint creates a
//! private working directory, writes `manifest.json` into it and runs the
//! function there. The function reports back by writing `result.json` and
//! exiting 0; anything else counts as a failed task. For convenience the
//! manifest is also exposed through environment variables:
//!
//! | variable              | value                                   |
//! |-----------------------|-----------------------------------------|
//! | `AERO_MANIFEST`       | path of `manifest.json`                 |
//! | `AERO_RESULT`         | path where `result.json` must be written|
//! | `AERO_OUTPUT_DIR`     | the manifest's `output_dir`             |
//! | `AERO_OUTPUTS`        | declared output names, comma separated  |
//! | `AERO_RUN_ID`         | id of the run the task belongs to       |
//! | `AERO_INPUT_<PARAM>`  | staged path of input `param` (uppercased)|
//! | `AERO_KWARG_<NAME>`   | kwarg value (strings unquoted, else JSON)|

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::{oneshot, Semaphore};

use crate::error::{AeroError, Result};
use crate::ids::{EndpointId, FunctionId, PrincipalId, RunId, TaskId};

const STDERR_TAIL: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRef {
    pub function_id: FunctionId,
    /// Program followed by fixed arguments.
    pub entry: Vec<String>,
    pub description: String,
    pub registered_by: PrincipalId,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    LocalSubprocess,
    RemoteHttp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointRef {
    pub endpoint_id: EndpointId,
    pub kind: EndpointKind,
    #[serde(default)]
    pub slots: Option<u32>,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub allowed_functions: Option<BTreeSet<FunctionId>>,
    pub owner: PrincipalId,
    pub created_at: DateTime<Utc>,
}

impl EndpointRef {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EndpointKind::LocalSubprocess if self.slots.unwrap_or(0) < 1 => Err(
                AeroError::InvalidRequest("local endpoints need at least one slot".into()),
            ),
            EndpointKind::RemoteHttp if self.base_url.is_none() => Err(AeroError::InvalidRequest(
                "remote endpoints need a base_url".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn permits(&self, function: FunctionId) -> bool {
        self.allowed_functions
            .as_ref()
            .is_none_or(|allowed| allowed.contains(&function))
    }
}

/// What a user function receives: `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionManifest {
    pub run_id: RunId,
    pub inputs: BTreeMap<String, PathBuf>,
    pub kwargs: BTreeMap<String, serde_json::Value>,
    pub output_dir: PathBuf,
    /// Output names the flow declares; results must use exactly these.
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact: Option<String>,
}

impl FunctionManifest {
    pub fn validate(&self) -> Result<()> {
        for (param, path) in &self.inputs {
            if File::open(path).is_err() {
                return Err(AeroError::InvalidRequest(format!(
                    "input {param} is not readable at {}",
                    path.display()
                )));
            }
        }
        if !self.output_dir.is_dir() {
            return Err(AeroError::InvalidRequest(format!(
                "output_dir {} does not exist",
                self.output_dir.display()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Ok,
    Skip,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub name: String,
    pub path: PathBuf,
    #[serde(default = "octet_stream")]
    pub media_type: String,
    #[serde(default)]
    pub description: Option<String>,
}

fn octet_stream() -> String {
    "application/octet-stream".into()
}

/// What a user function reports: `result.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultManifest {
    pub status: ResultStatus,
    #[serde(default)]
    pub outputs: Vec<OutputEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub task_started: DateTime<Utc>,
    pub task_ended: DateTime<Utc>,
}

impl ResultManifest {
    /// Resolves relative output paths against `output_dir` and checks the result is well formed.
    pub fn resolve(mut self, output_dir: &Path) -> std::result::Result<Self, String> {
        if self.task_ended < self.task_started {
            return Err("task_ended precedes task_started".into());
        }
        if self.status != ResultStatus::Ok {
            return Ok(self);
        }
        if self.outputs.is_empty() {
            return Err("status ok but no outputs".into());
        }
        let root = output_dir
            .canonicalize()
            .map_err(|e| format!("output_dir: {e}"))?;
        for out in &mut self.outputs {
            let path = if out.path.is_absolute() {
                out.path.clone()
            } else {
                output_dir.join(&out.path)
            };
            let real = path
                .canonicalize()
                .map_err(|_| format!("output {} missing at {}", out.name, path.display()))?;
            if !real.starts_with(&root) || !real.is_file() {
                return Err(format!("output {} is not a file under output_dir", out.name));
            }
            out.path = real;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "detail")]
pub enum TaskStatus {
    Queued,
    Running,
    Done(ResultManifest),
    Failed(String),
}

impl TaskStatus {
    fn rank(&self) -> u8 {
        match self {
            TaskStatus::Queued => 0,
            TaskStatus::Running => 1,
            TaskStatus::Done(_) | TaskStatus::Failed(_) => 2,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.rank() == 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskHandle {
    pub endpoint_id: EndpointId,
    pub task_id: TaskId,
}

/// Exponentially decaying poll frequency: `interval_k = min(initial * factor^k, cap)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PollingPolicy {
    pub initial_secs: f64,
    pub factor: f64,
    pub cap_secs: f64,
}

impl Default for PollingPolicy {
    fn default() -> Self {
        Self {
            initial_secs: 1.0,
            factor: 1.5,
            cap_secs: 30.0,
        }
    }
}

impl PollingPolicy {
    pub fn interval(&self, k: u32) -> Duration {
        let secs = (self.initial_secs * self.factor.powi(k as i32)).min(self.cap_secs);
        Duration::from_secs_f64(secs)
    }
}

/// A compute endpoint. `submit` only enqueues; `poll` never blocks.
pub trait TaskEndpoint: Send + Sync {
    fn submit(&self, function: &FunctionRef, manifest: &FunctionManifest) -> Result<TaskId>;
    fn poll(&self, task: TaskId) -> Result<TaskStatus>;
    /// Best-effort termination of a task that is no longer wanted.
    fn cancel(&self, _task: TaskId) {}
}

struct LocalTask {
    status: TaskStatus,
    cancel: Option<oneshot::Sender<()>>,
}

/// Runs functions as local subprocesses, at most `slots` at a time. Excess submissions queue.
pub struct LocalEndpoint {
    root: PathBuf,
    slots: Arc<Semaphore>,
    tasks: Arc<Mutex<HashMap<TaskId, LocalTask>>>,
    running: Arc<AtomicUsize>,
    peak_running: Arc<AtomicUsize>,
}

impl LocalEndpoint {
    pub fn new(root: impl Into<PathBuf>, slots: usize) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            slots: Arc::new(Semaphore::new(slots.max(1))),
            tasks: Arc::new(Mutex::new(HashMap::new())),
            running: Arc::new(AtomicUsize::new(0)),
            peak_running: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Highest number of simultaneously running tasks observed so far.
    pub fn peak_running(&self) -> usize {
        self.peak_running.load(Ordering::SeqCst)
    }

    pub fn task_dir(&self, task: TaskId) -> PathBuf {
        self.root.join(task.to_string())
    }

    fn set_status(tasks: &Mutex<HashMap<TaskId, LocalTask>>, task: TaskId, status: TaskStatus) {
        let mut tasks = tasks.lock();
        if let Some(t) = tasks.get_mut(&task) {
            if status.rank() > t.status.rank() {
                t.status = status;
            }
        }
    }
}

impl TaskEndpoint for LocalEndpoint {
    fn submit(&self, function: &FunctionRef, manifest: &FunctionManifest) -> Result<TaskId> {
        manifest.validate()?;
        let task = TaskId::new();
        let dir = self.task_dir(task);
        fs::create_dir_all(&dir).map_err(|e| AeroError::EndpointUnavailable(e.to_string()))?;
        let manifest_path = dir.join("manifest.json");
        fs::write(
            &manifest_path,
            serde_json::to_vec_pretty(manifest).expect("manifest serializes"),
        )
        .map_err(|e| AeroError::EndpointUnavailable(e.to_string()))?;

        let (cancel_tx, cancel_rx) = oneshot::channel();
        self.tasks.lock().insert(
            task,
            LocalTask {
                status: TaskStatus::Queued,
                cancel: Some(cancel_tx),
            },
        );

        let mut cmd = tokio::process::Command::new(&function.entry[0]);
        cmd.args(&function.entry[1..])
            .current_dir(&dir)
            .env("AERO_MANIFEST", &manifest_path)
            .env("AERO_RESULT", dir.join("result.json"))
            .env("AERO_OUTPUT_DIR", &manifest.output_dir)
            .env("AERO_RUN_ID", manifest.run_id.to_string())
            .env("AERO_OUTPUTS", manifest.outputs.join(","))
            .stdin(std::process::Stdio::null())
            .kill_on_drop(true);
        for (param, path) in &manifest.inputs {
            cmd.env(format!("AERO_INPUT_{}", env_suffix(param)), path);
        }
        for (name, value) in &manifest.kwargs {
            let text = match value {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            cmd.env(format!("AERO_KWARG_{}", env_suffix(name)), text);
        }

        let slots = self.slots.clone();
        let tasks = self.tasks.clone();
        let running = self.running.clone();
        let peak = self.peak_running.clone();
        let output_dir = manifest.output_dir.clone();
        tokio::spawn(async move {
            let mut cancel_rx = cancel_rx;
            let permit = tokio::select! {
                p = slots.acquire_owned() => p.expect("semaphore never closed"),
                _ = &mut cancel_rx => {
                    Self::set_status(&tasks, task, TaskStatus::Failed("cancelled".into()));
                    return;
                }
            };
            let now = running.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            Self::set_status(&tasks, task, TaskStatus::Running);
            let status = run_process(cmd, &dir, &output_dir, cancel_rx).await;
            running.fetch_sub(1, Ordering::SeqCst);
            drop(permit);
            Self::set_status(&tasks, task, status);
        });
        Ok(task)
    }

    fn poll(&self, task: TaskId) -> Result<TaskStatus> {
        self.tasks
            .lock()
            .get(&task)
            .map(|t| t.status.clone())
            .ok_or(AeroError::UnknownTask(task))
    }

    fn cancel(&self, task: TaskId) {
        if let Some(t) = self.tasks.lock().get_mut(&task) {
            if let Some(tx) = t.cancel.take() {
                let _ = tx.send(());
            }
        }
    }
}

fn env_suffix(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect()
}

async fn run_process(
    mut cmd: tokio::process::Command,
    dir: &Path,
    output_dir: &Path,
    cancel: oneshot::Receiver<()>,
) -> TaskStatus {
    let (stdout, stderr) = match (
        File::create(dir.join("stdout.log")),
        File::create(dir.join("stderr.log")),
    ) {
        (Ok(o), Ok(e)) => (o, e),
        (Err(e), _) | (_, Err(e)) => return TaskStatus::Failed(format!("cannot open task logs: {e}")),
    };
    cmd.stdout(stdout).stderr(stderr);
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return TaskStatus::Failed(format!("cannot start function: {e}")),
    };
    let exit = tokio::select! {
        r = child.wait() => r,
        _ = cancel => {
            let _ = child.kill().await;
            return TaskStatus::Failed("cancelled".into());
        }
    };
    let stderr_tail = || read_tail(&dir.join("stderr.log"), STDERR_TAIL);
    match exit {
        Ok(status) if status.success() => {
            let parsed = fs::read(dir.join("result.json"))
                .map_err(|e| format!("result.json unreadable: {e}"))
                .and_then(|b| {
                    serde_json::from_slice::<ResultManifest>(&b)
                        .map_err(|e| format!("result.json invalid: {e}"))
                })
                .and_then(|r| r.resolve(output_dir));
            match parsed {
                Ok(r) => TaskStatus::Done(r),
                Err(msg) => TaskStatus::Failed(format!("{msg}\n{}", stderr_tail())),
            }
        }
        Ok(status) => TaskStatus::Failed(format!("function exited with {status}\n{}", stderr_tail())),
        Err(e) => TaskStatus::Failed(format!("wait failed: {e}")),
    }
}

fn read_tail(path: &Path, max: u64) -> String {
    let Ok(mut f) = File::open(path) else {
        return String::new();
    };
    let len = f.metadata().map(|m| m.len()).unwrap_or(0);
    let _ = f.seek(SeekFrom::Start(len.saturating_sub(max)));
    let mut buf = Vec::new();
    let _ = f.read_to_end(&mut buf);
    String::from_utf8_lossy(&buf).into_owned()
}

/// Result of waiting on a task, with the instants at which it was polled.
#[derive(Debug, Clone)]
pub struct Completion {
    pub result: ResultManifest,
    pub polls: Vec<DateTime<Utc>>,
}

/// Polls at `t0, t0 + i0, t0 + i0 + i1, ...` until the task finishes or `timeout` passes.
pub async fn await_completion(
    endpoint: &dyn TaskEndpoint,
    task: TaskId,
    policy: &PollingPolicy,
    timeout: Duration,
    polls: &mut Vec<DateTime<Utc>>,
) -> Result<ResultManifest> {
    let start = tokio::time::Instant::now();
    let deadline = start + timeout;
    let mut next = start;
    let mut k = 0;
    loop {
        tokio::time::sleep_until(next).await;
        polls.push(Utc::now());
        match endpoint.poll(task)? {
            TaskStatus::Done(r) => return Ok(r),
            TaskStatus::Failed(msg) => return Err(AeroError::TaskFailed(msg)),
            TaskStatus::Queued | TaskStatus::Running => {}
        }
        if next >= deadline {
            endpoint.cancel(task);
            return Err(AeroError::Timeout(format!(
                "task {task} unfinished after {timeout:?}"
            )));
        }
        next = (next + policy.interval(k)).min(deadline);
        k += 1;
    }
}

/// Registered endpoints and the runtime objects behind them.
pub struct Executor {
    work_root: PathBuf,
    endpoints: RwLock<HashMap<EndpointId, Arc<dyn TaskEndpoint>>>,
}

impl Executor {
    pub fn new(work_root: impl Into<PathBuf>) -> Self {
        Self {
            work_root: work_root.into(),
            endpoints: RwLock::new(HashMap::new()),
        }
    }

    /// Brings up the runtime side of an endpoint record.
    pub fn attach(&self, endpoint: &EndpointRef) -> Result<()> {
        let runtime: Arc<dyn TaskEndpoint> = match endpoint.kind {
            EndpointKind::LocalSubprocess => Arc::new(LocalEndpoint::new(
                self.work_root.join(endpoint.endpoint_id.to_string()),
                endpoint.slots.unwrap_or(1) as usize,
            )?),
            EndpointKind::RemoteHttp => Arc::new(UnsupportedRemote),
        };
        self.endpoints.write().insert(endpoint.endpoint_id, runtime);
        Ok(())
    }

    /// Installs a custom runtime for an endpoint id, replacing any existing one.
    pub fn attach_runtime(&self, endpoint_id: EndpointId, runtime: Arc<dyn TaskEndpoint>) {
        self.endpoints.write().insert(endpoint_id, runtime);
    }

    pub fn runtime(&self, endpoint_id: EndpointId) -> Result<Arc<dyn TaskEndpoint>> {
        self.endpoints
            .read()
            .get(&endpoint_id)
            .cloned()
            .ok_or(AeroError::UnknownEndpoint(endpoint_id))
    }

    pub fn submit(
        &self,
        endpoint: &EndpointRef,
        function: &FunctionRef,
        manifest: &FunctionManifest,
    ) -> Result<TaskHandle> {
        if !endpoint.permits(function.function_id) {
            return Err(AeroError::FunctionNotAllowed {
                function: function.function_id,
                endpoint: endpoint.endpoint_id,
            });
        }
        let task_id = self.runtime(endpoint.endpoint_id)?.submit(function, manifest)?;
        Ok(TaskHandle {
            endpoint_id: endpoint.endpoint_id,
            task_id,
        })
    }

    pub fn poll(&self, handle: TaskHandle) -> Result<TaskStatus> {
        self.runtime(handle.endpoint_id)?.poll(handle.task_id)
    }

    pub async fn await_completion(
        &self,
        handle: TaskHandle,
        policy: &PollingPolicy,
        timeout: Duration,
    ) -> Result<Completion> {
        let runtime = self.runtime(handle.endpoint_id)?;
        let mut polls = Vec::new();
        let result = await_completion(runtime.as_ref(), handle.task_id, policy, timeout, &mut polls).await?;
        Ok(Completion { result, polls })
    }
}

/// Placeholder runtime for `RemoteHttp` endpoints: records can be registered but no adapter ships.
struct UnsupportedRemote;

impl TaskEndpoint for UnsupportedRemote {
    fn submit(&self, _: &FunctionRef, _: &FunctionManifest) -> Result<TaskId> {
        Err(AeroError::EndpointUnavailable(
            "no remote endpoint adapter is installed".into(),
        ))
    }

    fn poll(&self, task: TaskId) -> Result<TaskStatus> {
        Err(AeroError::UnknownTask(task))
    }
}

/// Checks that the program of `entry` exists and is executable (directly or via `PATH`).
pub fn validate_entry(entry: &[String]) -> Result<()> {
    let program = entry
        .first()
        .filter(|p| !p.trim().is_empty())
        .ok_or_else(|| AeroError::InvalidEntry("empty entry".into()))?;
    let is_exec = |p: &Path| {
        use std::os::unix::fs::PermissionsExt;
        p.is_file()
            && fs::metadata(p)
                .map(|m| m.permissions().mode() & 0o111 != 0)
                .unwrap_or(false)
    };
    let found = if program.contains('/') {
        is_exec(Path::new(program))
    } else {
        std::env::var_os("PATH")
            .map(|paths| std::env::split_paths(&paths).any(|d| is_exec(&d.join(program))))
            .unwrap_or(false)
    };
    if found {
        Ok(())
    } else {
        Err(AeroError::InvalidEntry(format!("{program} is not an executable")))
    }
}
