#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use aero_core::auth::Permission;
use aero_core::executor::{EndpointKind, PollingPolicy};
use aero_core::flow::RetryPolicy;
use aero_core::ids::{CollectionId, EndpointId, FunctionId, PrincipalId};
use aero_core::model::NewAsset;
use aero_core::{Aero, ServiceConfig};
use parking_lot::Mutex;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpListener;

/// An HTTP server whose documents can be changed between requests.
#[derive(Clone)]
pub struct Source {
    pub base: String,
    docs: Arc<Mutex<HashMap<String, (u16, Vec<u8>)>>>,
}

impl Source {
    pub async fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let docs: Arc<Mutex<HashMap<String, (u16, Vec<u8>)>>> = Arc::default();
        let served = docs.clone();
        tokio::spawn(async move {
            loop {
                let (mut sock, _) = listener.accept().await.unwrap();
                let docs = served.clone();
                tokio::spawn(async move {
                    let mut buf = vec![0u8; 8192];
                    let n = sock.read(&mut buf).await.unwrap_or(0);
                    let req = String::from_utf8_lossy(&buf[..n]).to_string();
                    let path = req.split_whitespace().nth(1).unwrap_or("/").to_owned();
                    let (status, body) = docs.lock().get(&path).cloned().unwrap_or((404, Vec::new()));
                    let head = format!(
                        "HTTP/1.1 {status} X\r\ncontent-length: {}\r\ncontent-type: application/octet-stream\r\nconnection: close\r\n\r\n",
                        body.len()
                    );
                    let _ = sock.write_all(head.as_bytes()).await;
                    let _ = sock.write_all(&body).await;
                });
            }
        });
        Self { base, docs }
    }

    pub fn set(&self, path: &str, status: u16, body: &[u8]) -> String {
        self.docs.lock().insert(path.to_owned(), (status, body.to_vec()));
        format!("{}{path}", self.base)
    }
}

/// Concatenates every input (in param order) into the first declared output.
pub const CONCAT: &str = r#"set -e
s=$(date -u +%Y-%m-%dT%H:%M:%S.%NZ)
name="${AERO_OUTPUTS%%,*}"
out="$AERO_OUTPUT_DIR/$name"
: > "$out"
for f in $(env | grep '^AERO_INPUT_' | sort | cut -d= -f2-); do cat "$f" >> "$out"; done
e=$(date -u +%Y-%m-%dT%H:%M:%S.%NZ)
printf '{"status":"ok","outputs":[{"name":"%s","path":"%s"}],"task_started":"%s","task_ended":"%s"}' "$name" "$name" "$s" "$e" > "$AERO_RESULT"
"#;

/// Always reports a domain error.
pub const REJECT: &str = r#"s=$(date -u +%Y-%m-%dT%H:%M:%S.%NZ)
printf '{"status":"error","error":"validation failed: bad rows","task_started":"%s","task_ended":"%s"}' "$s" "$s" > "$AERO_RESULT"
"#;

/// Always asks to skip.
pub const SKIP: &str = r#"s=$(date -u +%Y-%m-%dT%H:%M:%S.%NZ)
printf '{"status":"skip","task_started":"%s","task_ended":"%s"}' "$s" "$s" > "$AERO_RESULT"
"#;

pub fn script(dir: &Path, name: &str, body: &str) -> Vec<String> {
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "#!/bin/sh\n{body}").unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    vec![path.to_string_lossy().into_owned()]
}

pub struct Harness {
    pub aero: Arc<Aero>,
    pub dir: tempfile::TempDir,
    pub admin: PrincipalId,
    pub user: PrincipalId,
    pub col: CollectionId,
    pub endpoint: EndpointId,
    pub concat: FunctionId,
}

pub fn fast_config(dir: &Path) -> ServiceConfig {
    let mut cfg = ServiceConfig::new(dir.join("aero"));
    cfg.retry = RetryPolicy {
        max_attempts: 4,
        base_delay_secs: 0.05,
        factor: 2.0,
        max_delay_secs: 1.0,
    };
    cfg.polling = PollingPolicy {
        initial_secs: 0.05,
        factor: 1.5,
        cap_secs: 0.5,
    };
    cfg
}

impl Harness {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        Self::with_config(fast_config(dir.path()), dir)
    }

    pub fn with_config(cfg: ServiceConfig, dir: tempfile::TempDir) -> Self {
        let aero = Aero::open(cfg).unwrap();
        aero.set_collection_base_url("http://127.0.0.1:1").unwrap();
        let (admin, _) = aero.bootstrap_admin("root").unwrap();
        let (user, _) = aero
            .issue_token(admin.principal_id, None, "researcher", None)
            .unwrap();
        let user = user.principal_id;
        let col = aero.create_collection(user).unwrap().collection_id;
        let concat = aero
            .register_function(user, script(dir.path(), "concat.sh", CONCAT), "concat inputs")
            .unwrap()
            .function_id;
        let endpoint = aero
            .register_endpoint(user, EndpointKind::LocalSubprocess, Some(8), None, None)
            .unwrap()
            .endpoint_id;
        Self {
            aero,
            dir,
            admin: admin.principal_id,
            user,
            col,
            endpoint,
            concat,
        }
    }

    pub fn function(&self, name: &str, body: &str) -> FunctionId {
        self.aero
            .register_function(self.user, script(self.dir.path(), name, body), name)
            .unwrap()
            .function_id
    }

    pub fn asset(&self, name: &str, url: Option<&str>) -> aero_core::ids::AssetId {
        self.aero
            .create_asset(
                self.user,
                &NewAsset {
                    name: name.into(),
                    description: format!("{name} test data"),
                    tags: BTreeSet::from(["test".to_string()]),
                    collection_ref: self.col,
                    source_url: url.map(str::to_owned),
                    public: false,
                },
            )
            .unwrap()
            .asset_id
    }

    pub fn collection_path(&self) -> PathBuf {
        self.aero.store().get(self.col).unwrap().root_path
    }

    pub fn perms(p: &[Permission]) -> BTreeSet<Permission> {
        p.iter().copied().collect()
    }
}

pub async fn settle(aero: &Aero) {
    tokio::time::timeout(Duration::from_secs(60), aero.quiesce())
        .await
        .expect("runs settle within a minute");
}
