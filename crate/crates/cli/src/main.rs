use std::path::PathBuf;
use std::process::ExitCode;

use aero_cli::bench::{self, BenchConfig};
use aero_cli::{copyfn, ApiClient, ClientError};
use aero_core::model::{FlowRun, ProvenanceTree};
use aero_gateway::{Gateway, GatewayConfig};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

/// Exit status for API and runtime failures. Usage errors exit with 2 (clap's default).
const EXIT_API: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "aero", version, about = "Automated data ingestion, analysis flows and provenance")]
struct Cli {
    /// API base URL.
    #[arg(long, global = true, env = "AERO_SERVER", default_value = "http://127.0.0.1:8080")]
    server: String,
    /// Bearer token.
    #[arg(long, global = true, env = "AERO_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Print raw JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the API and collection servers.
    Serve {
        /// TOML config; AERO_BIND, AERO_COLLECTION_BIND, AERO_STATE_DIR, AERO_NOTIFIER_URL override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Issue and revoke tokens.
    #[command(subcommand)]
    Token(TokenCmd),
    /// Create a storage collection.
    CreateCollection,
    /// Grant or revoke permissions on a resource.
    Grant(GrantArgs),
    /// Register a function; everything after `--` is the command line.
    RegisterFunction {
        #[arg(long, default_value = "")]
        description: String,
        #[arg(last = true, required = true)]
        entry: Vec<String>,
    },
    /// Register a local compute endpoint.
    RegisterEndpoint {
        #[arg(long)]
        slots: Option<u32>,
    },
    /// Register an external source as an asset, and optionally the ingestion flow polling it.
    RegisterSource(SourceArgs),
    /// Register a flow from a JSON spec file (`-` for stdin).
    RegisterFlow { spec: PathBuf },
    /// Commit a local file as the asset's next version.
    Upload {
        asset: String,
        file: PathBuf,
        #[arg(long, default_value = "application/octet-stream")]
        media_type: String,
    },
    /// Start a flow now.
    Dispatch { flow: String },
    /// Search the catalog.
    Search {
        text: Option<String>,
        #[arg(long)]
        tag: Vec<String>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        offset: Option<usize>,
    },
    /// Download a version straight from its collection server.
    Fetch {
        asset: String,
        #[arg(long, default_value = "latest")]
        version: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// List a flow's runs.
    Runs { flow: String },
    /// Show how a version was produced.
    Provenance {
        asset: String,
        version: String,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Synthetic ingestion benchmark.
    Bench(BenchArgs),
    /// Functions bundled with the binary.
    #[command(subcommand)]
    Fn(FnCmd),
}

#[derive(Subcommand)]
enum TokenCmd {
    /// Create the first admin directly in a state directory (server stopped).
    Bootstrap {
        #[arg(long, env = "AERO_STATE_DIR")]
        state_dir: PathBuf,
        #[arg(long, default_value = "admin")]
        name: String,
    },
    /// Create a principal with a token, or a new token for `--principal`. Admin only.
    Create {
        #[arg(long, default_value = "")]
        name: String,
        #[arg(long)]
        principal: Option<String>,
        /// RFC 3339 expiry.
        #[arg(long)]
        expires: Option<String>,
    },
    Revoke { token_id: String },
}

#[derive(Subcommand)]
enum FnCmd {
    /// Republish the fetched source unchanged.
    Copy,
}

#[derive(Args)]
#[group(id = "resource", required = true, multiple = false)]
struct GrantArgs {
    #[arg(long, group = "resource")]
    asset: Option<String>,
    #[arg(long, group = "resource")]
    flow: Option<String>,
    #[arg(long, group = "resource")]
    collection: Option<String>,
    #[arg(long, group = "resource")]
    endpoint: Option<String>,
    #[arg(long)]
    principal: String,
    /// Comma-separated: read, write, execute, admin, view_runs.
    #[arg(long, value_delimiter = ',', required = true)]
    perm: Vec<String>,
    #[arg(long)]
    revoke: bool,
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long)]
    name: String,
    #[arg(long)]
    url: String,
    #[arg(long)]
    collection: String,
    #[arg(long, default_value = "")]
    description: String,
    #[arg(long)]
    tag: Vec<String>,
    #[arg(long)]
    public: bool,
    /// Poll interval in seconds; registers an ingestion flow when given.
    #[arg(long, requires_all = ["function", "endpoint"])]
    interval: Option<u64>,
    #[arg(long)]
    function: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Who to notify on failure.
    #[arg(long, default_value = "")]
    contact: String,
}

#[derive(Args)]
struct BenchArgs {
    /// Concurrency levels, e.g. `1,5,10,20`.
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SWEEP)]
    concurrency: Vec<u32>,
    #[arg(long, default_value_t = bench::DEFAULT_REPS)]
    reps: u32,
    /// Payload size in bytes.
    #[arg(long, default_value_t = bench::DEFAULT_SIZE)]
    size: u64,
    #[arg(long, default_value_t = bench::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    slots: u32,
    /// Use the server at --server instead of a private in-process one.
    #[arg(long)]
    remote: bool,
    #[arg(long, default_value = "aero-local")]
    executor: String,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Gnuplot table path. Defaults to the report path with a `.dat` extension.
    #[arg(long)]
    table: Option<PathBuf>,
}

enum Failure {
    Api(String),
    Usage(String),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::Api(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn print_tree(t: &ProvenanceTree, depth: usize) {
    let via = match (t.run_id, t.function_ref) {
        (Some(r), Some(f)) => format!("  <- run {r} (function {f})"),
        _ => String::new(),
    };
    println!("{}{} v{}{via}", "  ".repeat(depth), t.asset_id, t.version);
    for c in &t.children {
        print_tree(c, depth + 1);
    }
}

fn print_runs(runs: &[FlowRun]) {
    println!("{:<36}  {:>7}  {:<16}  {:<30}  {:>9}", "run", "attempt", "status", "started", "secs");
    for r in runs {
        let secs = r
            .ended_at
            .map(|e| format!("{:.3}", (e - r.started_at).num_milliseconds() as f64 / 1000.0))
            .unwrap_or_else(|| "-".into());
        let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        println!("{:<36}  {:>7}  {:<16}  {:<30}  {:>9}", r.run_id, r.attempt, status, r.started_at.to_rfc3339(), secs);
        if let Some(e) = &r.error {
            println!("    {:?}: {}", e.class, e.message);
        }
    }
}

async fn serve(config: Option<PathBuf>) -> Outcome {
    let cfg = GatewayConfig::from_env(config.as_deref()).map_err(usage)?;
    let gw = Gateway::start(&cfg).await.map_err(|e| Failure::Api(e.to_string()))?;
    eprintln!("api on http://{}, collections on http://{}", gw.api_addr, gw.collection_addr);
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = gw.wait() => {}
    }
    Ok(())
}

async fn bench_cmd(cli: &Cli, args: &BenchArgs) -> Outcome {
    // Catch a bad output path now rather than after minutes of measurements.
    for path in args.out.iter().chain(&args.table) {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Failure::Api(format!("{}: {e}", dir.display())))?;
        }
    }
    let exe = std::env::current_exe().map_err(|e| Failure::Api(e.to_string()))?;
    let mut cfg = BenchConfig::new(vec![exe.to_string_lossy().into_owned(), "fn".into(), "copy".into()]);
    cfg.concurrency = args.concurrency.clone();
    cfg.reps = args.reps;
    cfg.size = args.size;
    cfg.seed = args.seed;
    cfg.slots = args.slots;
    cfg.executor = args.executor.clone();
    let report = if args.remote {
        let work = tempfile::tempdir().map_err(|e| Failure::Api(e.to_string()))?;
        bench::run(&ApiClient::new(&cli.server, cli.token.clone()), &cfg, work.path()).await
    } else {
        bench::run_local(&cfg).await
    };
    let report = report.map_err(|e| match e {
        bench::BenchError::EndpointTooSmall { .. } | bench::BenchError::BadConcurrency(_) | bench::BenchError::NoRepetitions => {
            usage(e)
        }
        other => Failure::Api(other.to_string()),
    })?;
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&report).expect("serializable");
        std::fs::write(out, text).map_err(|e| Failure::Api(format!("{}: {e}", out.display())))?;
        let table = args.table.clone().unwrap_or_else(|| out.with_extension("dat"));
        std::fs::write(&table, report.gnuplot()).map_err(|e| Failure::Api(format!("{}: {e}", table.display())))?;
    }
    if cli.json {
        print_json(&report);
    } else {
        print!("{}", report.gnuplot());
    }
    for p in report.problems() {
        eprintln!("warning: {p}");
    }
    Ok(())
}

async fn run(cli: Cli) -> Outcome {
    let api = ApiClient::new(&cli.server, cli.token.clone());
    match &cli.cmd {
        Cmd::Serve { config } => return serve(config.clone()).await,
        Cmd::Bench(args) => return bench_cmd(&cli, args).await,
        Cmd::Fn(FnCmd::Copy) => return copyfn::run().map_err(Failure::Api),
        Cmd::Token(TokenCmd::Bootstrap { state_dir, name }) => {
            let aero = aero_core::Aero::open(aero_core::ServiceConfig::new(state_dir)).map_err(|e| Failure::Api(e.to_string()))?;
            let (p, t) = aero.bootstrap_admin(name).map_err(|e| Failure::Api(e.to_string()))?;
            if cli.json {
                print_json(&t);
            } else {
                println!("principal {}\ntoken {}", p.principal_id, t.token);
            }
            return Ok(());
        }
        _ => {}
    }

    let out: Value = match cli.cmd {
        Cmd::Token(TokenCmd::Create { name, principal, expires }) => {
            let expires = match expires {
                Some(s) => Some(chrono::DateTime::parse_from_rfc3339(&s).map_err(usage)?.to_utc()),
                None => None,
            };
            let v: Value = api
                .post("/tokens", &json!({ "display_name": name, "principal_id": principal, "expires_at": expires }))
                .await?;
            if !cli.json {
                println!("principal {}\ntoken_id {}\ntoken {}", v["principal_id"], v["token_id"], v["token"].as_str().unwrap_or(""));
                return Ok(());
            }
            v
        }
        Cmd::Token(TokenCmd::Revoke { token_id }) => {
            api.call::<Value>(reqwest::Method::DELETE, &format!("/tokens/{token_id}"), None).await?;
            json!({ "revoked": token_id })
        }
        Cmd::CreateCollection => api.post("/collections", &Value::Null).await?,
        Cmd::Grant(g) => {
            let (kind, id) = [("asset", &g.asset), ("flow", &g.flow), ("collection", &g.collection), ("endpoint", &g.endpoint)]
                .into_iter()
                .find_map(|(k, v)| v.clone().map(|v| (k, v)))
                .ok_or_else(|| usage("name a resource"))?;
            api.post::<Value>(
                "/acl",
                &json!({ "resource": { "type": kind, "id": id }, "principal_id": g.principal, "perms": g.perm, "revoke": g.revoke }),
            )
            .await?;
            json!({ "ok": true })
        }
        Cmd::RegisterFunction { description, entry } => {
            api.post("/functions", &json!({ "entry": entry, "description": description })).await?
        }
        Cmd::RegisterEndpoint { slots } => api.post("/endpoints", &json!({ "slots": slots })).await?,
        Cmd::RegisterSource(s) => {
            let asset: Value = api
                .post(
                    "/assets",
                    &json!({
                        "name": s.name, "description": s.description, "tags": s.tag,
                        "collection_ref": s.collection, "source_url": s.url, "public": s.public,
                    }),
                )
                .await?;
            let flow = match s.interval {
                Some(secs) => Some(
                    api.post::<Value>(
                        "/flows",
                        &json!({
                            "kind": "ingestion",
                            "function": s.function,
                            "endpoint": s.endpoint,
                            "outputs": { "data": { "asset_id": asset["asset_id"] } },
                            "rule": { "periodic": { "interval_secs": secs } },
                            "contact": s.contact,
                        }),
                    )
                    .await?,
                ),
                None => None,
            };
            if !cli.json {
                println!("asset {}", asset["asset_id"].as_str().unwrap_or(""));
                if let Some(f) = &flow {
                    println!("flow {}", f["flow_id"].as_str().unwrap_or(""));
                }
                return Ok(());
            }
            json!({ "asset": asset, "flow": flow })
        }
        Cmd::RegisterFlow { spec } => {
            let text = if spec.as_os_str() == "-" {
                std::io::read_to_string(std::io::stdin()).map_err(usage)?
            } else {
                std::fs::read_to_string(&spec).map_err(|e| usage(format!("{}: {e}", spec.display())))?
            };
            let body: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", spec.display())))?;
            let flow: Value = api.post("/flows", &body).await?;
            if !cli.json {
                println!("{}", flow["flow_id"].as_str().unwrap_or(""));
                return Ok(());
            }
            flow
        }
        Cmd::Upload { asset, file, media_type } => {
            let bytes = std::fs::read(&file).map_err(|e| usage(format!("{}: {e}", file.display())))?;
            api.upload(&asset, &media_type, bytes).await?
        }
        Cmd::Dispatch { flow } => api.post(&format!("/flows/{flow}/dispatch"), &Value::Null).await?,
        Cmd::Search { text, tag, limit, offset } => {
            let mut q: Vec<(&str, String)> = Vec::new();
            if let Some(t) = &text {
                q.push(("q", t.clone()));
            }
            q.extend(tag.iter().map(|t| ("tag", t.clone())));
            if let Some(l) = limit {
                q.push(("limit", l.to_string()));
            }
            if let Some(o) = offset {
                q.push(("offset", o.to_string()));
            }
            let hits = api.search(&q).await?;
            if !cli.json {
                println!("{:>5}  {:<36}  {:>7}  {:<24}  {}", "score", "asset", "version", "name", "download_url");
                for h in hits.as_array().into_iter().flatten() {
                    println!(
                        "{:>5}  {:<36}  {:>7}  {:<24}  {}",
                        h["score"], h["asset_id"].as_str().unwrap_or(""), h["version"], h["name"].as_str().unwrap_or(""),
                        h["download_url"].as_str().unwrap_or("")
                    );
                }
                return Ok(());
            }
            hits
        }
        Cmd::Fetch { asset, version, output } => {
            let meta = api.fetch(&asset, &version, &output).await?;
            if !cli.json {
                println!(
                    "{} v{} -> {} ({} bytes, sha256 {})",
                    asset, meta.version.version, output.display(), meta.version.size_bytes, meta.version.checksum
                );
                return Ok(());
            }
            serde_json::to_value(meta).expect("serializable")
        }
        Cmd::Runs { flow } => {
            let runs: Vec<FlowRun> = api.get(&format!("/flows/{flow}/runs")).await?;
            if !cli.json {
                print_runs(&runs);
                return Ok(());
            }
            serde_json::to_value(runs).expect("serializable")
        }
        Cmd::Provenance { asset, version, depth } => {
            let path = match depth {
                Some(d) => format!("/provenance/{asset}/{version}?depth={d}"),
                None => format!("/provenance/{asset}/{version}"),
            };
            let tree: Value = api.get(&path).await?;
            if !cli.json {
                let t: ProvenanceTree = serde_json::from_value(tree).map_err(|e| Failure::Api(e.to_string()))?;
                print_tree(&t, 0);
                return Ok(());
            }
            tree
        }
        Cmd::Serve { .. } | Cmd::Bench(_) | Cmd::Fn(_) | Cmd::Token(TokenCmd::Bootstrap { .. }) => unreachable!(),
    };
    print_json(&out);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("AERO_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Api(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_API)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
