use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ice_core::bridge::{Bridge, BridgeConfig};
use ice_core::client::{parse_cli_params, Proxy};
use ice_core::control::{load_config_file, ControlConfig, ControlNode, DEFAULT_OBJECT_NAME};
use ice_core::datachannel::{serve_store, SyncClient};
use ice_core::policy::{load_rules, Policy};
use ice_core::registry::{serve_registry, Registry, RegistryClient};
use ice_core::rpc::{call_once, ADMIN_OBJECT};
use ice_core::wire::{Params, Request};
use ice_core::workflow::{Workflow, WorkflowRunner};
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};

const DEFAULT_REGISTRY: &str = "127.0.0.1:9090";

#[derive(Parser)]
#[command(
    name = "ice",
    version,
    about = "Remote steering and data collection for a networked instrument"
)]
struct Cli {
    /// Registry endpoint used to resolve object names.
    #[arg(long, global = true, env = "ICE_REGISTRY")]
    registry: Option<String>,
    /// Principal presented on every request.
    #[arg(long, global = true, env = "ICE_PRINCIPAL", default_value = "operator")]
    principal: String,
    /// Per-call timeout for client commands.
    #[arg(long, global = true, default_value_t = 5000)]
    timeout_ms: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the name registry.
    Registry {
        #[arg(long, default_value_t = ice_core::registry::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// JSON file the registry is restored from and saved to.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Run the control server with a simulated microscope.
    ServeInstrument(ServeInstrument),
    /// Invoke one method on an exposed object and print the result.
    Call {
        object: String,
        method: String,
        /// `key=value`; values are parsed as JSON, falling back to a string.
        #[arg(long = "param", short = 'p')]
        params: Vec<String>,
    },
    /// Run a workflow file and print its report; exits 1 if any step fails.
    Steer { workflow: PathBuf },
    /// Print an object's scan status.
    Status {
        #[arg(default_value = DEFAULT_OBJECT_NAME)]
        object: String,
    },
    /// Measurement store server and mirror client.
    #[command(subcommand)]
    Data(DataCommand),
    /// Serve the HTTP/SSE bridge for the operator console.
    Bridge {
        #[arg(long)]
        mirror: PathBuf,
        #[arg(long, default_value_t = ice_core::bridge::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value = DEFAULT_OBJECT_NAME)]
        object: String,
        #[arg(long, default_value_t = 500)]
        poll_ms: u64,
    },
    /// Policy file tools.
    #[command(subcommand)]
    Policy(PolicyCommand),
}

#[derive(Args)]
struct ServeInstrument {
    /// JSON (`.json`) or TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Multiplier on simulated scan time; 0 completes scans instantly.
    #[arg(long)]
    time_scale: Option<f64>,
    #[arg(long)]
    name: Option<String>,
    /// NDJSON audit log path.
    #[arg(long)]
    audit: Option<PathBuf>,
    /// Endpoint published to the registry instead of the bound address.
    #[arg(long)]
    advertise: Option<String>,
}

#[derive(Subcommand)]
enum DataCommand {
    /// Serve a measurement directory over the data channel.
    Serve {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 9200)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Mirror a remote store into a local directory.
    Sync {
        #[arg(long)]
        remote: String,
        #[arg(long)]
        dir: PathBuf,
        /// Keep syncing every `--interval` milliseconds.
        #[arg(long)]
        watch: bool,
        #[arg(long, default_value_t = 2000)]
        interval: u64,
    },
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Ask a running daemon to re-read its policy file.
    Reload {
        #[arg(long)]
        endpoint: String,
    },
    /// Parse a policy file and print its rules.
    Check { file: PathBuf },
}

fn load_policy(path: Option<&PathBuf>) -> Result<Policy> {
    match path {
        Some(p) => Policy::from_file(p).with_context(|| format!("loading policy {}", p.display())),
        None => {
            warn!("no --policy given; accepting every principal and source");
            Ok(Policy::open())
        }
    }
}

/// Cancels the returned token on ctrl-c; reloads `policy` on SIGHUP.
fn daemon_signals(policy: Option<Policy>) -> CancellationToken {
    let stop = CancellationToken::new();
    let token = stop.clone();
    tokio::spawn(async move {
        let _ = tokio::signal::ctrl_c().await;
        info!("shutting down");
        token.cancel();
    });
    #[cfg(unix)]
    if let Some(policy) = policy {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::hangup()) {
            Ok(mut hup) => {
                tokio::spawn(async move {
                    while hup.recv().await.is_some() {
                        match policy.reload() {
                            Ok(n) => info!(rules = n, "policy reloaded"),
                            Err(e) => warn!("policy reload failed, keeping current rules: {e}"),
                        }
                    }
                });
            }
            Err(e) => warn!("cannot install SIGHUP handler: {e}"),
        }
    }
    #[cfg(not(unix))]
    let _ = policy;
    stop
}

fn print_json(v: &impl serde::Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("values serialize")
    );
}

async fn run(cli: Cli) -> Result<ExitCode> {
    let timeout = Duration::from_millis(cli.timeout_ms);
    let registry_endpoint = cli
        .registry
        .clone()
        .unwrap_or_else(|| DEFAULT_REGISTRY.into());
    let registry_client = || RegistryClient::new(registry_endpoint.clone(), cli.principal.clone());

    match cli.command {
        Command::Registry {
            port,
            bind,
            snapshot,
            policy,
        } => {
            let registry = match &snapshot {
                Some(path) => Registry::with_snapshot(path).context("opening registry snapshot")?,
                None => Registry::new(),
            };
            let policy = load_policy(policy.as_ref())?;
            let server = serve_registry(
                Arc::new(registry),
                &format!("{bind}:{port}"),
                policy.clone(),
            )
            .await
            .with_context(|| format!("cannot listen on {bind}:{port}"))?;
            println!("registry listening on {}", server.endpoint());
            daemon_signals(Some(policy)).cancelled().await;
            server.shutdown().await;
        }

        Command::ServeInstrument(args) => {
            let mut config: ControlConfig = match &args.config {
                Some(path) => load_config_file(path)?,
                None => ControlConfig::default(),
            };
            if let Some(v) = args.port {
                config.port = v;
            }
            if let Some(v) = args.bind {
                config.bind = v;
            }
            if cli.registry.is_some() {
                config.registry = cli.registry.clone();
            }
            if args.policy.is_some() {
                config.policy = args.policy;
            }
            if let Some(v) = args.store {
                config.store = v;
            }
            if let Some(v) = args.time_scale {
                config.time_scale = v;
            }
            if let Some(v) = args.name {
                config.object_name = v;
            }
            if args.audit.is_some() {
                config.audit = args.audit;
            }
            if args.advertise.is_some() {
                config.advertise = args.advertise;
            }
            if config.policy.is_none() {
                warn!("no --policy given; accepting every principal and source");
            }
            let node = ControlNode::start(&config).await?;
            println!("{} served at {}", config.object_name, node.endpoint());
            let stop = daemon_signals(Some(node.control().policy().clone()));
            stop.cancelled().await;
            node.shutdown().await;
        }

        Command::Call {
            object,
            method,
            params,
        } => {
            let params =
                parse_cli_params(params.iter().map(String::as_str)).map_err(anyhow::Error::msg)?;
            let mut proxy =
                Proxy::new(registry_client(), object, cli.principal.clone()).with_timeout(timeout);
            print_json(&proxy.invoke(&method, params).await?);
        }

        Command::Status { object } => {
            let mut proxy =
                Proxy::new(registry_client(), object, cli.principal.clone()).with_timeout(timeout);
            print_json(&proxy.invoke("scan_status", Params::new()).await?);
        }

        Command::Steer { workflow } => {
            let wf = Workflow::load(&workflow)
                .with_context(|| format!("loading {}", workflow.display()))?;
            let report = WorkflowRunner::new(registry_client(), cli.principal.clone())
                .with_timeout(timeout)
                .run(&wf)
                .await;
            print_json(&report);
            if !report.is_ok() {
                return Ok(ExitCode::FAILURE);
            }
        }

        Command::Data(DataCommand::Serve {
            dir,
            port,
            bind,
            policy,
        }) => {
            let policy = load_policy(policy.as_ref())?;
            let server = serve_store(&dir, &format!("{bind}:{port}"), policy.clone())
                .await
                .with_context(|| format!("serving {} on {bind}:{port}", dir.display()))?;
            println!("store {} listening on {}", dir.display(), server.endpoint());
            daemon_signals(Some(policy)).cancelled().await;
            server.shutdown().await;
        }

        Command::Data(DataCommand::Sync {
            remote,
            dir,
            watch,
            interval,
        }) => {
            let client = SyncClient::new(remote, dir, cli.principal.clone());
            if !watch {
                let report = client.sync_once().await?;
                print_json(&report);
                if !report.mismatches.is_empty() {
                    return Ok(ExitCode::FAILURE);
                }
            } else {
                let stop = daemon_signals(None);
                client
                    .watch(Duration::from_millis(interval), stop, |r| {
                        if let Ok(report) = r {
                            println!(
                                "{}",
                                serde_json::to_string(report).expect("reports serialize")
                            );
                        }
                    })
                    .await;
            }
        }

        Command::Bridge {
            mirror,
            port,
            bind,
            object,
            poll_ms,
        } => {
            let mut config = BridgeConfig::new(registry_endpoint.clone(), mirror);
            config.port = port;
            config.bind = bind;
            config.object = object;
            config.principal = cli.principal.clone();
            config.poll_interval = Duration::from_millis(poll_ms);
            let bridge = Bridge::start(config).await.context("starting bridge")?;
            println!("bridge listening on {}", bridge.url());
            daemon_signals(None).cancelled().await;
            bridge.shutdown().await;
        }

        Command::Policy(PolicyCommand::Reload { endpoint }) => {
            let req = Request::new(
                ADMIN_OBJECT,
                "reload_policy",
                Params::new(),
                cli.principal.clone(),
            );
            print_json(&call_once(&endpoint, &req, timeout).await?);
        }

        Command::Policy(PolicyCommand::Check { file }) => {
            let rules = load_rules(&file)?;
            if rules.is_empty() {
                println!("no rules: every request is denied");
            }
            for (i, r) in rules.iter().enumerate() {
                println!("{:>3}  {r}", i + 1);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // daemons log progress; one-shot commands only warnings
    let daemon = matches!(
        cli.command,
        Command::Registry { .. }
            | Command::ServeInstrument(_)
            | Command::Bridge { .. }
            | Command::Data(DataCommand::Serve { .. })
            | Command::Data(DataCommand::Sync { watch: true, .. })
    );
    let default_filter = if daemon { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| default_filter.into()),
        )
        .with_ansi(std::io::stderr().is_terminal())
        .with_writer(std::io::stderr)
        .init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
