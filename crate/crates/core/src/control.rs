//! The control-node daemon: exposes instrument adapters on the control
//! channel, checks every request against policy, serializes mutating calls
//! per object and writes one audit entry per dispatched request.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, warn};

use crate::instrument::{Adapter, Microscope, SimulatorConfig, MUTATING_METHODS};
use crate::policy::{Channel, Policy, PolicyError};
use crate::registry::RegistryClient;
use crate::rpc::{self, RpcError, Server, Service};
use crate::wire::{ErrorCode, ErrorInfo, Params, Request, Response};

pub const DEFAULT_OBJECT_NAME: &str = "u200.microscope";

struct Exposure {
    adapter: Adapter,
    mutating: HashSet<String>,
    guard: Arc<tokio::sync::Mutex<()>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub sequence_no: u64,
    pub request_id: String,
    pub principal: String,
    pub object: String,
    pub method: String,
    pub params: Params,
    pub status: AuditStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_code: Option<ErrorCode>,
    pub started_at: String,
    pub finished_at: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuditStatus {
    Ok,
    Error,
}

/// Append-only audit trail, in memory and optionally as NDJSON on disk.
#[derive(Default)]
pub struct AuditLog {
    inner: Mutex<AuditInner>,
}

#[derive(Default)]
struct AuditInner {
    next_seq: u64,
    entries: Vec<AuditEntry>,
    file: Option<File>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, continuing the sequence numbering found there.
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        let mut next_seq = 0;
        if path.exists() {
            if let Some(last) = read_audit_file(path)?.last() {
                next_seq = last.sequence_no + 1;
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(AuditLog {
            inner: Mutex::new(AuditInner {
                next_seq,
                entries: Vec::new(),
                file: Some(file),
            }),
        })
    }

    fn append(&self, mut entry: AuditEntry) -> u64 {
        let mut inner = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        entry.sequence_no = inner.next_seq;
        inner.next_seq += 1;
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_vec(&entry).expect("audit entries serialize");
            line.push(b'\n');
            if let Err(e) = file.write_all(&line) {
                warn!("audit write failed: {e}");
            }
        }
        let seq = entry.sequence_no;
        inner.entries.push(entry);
        seq
    }

    /// Entries appended by this process, in sequence order.
    pub fn entries(&self) -> Vec<AuditEntry> {
        self.inner
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entries
            .clone()
    }
}

pub fn read_audit_file(path: impl AsRef<Path>) -> std::io::Result<Vec<AuditEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // a torn final line after a crash is skipped
        match serde_json::from_str(&line) {
            Ok(e) => out.push(e),
            Err(e) => warn!("skipping unreadable audit line: {e}"),
        }
    }
    Ok(out)
}

fn now_stamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

/// Dispatch table of exposed objects plus the policy and audit trail that
/// guard it.
pub struct ControlServer {
    exposures: RwLock<BTreeMap<String, Arc<Exposure>>>,
    policy: Policy,
    audit: AuditLog,
}

impl ControlServer {
    pub fn new(policy: Policy, audit: AuditLog) -> Self {
        ControlServer {
            exposures: RwLock::new(BTreeMap::new()),
            policy,
            audit,
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn expose<'a>(
        &self,
        object_name: &str,
        adapter: Adapter,
        mutating_methods: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), ErrorInfo> {
        if object_name.is_empty() {
            return Err(ErrorInfo::invalid_params("object name must be non-empty"));
        }
        let mutating: HashSet<String> = mutating_methods.into_iter().map(str::to_owned).collect();
        if let Some(m) = mutating.iter().find(|m| !adapter.has_method(m)) {
            return Err(ErrorInfo::invalid_params(format!(
                "mutating method {m:?} is not in the adapter's table"
            )));
        }
        let mut exposures = self.exposures.write().unwrap();
        if exposures.contains_key(object_name) {
            return Err(ErrorInfo::invalid_params(format!(
                "{object_name:?} is already exposed"
            )));
        }
        exposures.insert(
            object_name.to_owned(),
            Arc::new(Exposure {
                adapter,
                mutating,
                guard: Arc::new(tokio::sync::Mutex::new(())),
            }),
        );
        Ok(())
    }

    pub fn exposed_names(&self) -> Vec<String> {
        self.exposures.read().unwrap().keys().cloned().collect()
    }

    /// Registers every exposed object under `endpoint`.
    pub async fn register_all(
        &self,
        registry: &RegistryClient,
        endpoint: &str,
    ) -> Result<(), RpcError> {
        for name in self.exposed_names() {
            let mut meta = serde_json::Map::new();
            meta.insert("channel".into(), Value::from("control"));
            registry.register(&name, endpoint, meta).await?;
            info!(object = %name, %endpoint, "registered");
        }
        Ok(())
    }

    pub async fn dispatch(&self, req: Request, peer: SocketAddr) -> Response {
        let started_at = now_stamp();
        let outcome = match rpc::authorize(&self.policy, &req, &peer, Channel::Control) {
            Err(denied) => Err(denied),
            Ok(()) => {
                let exposure = self.exposures.read().unwrap().get(&req.object).cloned();
                match exposure {
                    None => Err(ErrorInfo::not_found(format!(
                        "no exposed object {:?}",
                        req.object
                    ))),
                    Some(exp) if !exp.adapter.has_method(&req.method) => Err(ErrorInfo::not_found(
                        format!("{:?} has no method {:?}", req.object, req.method),
                    )),
                    Some(exp) if exp.mutating.contains(&req.method) => {
                        let _held = exp.guard.clone().lock_owned().await;
                        let outcome = run_adapter(&exp, &req).await;
                        // audit while still holding the guard so the log order is the execution order
                        let resp = req.respond(outcome);
                        self.record(&req, &resp, started_at);
                        return resp;
                    }
                    Some(exp) => run_adapter(&exp, &req).await,
                }
            }
        };
        let resp = req.respond(outcome);
        self.record(&req, &resp, started_at);
        resp
    }

    fn record(&self, req: &Request, resp: &Response, started_at: String) {
        let (status, error_code) = match &resp.outcome {
            Ok(_) => (AuditStatus::Ok, None),
            Err(e) => (AuditStatus::Error, Some(e.code)),
        };
        self.audit.append(AuditEntry {
            sequence_no: 0,
            request_id: req.id.clone(),
            principal: req.principal.clone(),
            object: req.object.clone(),
            method: req.method.clone(),
            params: req.params.clone(),
            status,
            error_code,
            started_at,
            finished_at: now_stamp(),
        });
    }
}

async fn run_adapter(exp: &Exposure, req: &Request) -> Result<Value, ErrorInfo> {
    let adapter = exp.adapter.clone();
    let method = req.method.clone();
    let params = req.params.clone();
    match tokio::task::spawn_blocking(move || adapter.call(&method, &params)).await {
        Ok(outcome) => outcome,
        Err(join) => {
            let detail = if join.is_panic() {
                let payload = join.into_panic();
                payload
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| payload.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "adapter panicked".into())
            } else {
                "adapter task was cancelled".into()
            };
            Err(ErrorInfo::internal(detail))
        }
    }
}

impl Service for ControlServer {
    async fn handle(&self, req: Request, peer: SocketAddr) -> Response {
        self.dispatch(req, peer).await
    }
}

/// Settings for `ice serve-instrument`. Every field has a default so a
/// config file may set any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub port: u16,
    pub bind: String,
    pub registry: Option<String>,
    pub policy: Option<PathBuf>,
    pub store: PathBuf,
    pub time_scale: f64,
    pub object_name: String,
    pub audit: Option<PathBuf>,
    /// Principal presented to the registry when self-registering.
    pub principal: String,
    /// Endpoint published to the registry; defaults to the bound address.
    pub advertise: Option<String>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            port: 9101,
            bind: "127.0.0.1".into(),
            registry: None,
            policy: None,
            store: PathBuf::from("store"),
            time_scale: 1.0,
            object_name: DEFAULT_OBJECT_NAME.into(),
            audit: None,
            principal: "control-node".into(),
            advertise: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Reads a JSON (`.json`) or TOML (anything else) config file.
pub fn load_config_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|message| ConfigError::Parse {
        path: path.to_owned(),
        message,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("measurement store: {0}")]
    Store(std::io::Error),
    #[error("audit log: {0}")]
    Audit(std::io::Error),
    #[error("registry unreachable: {0}")]
    Registry(RpcError),
    #[error("{0}")]
    Expose(ErrorInfo),
}

/// A running control node: simulator, control server, listener.
pub struct ControlNode {
    server: Server,
    control: Arc<ControlServer>,
    microscope: Microscope,
}

impl ControlNode {
    pub async fn start(config: &ControlConfig) -> Result<ControlNode, StartError> {
        let policy = match &config.policy {
            Some(p) => Policy::from_file(p)?,
            None => Policy::open(),
        };
        let audit = match &config.audit {
            Some(p) => AuditLog::open(p).map_err(StartError::Audit)?,
            None => AuditLog::in_memory(),
        };
        let microscope =
            Microscope::new(SimulatorConfig::new(&config.store).time_scale(config.time_scale))
                .map_err(StartError::Store)?;
        let control = Arc::new(ControlServer::new(policy.clone(), audit));
        control
            .expose(&config.object_name, microscope.adapter(), MUTATING_METHODS)
            .map_err(StartError::Expose)?;

        let addr = format!("{}:{}", config.bind, config.port);
        let server = Server::bind(&addr, control.clone(), policy, Channel::Control)
            .await
            .map_err(|source| StartError::Bind { addr, source })?;
        if let Some(registry) = &config.registry {
            let endpoint = config
                .advertise
                .clone()
                .unwrap_or_else(|| server.endpoint());
            let client = RegistryClient::new(registry.clone(), config.principal.clone());
            if let Err(e) = control.register_all(&client, &endpoint).await {
                server.shutdown().await;
                return Err(StartError::Registry(e));
            }
        }
        Ok(ControlNode {
            server,
            control,
            microscope,
        })
    }

    pub fn endpoint(&self) -> String {
        self.server.endpoint()
    }

    pub fn control(&self) -> &Arc<ControlServer> {
        &self.control
    }

    pub fn microscope(&self) -> &Microscope {
        &self.microscope
    }

    pub fn shutdown_token(&self) -> tokio_util::sync::CancellationToken {
        self.server.shutdown_token()
    }

    pub async fn shutdown(self) {
        self.server.shutdown().await
    }

    pub async fn stopped(self) {
        self.server.stopped().await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::parse_rules;
    use serde_json::json;

    fn peer() -> SocketAddr {
        "127.0.0.1:5555".parse().unwrap()
    }

    fn req(object: &str, method: &str, params: Value, principal: &str) -> Request {
        Request::new(
            object,
            method,
            params.as_object().cloned().unwrap_or_default(),
            principal,
        )
    }

    fn counter() -> Adapter {
        let n = Arc::new(Mutex::new(0i64));
        let m = n.clone();
        Adapter::new()
            .method("get", move |_| Ok(json!(*n.lock().unwrap())))
            .method("bump", move |_| {
                *m.lock().unwrap() += 1;
                Ok(json!(true))
            })
            .method("boom", |_| panic!("detector on fire"))
            .method("fail", |_| Err(ErrorInfo::out_of_range("nope")))
    }

    #[tokio::test]
    async fn expose_rules() {
        let s = ControlServer::new(Policy::open(), AuditLog::in_memory());
        s.expose("c", counter(), ["bump"]).unwrap();
        assert_eq!(
            s.expose("c", counter(), []).unwrap_err().code,
            ErrorCode::InvalidParams
        );
        assert_eq!(
            s.expose("d", counter(), ["missing"]).unwrap_err().code,
            ErrorCode::InvalidParams
        );
        assert_eq!(s.exposed_names(), ["c"]);
    }

    #[tokio::test]
    async fn dispatch_outcomes_are_audited() {
        let policy =
            Policy::from_rules(parse_rules("deny intruder * control\nallow * * control").unwrap());
        let s = ControlServer::new(policy, AuditLog::in_memory());
        s.expose("c", counter(), ["bump"]).unwrap();

        let r = s.dispatch(req("c", "bump", json!({}), "ops"), peer()).await;
        assert_eq!(r.outcome, Ok(json!(true)));
        let r = s.dispatch(req("c", "get", json!({}), "ops"), peer()).await;
        assert_eq!(r.outcome, Ok(json!(1)));

        let denied = req("c", "bump", json!({}), "intruder");
        let r = s.dispatch(denied.clone(), peer()).await;
        assert_eq!(r.id, denied.id);
        assert_eq!(r.outcome.unwrap_err().code, ErrorCode::PolicyDenied);
        // the denied call never reached the adapter
        let r = s.dispatch(req("c", "get", json!({}), "ops"), peer()).await;
        assert_eq!(r.outcome, Ok(json!(1)));

        let r = s
            .dispatch(req("nope", "get", json!({}), "ops"), peer())
            .await;
        assert_eq!(r.outcome.unwrap_err().code, ErrorCode::NotFound);
        let r = s.dispatch(req("c", "nope", json!({}), "ops"), peer()).await;
        assert_eq!(r.outcome.unwrap_err().code, ErrorCode::NotFound);
        let r = s.dispatch(req("c", "fail", json!({}), "ops"), peer()).await;
        assert_eq!(r.outcome.unwrap_err(), ErrorInfo::out_of_range("nope"));
        let r = s.dispatch(req("c", "boom", json!({}), "ops"), peer()).await;
        let err = r.outcome.unwrap_err();
        assert_eq!(err.code, ErrorCode::Internal);
        assert!(err.message.contains("detector on fire"));

        let log = s.audit().entries();
        assert_eq!(log.len(), 8);
        assert!(log
            .iter()
            .enumerate()
            .all(|(i, e)| e.sequence_no == i as u64));
        assert_eq!(log[2].principal, "intruder");
        assert_eq!(log[2].error_code, Some(ErrorCode::PolicyDenied));
        assert_eq!(log[0].status, AuditStatus::Ok);
    }

    #[tokio::test]
    async fn audit_file_continues_numbering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.ndjson");
        for _ in 0..2 {
            let s = ControlServer::new(Policy::open(), AuditLog::open(&path).unwrap());
            s.expose("c", counter(), ["bump"]).unwrap();
            s.dispatch(req("c", "bump", json!({}), "ops"), peer()).await;
            s.dispatch(req("c", "get", json!({}), "ops"), peer()).await;
        }
        let entries = read_audit_file(&path).unwrap();
        let seqs: Vec<u64> = entries.iter().map(|e| e.sequence_no).collect();
        assert_eq!(seqs, [0, 1, 2, 3]);
    }

    #[test]
    fn config_files_fill_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("node.toml");
        std::fs::write(
            &toml_path,
            "port = 9200\ntime_scale = 0.01\nstore = \"/data/u200\"\n",
        )
        .unwrap();
        let c: ControlConfig = load_config_file(&toml_path).unwrap();
        assert_eq!(c.port, 9200);
        assert_eq!(c.time_scale, 0.01);
        assert_eq!(c.object_name, DEFAULT_OBJECT_NAME);
        let json_path = dir.path().join("node.json");
        std::fs::write(&json_path, r#"{"registry": "127.0.0.1:9090"}"#).unwrap();
        let c: ControlConfig = load_config_file(&json_path).unwrap();
        assert_eq!(c.registry.as_deref(), Some("127.0.0.1:9090"));
        std::fs::write(&json_path, r#"{"colour": 1}"#).unwrap();
        assert!(load_config_file::<ControlConfig>(&json_path).is_err());
    }
}
