//! Name server resolving exposed object names to control-server endpoints.
//!
//! The registry is served over the common wire protocol as object
//! `"registry"` with methods `register`, `lookup`, `list` and `unregister`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use crate::policy::{Channel, Policy};
use crate::rpc::{self, RpcError, Server, Service};
use crate::wire::{ErrorInfo, Params, Request, Response};

pub const REGISTRY_OBJECT: &str = "registry";
pub const DEFAULT_PORT: u16 = 9090;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameRecord {
    pub name: String,
    pub endpoint: String,
    #[serde(default)]
    pub metadata: serde_json::Map<String, Value>,
    /// UTC seconds since the Unix epoch.
    pub registered_at: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("snapshot {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("snapshot {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
}

/// In-memory name table with an optional JSON snapshot rewritten on each change.
#[derive(Debug, Default)]
pub struct Registry {
    records: RwLock<BTreeMap<String, NameRecord>>,
    snapshot: Option<PathBuf>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens a registry backed by `path`, loading it if it exists.
    pub fn with_snapshot(path: impl Into<PathBuf>) -> Result<Self, SnapshotError> {
        let path = path.into();
        let records = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|source| SnapshotError::Parse {
                path: path.clone(),
                source,
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(source) => return Err(SnapshotError::Io { path, source }),
        };
        Ok(Registry {
            records: RwLock::new(records),
            snapshot: Some(path),
        })
    }

    pub fn register(
        &self,
        name: &str,
        endpoint: &str,
        metadata: serde_json::Map<String, Value>,
    ) -> Result<NameRecord, ErrorInfo> {
        if name.is_empty() {
            return Err(ErrorInfo::invalid_params("name must be non-empty"));
        }
        rpc::parse_endpoint(endpoint).map_err(ErrorInfo::invalid_params)?;
        let record = NameRecord {
            name: name.to_owned(),
            endpoint: endpoint.to_owned(),
            metadata,
            registered_at: chrono::Utc::now().timestamp().max(0) as u64,
        };
        let mut records = self.records.write().unwrap();
        records.insert(name.to_owned(), record.clone());
        self.persist(&records);
        Ok(record)
    }

    pub fn lookup(&self, name: &str) -> Result<NameRecord, ErrorInfo> {
        self.records
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| ErrorInfo::not_found(format!("no object named {name:?}")))
    }

    /// Records whose name starts with `prefix`, sorted by name.
    pub fn list(&self, prefix: &str) -> Vec<NameRecord> {
        self.records
            .read()
            .unwrap()
            .range(prefix.to_owned()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn unregister(&self, name: &str) {
        let mut records = self.records.write().unwrap();
        if records.remove(name).is_some() {
            self.persist(&records);
        }
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    // Called with the write guard held so snapshots land in mutation order.
    fn persist(&self, records: &BTreeMap<String, NameRecord>) {
        let Some(path) = &self.snapshot else { return };
        if let Err(e) = write_atomic(path, &serde_json::to_vec_pretty(records).unwrap()) {
            warn!("writing registry snapshot {}: {e}", path.display());
        }
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Wire-protocol front end for a [`Registry`].
pub struct RegistryService {
    registry: Arc<Registry>,
    policy: Policy,
}

impl RegistryService {
    pub fn new(registry: Arc<Registry>, policy: Policy) -> Self {
        RegistryService { registry, policy }
    }

    fn dispatch(&self, req: &Request) -> Result<Value, ErrorInfo> {
        if req.object != REGISTRY_OBJECT {
            return Err(ErrorInfo::not_found(format!(
                "no object {:?} here",
                req.object
            )));
        }
        let p = &req.params;
        match req.method.as_str() {
            "register" => {
                let metadata = match p.get("metadata") {
                    None | Some(Value::Null) => Default::default(),
                    Some(Value::Object(m)) => m.clone(),
                    Some(_) => return Err(ErrorInfo::invalid_params("metadata must be a map")),
                };
                let rec = self.registry.register(
                    str_param(p, "name")?,
                    str_param(p, "endpoint")?,
                    metadata,
                )?;
                Ok(serde_json::to_value(rec).unwrap())
            }
            "lookup" => {
                Ok(serde_json::to_value(self.registry.lookup(str_param(p, "name")?)?).unwrap())
            }
            "list" => {
                let prefix = match p.get("prefix") {
                    None => "",
                    Some(_) => str_param(p, "prefix")?,
                };
                Ok(serde_json::to_value(self.registry.list(prefix)).unwrap())
            }
            "unregister" => {
                self.registry.unregister(str_param(p, "name")?);
                Ok(json!(true))
            }
            other => Err(ErrorInfo::not_found(format!(
                "registry has no method {other:?}"
            ))),
        }
    }
}

impl Service for RegistryService {
    async fn handle(&self, req: Request, peer: SocketAddr) -> Response {
        let outcome = rpc::authorize(&self.policy, &req, &peer, Channel::Registry)
            .and_then(|()| self.dispatch(&req));
        req.respond(outcome)
    }
}

/// Binds a registry server on `addr`.
pub async fn serve_registry(
    registry: Arc<Registry>,
    addr: &str,
    policy: Policy,
) -> std::io::Result<Server> {
    let service = Arc::new(RegistryService::new(registry, policy.clone()));
    Server::bind(addr, service, policy, Channel::Registry).await
}

pub(crate) fn str_param<'a>(p: &'a Params, key: &str) -> Result<&'a str, ErrorInfo> {
    p.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| ErrorInfo::invalid_params(format!("missing string parameter {key:?}")))
}

/// Client for a remote registry.
#[derive(Debug, Clone)]
pub struct RegistryClient {
    endpoint: String,
    principal: String,
    timeout: Duration,
}

impl RegistryClient {
    pub fn new(endpoint: impl Into<String>, principal: impl Into<String>) -> Self {
        RegistryClient {
            endpoint: endpoint.into(),
            principal: principal.into(),
            timeout: Duration::from_secs(5),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    async fn call(&self, method: &str, params: Value) -> Result<Value, RpcError> {
        let Value::Object(params) = params else {
            unreachable!("registry params are always a map")
        };
        let req = Request::new(REGISTRY_OBJECT, method, params, self.principal.clone());
        rpc::call_once(&self.endpoint, &req, self.timeout).await
    }

    pub async fn register(
        &self,
        name: &str,
        endpoint: &str,
        metadata: serde_json::Map<String, Value>,
    ) -> Result<NameRecord, RpcError> {
        let v = self
            .call(
                "register",
                json!({"name": name, "endpoint": endpoint, "metadata": metadata}),
            )
            .await?;
        decode(v)
    }

    pub async fn lookup(&self, name: &str) -> Result<NameRecord, RpcError> {
        decode(self.call("lookup", json!({ "name": name })).await?)
    }

    pub async fn list(&self, prefix: &str) -> Result<Vec<NameRecord>, RpcError> {
        decode(self.call("list", json!({ "prefix": prefix })).await?)
    }

    pub async fn unregister(&self, name: &str) -> Result<(), RpcError> {
        self.call("unregister", json!({ "name": name }))
            .await
            .map(|_| ())
    }
}

fn decode<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, RpcError> {
    serde_json::from_value(v).map_err(|e| {
        RpcError::Wire(crate::wire::WireError::MalformedFrame(format!(
            "unexpected registry reply: {e}"
        )))
    })
}
