//! Remote-side proxy for exposed instrument objects.

use std::time::Duration;

use serde_json::Value;
use tracing::debug;

use crate::registry::RegistryClient;
use crate::rpc::{Connection, RpcError};
use crate::wire::{ErrorCode, Params, Request};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(5000);

/// Handle on one exposed object, resolved through the registry.
///
/// Each [`Proxy::invoke`] sends exactly one request id. If the cached
/// endpoint refuses the connection, or the server there no longer exposes
/// the object, the endpoint is looked up again once and the call retried.
#[derive(Debug, Clone)]
pub struct Proxy {
    object_name: String,
    registry: Option<RegistryClient>,
    endpoint: Option<String>,
    principal: String,
    timeout: Duration,
}

impl Proxy {
    pub fn new(
        registry: RegistryClient,
        object_name: impl Into<String>,
        principal: impl Into<String>,
    ) -> Self {
        Proxy {
            object_name: object_name.into(),
            registry: Some(registry),
            endpoint: None,
            principal: principal.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    /// A proxy pinned to `endpoint`, bypassing the registry.
    pub fn direct(
        endpoint: impl Into<String>,
        object_name: impl Into<String>,
        principal: impl Into<String>,
    ) -> Self {
        Proxy {
            object_name: object_name.into(),
            registry: None,
            endpoint: Some(endpoint.into()),
            principal: principal.into(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn object_name(&self) -> &str {
        &self.object_name
    }

    pub fn endpoint(&self) -> Option<&str> {
        self.endpoint.as_deref()
    }

    pub fn principal(&self) -> &str {
        &self.principal
    }

    /// Looks the object up in the registry, replacing any cached endpoint.
    pub async fn resolve(&mut self) -> Result<&str, RpcError> {
        let Some(registry) = &self.registry else {
            return self
                .endpoint
                .as_deref()
                .ok_or_else(|| RpcError::Remote(crate::wire::ErrorInfo::not_found("no endpoint")));
        };
        let record = registry.lookup(&self.object_name).await?;
        self.endpoint = Some(record.endpoint);
        Ok(self.endpoint.as_deref().unwrap())
    }

    pub async fn invoke(&mut self, method: &str, params: Params) -> Result<Value, RpcError> {
        let req = Request::new(
            self.object_name.clone(),
            method,
            params,
            self.principal.clone(),
        );
        let timeout = self.timeout;
        tokio::time::timeout(timeout, self.invoke_inner(&req))
            .await
            .map_err(|_| RpcError::Timeout(timeout))?
    }

    async fn invoke_inner(&mut self, req: &Request) -> Result<Value, RpcError> {
        let mut refreshed = false;
        if self.endpoint.is_none() {
            self.resolve().await?;
            refreshed = true;
        }
        loop {
            let endpoint = self.endpoint.clone().expect("resolved above");
            let mut conn = match Connection::connect(&endpoint).await {
                Ok(c) => c,
                Err(e) if !refreshed && self.registry.is_some() => {
                    debug!(object = %self.object_name, "connect failed ({e}), re-resolving");
                    self.resolve().await?;
                    refreshed = true;
                    continue;
                }
                Err(e) => return Err(e),
            };
            match conn.invoke(req).await {
                Err(RpcError::Remote(e))
                    if e.code == ErrorCode::NotFound && !refreshed && self.registry.is_some() =>
                {
                    // NotFound means the request was not executed, so resending is safe
                    let old = endpoint;
                    self.resolve().await?;
                    refreshed = true;
                    if self.endpoint.as_deref() == Some(old.as_str()) {
                        return Err(RpcError::Remote(e));
                    }
                }
                other => return other,
            }
        }
    }
}

/// Parses `k=v` command-line parameters; values that parse as JSON keep
/// their type, anything else is a string.
pub fn parse_cli_params<'a>(pairs: impl IntoIterator<Item = &'a str>) -> Result<Params, String> {
    let mut params = Params::new();
    for pair in pairs {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("parameter {pair:?} is not key=value"))?;
        if k.is_empty() {
            return Err(format!("parameter {pair:?} has an empty key"));
        }
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
        params.insert(k.to_owned(), value);
    }
    Ok(params)
}
