//! TCP request/response plumbing shared by the registry, the control server
//! and the data store: accept loop with connection-time policy gating,
//! per-connection frame loop, graceful shutdown, and a small client.

use std::future::Future;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use tokio::net::{TcpListener, TcpStream};
use tokio_util::sync::CancellationToken;
use tokio_util::task::TaskTracker;
use tracing::{debug, info, warn};

use crate::policy::{AccessContext, Channel, Decision, Policy};
use crate::wire::{self, ErrorCode, ErrorInfo, Message, Request, Response, WireError};

/// Object name answered by every daemon for administrative requests.
pub const ADMIN_OBJECT: &str = "admin";

/// A request handler bound to one listening socket.
pub trait Service: Send + Sync + 'static {
    fn handle(&self, req: Request, peer: SocketAddr) -> impl Future<Output = Response> + Send;

    /// Whether the connection should be dropped after sending `resp`.
    fn close_after(&self, _resp: &Response) -> bool {
        false
    }
}

/// Splits and validates a `host:port` endpoint.
pub fn parse_endpoint(endpoint: &str) -> Result<(String, u16), String> {
    let (host, port) = endpoint
        .rsplit_once(':')
        .ok_or_else(|| format!("endpoint {endpoint:?} is not host:port"))?;
    if host.is_empty() {
        return Err(format!("endpoint {endpoint:?} has an empty host"));
    }
    let port: u16 = port
        .parse()
        .map_err(|_| format!("endpoint {endpoint:?} has an invalid port"))?;
    if port == 0 {
        return Err(format!("endpoint {endpoint:?} has port 0"));
    }
    Ok((host.to_owned(), port))
}

/// IPv4 view of a peer address; IPv6 peers other than mapped IPv4 have no
/// IPv4 identity and map to 0.0.0.0.
pub fn peer_ipv4(peer: &SocketAddr) -> Ipv4Addr {
    match peer.ip() {
        IpAddr::V4(v4) => v4,
        IpAddr::V6(v6) => v6.to_ipv4_mapped().unwrap_or(Ipv4Addr::UNSPECIFIED),
    }
}

/// Evaluates the request-time policy check for `req`.
pub fn authorize(
    policy: &Policy,
    req: &Request,
    peer: &SocketAddr,
    channel: Channel,
) -> Result<(), ErrorInfo> {
    let ctx = AccessContext::new(req.principal.clone(), peer_ipv4(peer), channel);
    match policy.evaluate(&ctx) {
        Decision::Allow => Ok(()),
        Decision::Deny => Err(ErrorInfo::policy_denied(format!(
            "principal {:?} from {} is not allowed on the {channel} channel",
            req.principal, ctx.source
        ))),
    }
}

/// A listening daemon. Dropping the handle does not stop it; call
/// [`Server::shutdown`].
pub struct Server {
    local_addr: SocketAddr,
    shutdown: CancellationToken,
    task: tokio::task::JoinHandle<()>,
}

impl Server {
    pub async fn bind<S: Service>(
        addr: &str,
        service: Arc<S>,
        policy: Policy,
        channel: Channel,
    ) -> io::Result<Server> {
        let listener = TcpListener::bind(addr).await?;
        Ok(Self::start(listener, service, policy, channel))
    }

    pub fn start<S: Service>(
        listener: TcpListener,
        service: Arc<S>,
        policy: Policy,
        channel: Channel,
    ) -> Server {
        let local_addr = listener
            .local_addr()
            .expect("bound listener has an address");
        let shutdown = CancellationToken::new();
        let task = tokio::spawn(accept_loop(
            listener,
            service,
            policy,
            channel,
            shutdown.clone(),
        ));
        info!(%local_addr, %channel, "listening");
        Server {
            local_addr,
            shutdown,
            task,
        }
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// `127.0.0.1:port` when bound to an unspecified address, else the bound address.
    pub fn endpoint(&self) -> String {
        if self.local_addr.ip().is_unspecified() {
            format!("127.0.0.1:{}", self.local_addr.port())
        } else {
            self.local_addr.to_string()
        }
    }

    pub fn shutdown_token(&self) -> CancellationToken {
        self.shutdown.clone()
    }

    /// Stops accepting, lets in-flight requests finish, then returns.
    pub async fn shutdown(self) {
        self.shutdown.cancel();
        let _ = self.task.await;
    }

    /// Resolves once the server has stopped (after someone cancelled its token).
    pub async fn stopped(self) {
        let _ = self.task.await;
    }
}

async fn accept_loop<S: Service>(
    listener: TcpListener,
    service: Arc<S>,
    policy: Policy,
    channel: Channel,
    shutdown: CancellationToken,
) {
    let tracker = TaskTracker::new();
    loop {
        let accepted = tokio::select! {
            _ = shutdown.cancelled() => break,
            a = listener.accept() => a,
        };
        let (stream, peer) = match accepted {
            Ok(a) => a,
            Err(e) => {
                warn!("accept failed: {e}");
                tokio::time::sleep(Duration::from_millis(10)).await;
                continue;
            }
        };
        if !policy.admits_source(peer_ipv4(&peer), channel) {
            debug!(%peer, %channel, "connection refused by policy");
            drop(stream);
            continue;
        }
        let _ = stream.set_nodelay(true);
        tracker.spawn(connection(
            stream,
            peer,
            service.clone(),
            policy.clone(),
            channel,
            shutdown.clone(),
        ));
    }
    drop(listener);
    tracker.close();
    tracker.wait().await;
}

async fn connection<S: Service>(
    stream: TcpStream,
    peer: SocketAddr,
    service: Arc<S>,
    policy: Policy,
    channel: Channel,
    shutdown: CancellationToken,
) {
    let (mut rd, mut wr) = stream.into_split();
    loop {
        let msg = tokio::select! {
            _ = shutdown.cancelled() => return,
            m = wire::read_message(&mut rd) => m,
        };
        let req = match msg {
            Ok(Some(Message::Request(req))) => req,
            Ok(Some(Message::Response(resp))) => {
                let reply = Response {
                    id: resp.id,
                    principal: resp.principal,
                    outcome: Err(ErrorInfo::invalid_params("expected a Request")),
                };
                let _ = wire::write_message(&mut wr, &reply.into()).await;
                return;
            }
            Ok(None) => return,
            Err(e) => {
                debug!(%peer, "closing connection: {e}");
                return;
            }
        };
        // Once a request is read it runs to completion even if shutdown starts.
        let resp = if req.object == ADMIN_OBJECT {
            admin(&policy, &req, &peer, channel)
        } else {
            service.handle(req, peer).await
        };
        let close = service.close_after(&resp);
        if let Err(e) = wire::write_message(&mut wr, &Message::Response(resp)).await {
            debug!(%peer, "write failed: {e}");
            return;
        }
        if close {
            return;
        }
    }
}

fn admin(policy: &Policy, req: &Request, peer: &SocketAddr, channel: Channel) -> Response {
    let outcome = authorize(policy, req, peer, channel).and_then(|()| match req.method.as_str() {
        "reload_policy" => policy
            .reload()
            .map(|n| json!({ "rules": n }))
            .map_err(|e| ErrorInfo::invalid_params(e.to_string())),
        "ping" => Ok(json!("pong")),
        other => Err(ErrorInfo::not_found(format!(
            "admin has no method {other:?}"
        ))),
    });
    req.respond(outcome)
}

#[derive(Debug, thiserror::Error)]
pub enum RpcError {
    #[error("cannot connect to {endpoint}: {source}")]
    Connect { endpoint: String, source: io::Error },
    #[error("connection closed before a response arrived")]
    Closed,
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("response id {got:?} does not match request id {expected:?}")]
    IdMismatch { expected: String, got: String },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("{0}")]
    Remote(ErrorInfo),
}

impl RpcError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            RpcError::Remote(e) => Some(e.code),
            _ => None,
        }
    }
}

/// One client connection carrying any number of sequential calls.
pub struct Connection {
    stream: TcpStream,
}

impl Connection {
    pub async fn connect(endpoint: &str) -> Result<Connection, RpcError> {
        let stream = TcpStream::connect(endpoint)
            .await
            .map_err(|source| RpcError::Connect {
                endpoint: endpoint.to_owned(),
                source,
            })?;
        let _ = stream.set_nodelay(true);
        Ok(Connection { stream })
    }

    /// Sends `req` and waits for its response.
    pub async fn call(&mut self, req: &Request) -> Result<Response, RpcError> {
        wire::write_message(&mut self.stream, &Message::Request(req.clone())).await?;
        match wire::read_message(&mut self.stream).await {
            Ok(Some(Message::Response(resp))) => {
                if resp.id != req.id {
                    return Err(RpcError::IdMismatch {
                        expected: req.id.clone(),
                        got: resp.id,
                    });
                }
                Ok(resp)
            }
            Ok(Some(Message::Request(_))) => Err(RpcError::Wire(WireError::MalformedFrame(
                "peer sent a request where a response was expected".into(),
            ))),
            Ok(None) | Err(WireError::Truncated) => Err(RpcError::Closed),
            Err(WireError::Io(e)) if is_reset(&e) => Err(RpcError::Closed),
            Err(e) => Err(e.into()),
        }
    }

    /// Like [`Connection::call`] but returns the Ok value or the remote error.
    pub async fn invoke(&mut self, req: &Request) -> Result<serde_json::Value, RpcError> {
        self.call(req).await?.outcome.map_err(RpcError::Remote)
    }
}

fn is_reset(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe
    )
}

/// Connects, sends one request and returns its value, all within `timeout`.
pub async fn call_once(
    endpoint: &str,
    req: &Request,
    timeout: Duration,
) -> Result<serde_json::Value, RpcError> {
    let fut = async {
        let mut conn = Connection::connect(endpoint).await?;
        conn.invoke(req).await
    };
    tokio::time::timeout(timeout, fut)
        .await
        .map_err(|_| RpcError::Timeout(timeout))?
}
