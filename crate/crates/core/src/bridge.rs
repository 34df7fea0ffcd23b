//! HTTP + server-sent-events gateway for the operator console.
//!
//! | route                                 | purpose                              |
//! |---------------------------------------|--------------------------------------|
//! | `GET /api/status`                     | cached [`EcosystemSnapshot`]         |
//! | `POST /api/command`                   | forward a steering command           |
//! | `GET /api/events`                     | `status`, `measurement`, `heartbeat` |
//! | `GET /api/measurements/{id}/preview`  | 8-bit binary PGM of a mirrored frame |
//!
//! A single poller refreshes the snapshot every poll interval and derives
//! events by diffing consecutive snapshots, so every subscriber sees the same
//! sequence.

use std::collections::BTreeSet;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info};

use crate::client::Proxy;
use crate::datachannel::{read_last_report, validate_file_id, SyncReport};
use crate::instrument::{decode_measurement, Frame, InstrumentMetadata, ProbePosition, ScanStatus};
use crate::registry::{NameRecord, RegistryClient};
use crate::rpc::RpcError;
use crate::wire::{ErrorCode, ErrorInfo, Params};

pub const DEFAULT_PORT: u16 = 8080;
pub const RECENT_MEASUREMENTS: usize = 50;
pub const STEERING_METHODS: [&str; 3] = ["set_probe_position", "start_scan", "abort_scan"];

#[derive(Debug, Clone)]
pub struct BridgeConfig {
    pub registry: String,
    pub mirror: PathBuf,
    pub bind: String,
    pub port: u16,
    pub object: String,
    pub principal: String,
    pub poll_interval: Duration,
    pub heartbeat_interval: Duration,
}

impl BridgeConfig {
    pub fn new(registry: impl Into<String>, mirror: impl Into<PathBuf>) -> Self {
        BridgeConfig {
            registry: registry.into(),
            mirror: mirror.into(),
            bind: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            object: crate::control::DEFAULT_OBJECT_NAME.into(),
            principal: "console".into(),
            poll_interval: Duration::from_millis(500),
            heartbeat_interval: Duration::from_secs(15),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentView {
    pub status: ScanStatus,
    pub probe_position: ProbePosition,
    pub metadata: InstrumentMetadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementEntry {
    pub file_id: String,
    pub size_bytes: u64,
    pub modified_at: String,
    pub sidecar: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcosystemSnapshot {
    pub timestamp: String,
    pub instrument: Option<InstrumentView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instrument_error: Option<String>,
    pub registry: Vec<NameRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry_error: Option<String>,
    pub sync: Option<SyncReport>,
    /// Newest first.
    pub measurements: Vec<MeasurementEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BridgeEvent {
    Status { instrument: InstrumentView },
    Measurement { measurement: MeasurementEntry },
    Heartbeat { timestamp: String },
}

impl BridgeEvent {
    pub fn name(&self) -> &'static str {
        match self {
            BridgeEvent::Status { .. } => "status",
            BridgeEvent::Measurement { .. } => "measurement",
            BridgeEvent::Heartbeat { .. } => "heartbeat",
        }
    }
}

/// HTTP status for each control-channel error code.
pub fn http_status(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::InvalidParams | ErrorCode::OutOfRange => StatusCode::BAD_REQUEST,
        ErrorCode::Unauthenticated => StatusCode::UNAUTHORIZED,
        ErrorCode::PolicyDenied => StatusCode::FORBIDDEN,
        ErrorCode::NotFound => StatusCode::NOT_FOUND,
        ErrorCode::InstrumentBusy => StatusCode::CONFLICT,
        ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

/// Min-max normalizes a frame to 8 bits and encodes it as binary PGM.
/// A uniform frame maps to mid-gray 128.
pub fn frame_to_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5 {} {} 255\n", frame.width, frame.height).into_bytes();
    let min = frame.pixels.iter().copied().min().unwrap_or(0) as u32;
    let max = frame.pixels.iter().copied().max().unwrap_or(0) as u32;
    let span = max - min;
    out.extend(frame.pixels.iter().map(|&p| {
        if span == 0 {
            128
        } else {
            // round half up in integer arithmetic
            (((p as u32 - min) * 255 * 2 + span) / (2 * span)) as u8
        }
    }));
    out
}

struct Shared {
    config: BridgeConfig,
    registry: RegistryClient,
    snapshot: RwLock<Option<EcosystemSnapshot>>,
    events: broadcast::Sender<BridgeEvent>,
    poll_lock: tokio::sync::Mutex<Poller>,
    command_proxy: tokio::sync::Mutex<Proxy>,
    shutdown: CancellationToken,
}

struct Poller {
    proxy: Proxy,
    known_measurements: Option<BTreeSet<String>>,
}

impl Shared {
    async fn instrument_view(proxy: &mut Proxy) -> Result<InstrumentView, RpcError> {
        let status = proxy.invoke("scan_status", Params::new()).await?;
        let pos = proxy.invoke("get_probe_position", Params::new()).await?;
        let meta = proxy.invoke("metadata", Params::new()).await?;
        let bad = |e: serde_json::Error| {
            RpcError::Wire(crate::wire::WireError::MalformedFrame(format!(
                "unexpected reply: {e}"
            )))
        };
        Ok(InstrumentView {
            status: serde_json::from_value(status).map_err(bad)?,
            probe_position: serde_json::from_value(pos).map_err(bad)?,
            metadata: serde_json::from_value(meta).map_err(bad)?,
        })
    }

    /// Refreshes the cached snapshot and broadcasts what changed.
    async fn poll_once(&self) -> EcosystemSnapshot {
        let mut poller = self.poll_lock.lock().await;
        let (instrument, instrument_error) = match Self::instrument_view(&mut poller.proxy).await {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(format!("control channel: {e}"))),
        };
        let (registry, registry_error) = match self.registry.list("").await {
            Ok(r) => (r, None),
            Err(e) => (Vec::new(), Some(format!("registry: {e}"))),
        };
        let mirror = self.config.mirror.clone();
        let (sync, measurements) = tokio::task::spawn_blocking(move || {
            (read_last_report(&mirror), list_measurements(&mirror))
        })
        .await
        .unwrap_or_default();
        let snap = EcosystemSnapshot {
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            instrument,
            instrument_error,
            registry,
            registry_error,
            sync,
            measurements,
        };

        let prev = self.snapshot.read().unwrap().clone();
        if let (Some(view), Some(prev)) = (&snap.instrument, &prev) {
            let changed = prev
                .instrument
                .as_ref()
                .is_none_or(|p| p.status != view.status || p.probe_position != view.probe_position);
            if changed {
                let _ = self.events.send(BridgeEvent::Status {
                    instrument: view.clone(),
                });
            }
        }
        let current: BTreeSet<String> = snap
            .measurements
            .iter()
            .map(|m| m.file_id.clone())
            .collect();
        if let Some(known) = &poller.known_measurements {
            // oldest first so subscribers see arrival order
            for m in snap
                .measurements
                .iter()
                .rev()
                .filter(|m| !known.contains(&m.file_id))
            {
                let _ = self.events.send(BridgeEvent::Measurement {
                    measurement: m.clone(),
                });
            }
        }
        poller.known_measurements = Some(match poller.known_measurements.take() {
            Some(mut k) => {
                k.extend(current);
                k
            }
            None => current,
        });
        *self.snapshot.write().unwrap() = Some(snap.clone());
        snap
    }
}

fn list_measurements(mirror: &std::path::Path) -> Vec<MeasurementEntry> {
    let Ok(entries) = std::fs::read_dir(mirror) else {
        return Vec::new();
    };
    let mut found: Vec<(std::time::SystemTime, MeasurementEntry)> = entries
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            if name.starts_with('.') || !name.ends_with(".icem") {
                return None;
            }
            let meta = e.metadata().ok()?;
            if !meta.is_file() {
                return None;
            }
            let modified = meta.modified().ok()?;
            let sidecar = format!("{}.meta.json", name.trim_end_matches(".icem"));
            let sidecar = mirror.join(&sidecar).is_file().then_some(sidecar);
            let stamp: chrono::DateTime<chrono::Utc> = modified.into();
            Some((
                modified,
                MeasurementEntry {
                    file_id: name,
                    size_bytes: meta.len(),
                    modified_at: stamp.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                    sidecar,
                },
            ))
        })
        .collect();
    found.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| b.1.file_id.cmp(&a.1.file_id)));
    found
        .into_iter()
        .take(RECENT_MEASUREMENTS)
        .map(|(_, m)| m)
        .collect()
}

type AppState = Arc<Shared>;

fn error_body(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    (
        status,
        Json(json!({"error": {"code": code, "message": message.into()}})),
    )
        .into_response()
}

async fn get_status(State(state): State<AppState>) -> Response {
    let cached = state.snapshot.read().unwrap().clone();
    let snap = match cached {
        Some(s) => s,
        None => state.poll_once().await,
    };
    let status = if snap.instrument.is_some() {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (status, Json(snap)).into_response()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CommandBody {
    method: String,
    #[serde(default)]
    params: Params,
}

async fn post_command(State(state): State<AppState>, body: axum::body::Bytes) -> Response {
    let body: CommandBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => {
            return error_body(
                StatusCode::BAD_REQUEST,
                "InvalidParams",
                format!("bad command body: {e}"),
            )
        }
    };
    if !STEERING_METHODS.contains(&body.method.as_str()) {
        return error_body(
            StatusCode::BAD_REQUEST,
            "InvalidParams",
            format!("method {:?} is not a steering command", body.method),
        );
    }
    let result = state
        .command_proxy
        .lock()
        .await
        .invoke(&body.method, body.params)
        .await;
    match result {
        Ok(v) => {
            // refresh before answering so the next status read sees the change
            state.poll_once().await;
            (StatusCode::OK, Json(json!({ "result": v }))).into_response()
        }
        Err(RpcError::Remote(ErrorInfo { code, message })) => {
            error_body(http_status(code), code.as_str(), message)
        }
        Err(e) => error_body(StatusCode::BAD_GATEWAY, "ChannelFailure", e.to_string()),
    }
}

async fn events(
    State(state): State<AppState>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = state.events.subscribe();
    // open streams must end on shutdown or graceful shutdown never completes
    let stop = state.shutdown.clone().cancelled_owned();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let sse = Event::default()
                        .event(ev.name())
                        .json_data(&ev)
                        .expect("events serialize");
                    return Some((Ok(sse), rx));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    debug!("subscriber lagged by {n} events")
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
    .take_until(stop);
    Sse::new(stream).keep_alive(KeepAlive::default())
}

async fn preview(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    if validate_file_id(&id).is_err() {
        return error_body(
            StatusCode::NOT_FOUND,
            "NotFound",
            format!("no measurement {id:?}"),
        );
    }
    let path = state.config.mirror.join(&id);
    let bytes = match tokio::fs::read(&path).await {
        Ok(b) => b,
        Err(_) => {
            return error_body(
                StatusCode::NOT_FOUND,
                "NotFound",
                format!("no measurement {id:?}"),
            )
        }
    };
    match decode_measurement(&bytes) {
        Ok(frame) => (
            [(header::CONTENT_TYPE, "image/x-portable-graymap")],
            frame_to_pgm(&frame),
        )
            .into_response(),
        Err(e) => error_body(
            StatusCode::UNPROCESSABLE_ENTITY,
            "Unparseable",
            e.to_string(),
        ),
    }
}

fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/status", get(get_status))
        .route("/api/command", post(post_command))
        .route("/api/events", get(events))
        .route("/api/measurements/{id}/preview", get(preview))
        .layer(tower_http::cors::CorsLayer::permissive())
        .with_state(state)
}

/// A running bridge.
pub struct Bridge {
    local_addr: SocketAddr,
    shutdown: CancellationToken,
    tasks: Vec<tokio::task::JoinHandle<()>>,
    events: broadcast::Sender<BridgeEvent>,
}

impl Bridge {
    pub async fn start(config: BridgeConfig) -> std::io::Result<Bridge> {
        let registry = RegistryClient::new(config.registry.clone(), config.principal.clone());
        let call_timeout = Duration::from_secs(2);
        let proxy = Proxy::new(
            registry.clone(),
            config.object.clone(),
            config.principal.clone(),
        )
        .with_timeout(call_timeout);
        let (events, _) = broadcast::channel(1024);
        let shutdown = CancellationToken::new();
        let shared = Arc::new(Shared {
            registry,
            snapshot: RwLock::new(None),
            events: events.clone(),
            poll_lock: tokio::sync::Mutex::new(Poller {
                proxy: proxy.clone(),
                known_measurements: None,
            }),
            command_proxy: tokio::sync::Mutex::new(proxy),
            config: config.clone(),
            shutdown: shutdown.clone(),
        });
        let listener = tokio::net::TcpListener::bind((config.bind.as_str(), config.port)).await?;
        let local_addr = listener.local_addr()?;

        let poll_state = shared.clone();
        let poll_stop = shutdown.clone();
        let poller = tokio::spawn(async move {
            let mut ticker = tokio::time::interval(poll_state.config.poll_interval);
            ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            let mut heartbeat = tokio::time::interval(poll_state.config.heartbeat_interval);
            heartbeat.tick().await;
            loop {
                tokio::select! {
                    _ = poll_stop.cancelled() => return,
                    _ = ticker.tick() => { poll_state.poll_once().await; }
                    _ = heartbeat.tick() => {
                        let timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
                        let _ = poll_state.events.send(BridgeEvent::Heartbeat { timestamp });
                    }
                }
            }
        });

        let app = router(shared);
        let serve_stop = shutdown.clone();
        let server = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async move { serve_stop.cancelled().await })
                .await;
        });
        info!(%local_addr, "bridge listening");
        Ok(Bridge {
            local_addr,
            shutdown,
            tasks: vec![poller, server],
            events,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.local_addr)
    }

    /// In-process subscription to the same feed as `/api/events`.
    pub fn subscribe(&self) -> broadcast::Receiver<BridgeEvent> {
        self.events.subscribe()
    }

    pub fn shutdown_token(&self) -> CancellationToken {
        self.shutdown.clone()
    }

    pub async fn shutdown(self) {
        self.shutdown.cancel();
        for t in self.tasks {
            let _ = t.await;
        }
    }

    pub async fn stopped(self) {
        for t in self.tasks {
            let _ = t.await;
        }
    }
}
