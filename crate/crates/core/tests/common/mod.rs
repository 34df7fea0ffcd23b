//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::net::Ipv4Addr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ice_core::client::Proxy;
use ice_core::control::{
    read_audit_file, AuditStatus, ControlConfig, ControlNode, DEFAULT_OBJECT_NAME,
};
use ice_core::datachannel::serve_store;
use ice_core::instrument::{Microscope, ProbePosition, SimulatorConfig};
use ice_core::policy::{Decision, Policy};
use ice_core::registry::{serve_registry, Registry, RegistryClient};
use ice_core::rpc::Server;
use ice_core::wire::{ErrorCode, ErrorInfo, Message, Params, Request, Response};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Number, Value};

// ---------------------------------------------------------------------------
// random wire messages

const TEXT_POOL: &[char] = &[
    'a', 'b', 'z', 'A', 'Q', '0', '9', '.', '_', '-', ' ', '"', '\\', '/', '\n', '\t', '\u{1}',
    '\u{7f}', 'é', 'ß', '€', '✓', '𝄞', '中',
];

fn text(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| TEXT_POOL[rng.random_range(0..TEXT_POOL.len())])
        .collect()
}

fn finite_f64(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v = match rng.random_range(0..3) {
            0 => f64::from_bits(rng.random()),
            1 => rng.random_range(-1.0e6..1.0e6),
            _ => rng.random_range(0..1000) as f64 / 8.0,
        };
        if v.is_finite() {
            return v;
        }
    }
}

fn scalar(rng: &mut ChaCha8Rng, class: u8) -> Value {
    match class {
        0 => Value::Null,
        1 => Value::Bool(rng.random()),
        2 if rng.random_bool(0.5) => Value::Number(rng.random::<i64>().into()),
        2 => Value::Number(Number::from_f64(finite_f64(rng)).unwrap()),
        _ => Value::String(text(rng, 0, 12)),
    }
}

/// A value inside the parameter domain: homogeneous lists, i64 integers.
pub fn param_value(rng: &mut ChaCha8Rng, depth: u32) -> Value {
    let pick = rng.random_range(0..if depth == 0 { 4 } else { 6 });
    match pick {
        0..=3 => scalar(rng, pick as u8),
        4 => {
            let class = rng.random_range(0..4u8);
            Value::Array(
                (0..rng.random_range(0..5))
                    .map(|_| scalar(rng, class))
                    .collect(),
            )
        }
        _ => {
            let mut m = Map::new();
            for _ in 0..rng.random_range(0..4) {
                m.insert(text(rng, 0, 8), param_value(rng, depth - 1));
            }
            Value::Object(m)
        }
    }
}

pub fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let id = text(rng, 1, 64);
    let principal = text(rng, 0, 16);
    if rng.random_bool(0.5) {
        let mut params = Params::new();
        for _ in 0..rng.random_range(0..6) {
            params.insert(text(rng, 0, 10), param_value(rng, 2));
        }
        Message::Request(Request {
            id,
            object: text(rng, 1, 20),
            method: text(rng, 1, 20),
            params,
            principal,
        })
    } else {
        let outcome = if rng.random_bool(0.6) {
            Ok(param_value(rng, 3))
        } else {
            let code = ErrorCode::ALL[rng.random_range(0..ErrorCode::ALL.len())];
            Err(ErrorInfo::new(code, text(rng, 1, 40)))
        };
        Message::Response(Response {
            id,
            principal,
            outcome,
        })
    }
}

pub fn message_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// reference policy evaluator, written against the rule text only

fn bits(addr: Ipv4Addr) -> String {
    addr.octets().iter().map(|o| format!("{o:08b}")).collect()
}

/// Whether `addr` falls in `block` (`a.b.c.d`, `a.b.c.d/n` or `*`), by
/// comparing the leading bit strings.
pub fn reference_in_block(block: &str, addr: Ipv4Addr) -> bool {
    if block == "*" {
        return true;
    }
    let (net, len) = match block.split_once('/') {
        Some((n, l)) => (n, l.parse::<usize>().unwrap()),
        None => (block, 32),
    };
    let net: Ipv4Addr = net.parse().unwrap();
    bits(net)[..len] == bits(addr)[..len]
}

/// First matching line of `rules` decides; no match denies.
pub fn reference_decision(
    rules: &str,
    principal: &str,
    source: Ipv4Addr,
    channel: &str,
) -> Decision {
    for line in rules.lines() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if (f[1] == "*" || f[1] == principal) && reference_in_block(f[2], source) && f[3] == channel
        {
            return if f[0] == "allow" {
                Decision::Allow
            } else {
                Decision::Deny
            };
        }
    }
    Decision::Deny
}

/// The three-rule set and the 2 × 4 × 3 context grid checked exhaustively.
pub const GRID_RULES: &str = "\
deny  mallory *              control
allow *       10.1.0.0/16    control
allow ops     192.168.7.0/24 data
";
pub const GRID_PRINCIPALS: [&str; 2] = ["ops", "mallory"];
pub const GRID_SOURCES: [Ipv4Addr; 4] = [
    Ipv4Addr::new(10, 1, 2, 3),
    Ipv4Addr::new(10, 2, 0, 1),
    Ipv4Addr::new(192, 168, 7, 200),
    Ipv4Addr::new(127, 0, 0, 1),
];

// ---------------------------------------------------------------------------
// a local ecosystem: registry, control node with simulator, store server

pub const PRINCIPAL: &str = "ops";

pub struct Ecosystem {
    pub dir: tempfile::TempDir,
    pub registry: Server,
    pub control: ControlNode,
    pub store: Server,
}

impl Ecosystem {
    pub async fn start(time_scale: f64) -> Ecosystem {
        Self::start_with(time_scale, None).await
    }

    /// `rules` is policy text applied to every daemon; `None` runs them open.
    pub async fn start_with(time_scale: f64, rules: Option<&str>) -> Ecosystem {
        let dir = tempfile::tempdir().unwrap();
        let rules_path = rules.map(|text| {
            let path = dir.path().join("policy.rules");
            std::fs::write(&path, text).unwrap();
            path
        });
        let policy = match &rules_path {
            Some(p) => Policy::from_file(p).unwrap(),
            None => Policy::open(),
        };
        std::fs::create_dir_all(dir.path().join("store")).unwrap();
        std::fs::create_dir_all(dir.path().join("mirror")).unwrap();
        let registry = serve_registry(Arc::new(Registry::new()), "127.0.0.1:0", policy.clone())
            .await
            .unwrap();
        let config = ControlConfig {
            port: 0,
            registry: Some(registry.endpoint()),
            store: dir.path().join("store"),
            time_scale,
            audit: Some(dir.path().join("audit.ndjson")),
            principal: PRINCIPAL.into(),
            policy: rules_path,
            ..ControlConfig::default()
        };
        let control = ControlNode::start(&config).await.unwrap();
        let store = serve_store(dir.path().join("store"), "127.0.0.1:0", policy)
            .await
            .unwrap();
        Ecosystem {
            dir,
            registry,
            control,
            store,
        }
    }

    pub fn registry_endpoint(&self) -> String {
        self.registry.endpoint()
    }

    pub fn registry_client(&self) -> RegistryClient {
        RegistryClient::new(self.registry.endpoint(), PRINCIPAL)
    }

    pub fn store_endpoint(&self) -> String {
        self.store.endpoint()
    }

    pub fn store_dir(&self) -> PathBuf {
        self.dir.path().join("store")
    }

    pub fn mirror_dir(&self) -> PathBuf {
        self.dir.path().join("mirror")
    }

    pub fn audit_path(&self) -> PathBuf {
        self.dir.path().join("audit.ndjson")
    }

    pub async fn shutdown(self) {
        self.control.shutdown().await;
        self.store.shutdown().await;
        self.registry.shutdown().await;
    }
}

/// Polls `check` every 10 ms until it returns true or `limit` passes.
pub async fn wait_for(limit: Duration, mut check: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    while start.elapsed() < limit {
        if check() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    check()
}

// ---------------------------------------------------------------------------
// concurrent steering clients with audit replay

pub struct ConcurrencyOutcome {
    pub responses: usize,
    pub failures: Vec<String>,
    pub final_position: ProbePosition,
    pub replayed_position: ProbePosition,
    pub replayed_calls: usize,
}

/// `clients` proxies each send `per_client` requests, alternating
/// set_probe_position and scan_status. The audit file is then replayed on a
/// fresh simulator.
pub async fn run_concurrent_clients(
    eco: &Ecosystem,
    clients: usize,
    per_client: usize,
) -> ConcurrencyOutcome {
    let mut tasks = tokio::task::JoinSet::new();
    for c in 0..clients {
        let registry = eco.registry_client();
        tasks.spawn(async move {
            let mut proxy = Proxy::new(registry, DEFAULT_OBJECT_NAME, format!("client-{c}"));
            let mut failures = Vec::new();
            for i in 0..per_client {
                let result = if i % 2 == 0 {
                    let n = (c * per_client + i) as f64;
                    let params =
                        serde_json::json!({"x": (n % 97.0) / 96.0, "y": (n % 89.0) / 88.0});
                    proxy
                        .invoke("set_probe_position", params.as_object().unwrap().clone())
                        .await
                } else {
                    proxy.invoke("scan_status", Params::new()).await
                };
                if let Err(e) = result {
                    failures.push(format!("client {c} request {i}: {e}"));
                }
            }
            (per_client, failures)
        });
    }
    let mut responses = 0;
    let mut failures = Vec::new();
    while let Some(joined) = tasks.join_next().await {
        let (n, f) = joined.unwrap();
        responses += n - f.len();
        failures.extend(f);
    }

    let final_position = eco.control.microscope().probe_position();
    let replay_dir = tempfile::tempdir().unwrap();
    let replica = Microscope::new(SimulatorConfig::new(replay_dir.path()).time_scale(0.0)).unwrap();
    let mut entries = read_audit_file(eco.audit_path()).unwrap();
    entries.sort_by_key(|e| e.sequence_no);
    let mut replayed_calls = 0;
    for e in entries
        .iter()
        .filter(|e| e.method == "set_probe_position" && e.status == AuditStatus::Ok)
    {
        replica
            .set_probe_position(ProbePosition::from_params(&e.params).unwrap())
            .unwrap();
        replayed_calls += 1;
    }
    ConcurrencyOutcome {
        responses,
        failures,
        final_position,
        replayed_position: replica.probe_position(),
        replayed_calls,
    }
}

// ---------------------------------------------------------------------------
// the steering demo

/// check status, move the probe, scan 64×64, wait for Idle, sync, then
/// assert that the measurement and its sidecar are mirrored.
pub fn demo_workflow(
    store_endpoint: &str,
    mirror: &std::path::Path,
) -> ice_core::workflow::Workflow {
    let mirror = mirror.display().to_string();
    let doc = serde_json::json!({
        "name": "steering demo",
        "steps": [
            {"kind": "invoke", "object": DEFAULT_OBJECT_NAME, "method": "scan_status"},
            {"kind": "assert", "expect": {"state": "Idle"}},
            {"kind": "invoke", "object": DEFAULT_OBJECT_NAME, "method": "set_probe_position",
             "params": {"x": 0.3, "y": 0.7}},
            {"kind": "invoke", "object": DEFAULT_OBJECT_NAME, "method": "start_scan",
             "params": {"width": 64, "height": 64, "dwell_time_us": 100, "seed": 42}, "save_as": "scan"},
            {"kind": "wait_until", "object": DEFAULT_OBJECT_NAME, "method": "scan_status",
             "expect": {"state": "Idle"}, "poll_ms": 20, "deadline_ms": 30000},
            {"kind": "sync", "source": store_endpoint, "dest": mirror},
            {"kind": "assert", "dest": format!("{mirror}/${{scan.scan_id}}.icem")},
            {"kind": "assert", "dest": format!("{mirror}/${{scan.scan_id}}.meta.json")}
        ]
    });
    ice_core::workflow::Workflow::from_json(&doc.to_string()).unwrap()
}

// ---------------------------------------------------------------------------
// bridge helpers

pub async fn start_bridge(
    eco: &Ecosystem,
    poll: Duration,
    heartbeat: Duration,
) -> ice_core::bridge::Bridge {
    let mut config = ice_core::bridge::BridgeConfig::new(eco.registry_endpoint(), eco.mirror_dir());
    config.port = 0;
    config.poll_interval = poll;
    config.heartbeat_interval = heartbeat;
    ice_core::bridge::Bridge::start(config).await.unwrap()
}

/// Minimal reader for a `text/event-stream` response.
pub struct SseStream {
    resp: reqwest::Response,
    buf: String,
}

impl SseStream {
    pub async fn connect(base: &str) -> SseStream {
        let resp = reqwest::get(format!("{base}/api/events")).await.unwrap();
        assert_eq!(resp.status(), 200);
        let kind = resp.headers()["content-type"].to_str().unwrap().to_owned();
        assert!(kind.starts_with("text/event-stream"), "{kind}");
        SseStream {
            resp,
            buf: String::new(),
        }
    }

    /// Next named event with its JSON data, or `None` once `limit` passes.
    pub async fn next_event(&mut self, limit: Duration) -> Option<(String, Value)> {
        let deadline = tokio::time::Instant::now() + limit;
        loop {
            while let Some(end) = self.buf.find("\n\n") {
                let block: String = self.buf.drain(..end + 2).collect();
                let mut name = None;
                let mut data = String::new();
                for line in block.lines() {
                    if let Some(v) = line.strip_prefix("event:") {
                        name = Some(v.trim().to_owned());
                    } else if let Some(v) = line.strip_prefix("data:") {
                        data.push_str(v.trim_start());
                    }
                }
                if let Some(name) = name {
                    return Some((name, serde_json::from_str(&data).unwrap()));
                }
            }
            match tokio::time::timeout_at(deadline, self.resp.chunk()).await {
                Ok(Ok(Some(bytes))) => self.buf.push_str(&String::from_utf8_lossy(&bytes)),
                _ => return None,
            }
        }
    }

    /// Collects events until `limit` passes.
    pub async fn collect_for(&mut self, limit: Duration) -> Vec<(String, Value)> {
        let deadline = tokio::time::Instant::now() + limit;
        let mut out = Vec::new();
        loop {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            match self.next_event(left).await {
                Some(ev) => out.push(ev),
                None => return out,
            }
        }
    }
}
