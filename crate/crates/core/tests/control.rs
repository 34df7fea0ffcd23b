mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{wait_for, Ecosystem, PRINCIPAL};
use ice_core::client::Proxy;
use ice_core::control::{
    AuditLog, AuditStatus, ControlConfig, ControlNode, ControlServer, StartError,
    DEFAULT_OBJECT_NAME,
};
use ice_core::instrument::Adapter;
use ice_core::policy::{Channel, Policy};
use ice_core::rpc::{RpcError, Server};
use ice_core::wire::{ErrorCode, Params};
use serde_json::{json, Value};

fn params(v: Value) -> Params {
    v.as_object().unwrap().clone()
}

/// An object whose `slow` method sleeps for `delay` and flags when it starts.
fn slow_adapter(delay: Duration, started: Arc<AtomicBool>) -> Adapter {
    Adapter::new()
        .method("slow", move |_: &Params| {
            started.store(true, Ordering::SeqCst);
            std::thread::sleep(delay);
            Ok(json!("done"))
        })
        .method("explode", |_: &Params| panic!("adapter fault"))
}

async fn slow_server(delay: Duration) -> (Arc<ControlServer>, Server, Arc<AtomicBool>) {
    let started = Arc::new(AtomicBool::new(false));
    let control = Arc::new(ControlServer::new(Policy::open(), AuditLog::in_memory()));
    control
        .expose("lab.slow", slow_adapter(delay, started.clone()), ["slow"])
        .unwrap();
    let server = Server::bind(
        "127.0.0.1:0",
        control.clone(),
        Policy::open(),
        Channel::Control,
    )
    .await
    .unwrap();
    (control, server, started)
}

#[tokio::test]
async fn exposed_object_is_reachable_through_the_registry() {
    let eco = Ecosystem::start(0.0).await;
    let names: Vec<_> = eco
        .registry_client()
        .list("")
        .await
        .unwrap()
        .into_iter()
        .map(|r| r.name)
        .collect();
    assert_eq!(names, [DEFAULT_OBJECT_NAME]);

    let mut proxy = Proxy::new(eco.registry_client(), DEFAULT_OBJECT_NAME, PRINCIPAL);
    let status = proxy.invoke("scan_status", Params::new()).await.unwrap();
    assert_eq!(
        status,
        json!({"state": "Idle", "scan_id": null, "progress": 0.0, "frames_completed": 0})
    );

    proxy
        .invoke("set_probe_position", params(json!({"x": 0.3, "y": 0.7})))
        .await
        .unwrap();
    let pos = proxy
        .invoke("get_probe_position", Params::new())
        .await
        .unwrap();
    assert_eq!(pos, json!({"x": 0.3, "y": 0.7}));

    let err = proxy
        .invoke("no_such_method", Params::new())
        .await
        .unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::NotFound));
    let mut missing = Proxy::direct(eco.control.endpoint(), "u300.microscope", PRINCIPAL);
    let err = missing
        .invoke("scan_status", Params::new())
        .await
        .unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::NotFound));

    let err = eco
        .control
        .control()
        .expose(DEFAULT_OBJECT_NAME, Adapter::new(), [])
        .unwrap_err();
    assert_eq!(err.code, ErrorCode::InvalidParams);
    eco.shutdown().await;
}

#[tokio::test]
async fn occupied_port_fails_startup_cleanly() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = ControlConfig {
        port: taken.local_addr().unwrap().port(),
        store: dir.path().join("store"),
        time_scale: 0.0,
        ..ControlConfig::default()
    };
    match ControlNode::start(&config).await {
        Err(StartError::Bind { .. }) => {}
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("second listener on an occupied port"),
    }
}

#[tokio::test]
async fn unreachable_registry_fails_startup() {
    let dir = tempfile::tempdir().unwrap();
    let free = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap();
    let config = ControlConfig {
        port: 0,
        registry: Some(free.to_string()),
        store: dir.path().join("store"),
        ..ControlConfig::default()
    };
    assert!(matches!(
        ControlNode::start(&config).await,
        Err(StartError::Registry(_))
    ));
}

#[tokio::test]
async fn shutdown_finishes_in_flight_request_and_refuses_new_ones() {
    let (_control, server, started) = slow_server(Duration::from_millis(400)).await;
    let endpoint = server.endpoint();
    let mut proxy = Proxy::direct(&endpoint, "lab.slow", "ops");
    let call = tokio::spawn(async move { proxy.invoke("slow", Params::new()).await });
    assert!(wait_for(Duration::from_secs(5), || started.load(Ordering::SeqCst)).await);

    let token = server.shutdown_token();
    let stopping = tokio::spawn(server.shutdown());
    token.cancelled().await;
    tokio::time::sleep(Duration::from_millis(50)).await;

    let mut late = Proxy::direct(&endpoint, "lab.slow", "ops");
    let refused = late.invoke("slow", Params::new()).await.unwrap_err();
    assert!(
        matches!(refused, RpcError::Connect { .. } | RpcError::Closed),
        "{refused}"
    );

    assert_eq!(call.await.unwrap().unwrap(), json!("done"));
    stopping.await.unwrap();
}

#[tokio::test]
async fn client_timeout_does_not_cancel_the_server_side_call() {
    let (control, server, _) = slow_server(Duration::from_millis(200)).await;
    let mut proxy =
        Proxy::direct(server.endpoint(), "lab.slow", "ops").with_timeout(Duration::from_millis(1));
    let err = proxy.invoke("slow", Params::new()).await.unwrap_err();
    assert!(matches!(err, RpcError::Timeout(_)), "{err}");

    let audited = wait_for(Duration::from_secs(5), || {
        control
            .audit()
            .entries()
            .iter()
            .any(|e| e.method == "slow" && e.status == AuditStatus::Ok)
    })
    .await;
    assert!(audited, "slow call never reached the audit log");
    server.shutdown().await;
}

#[tokio::test]
async fn adapter_panic_becomes_internal_error() {
    let (control, server, _) = slow_server(Duration::ZERO).await;
    let mut proxy = Proxy::direct(server.endpoint(), "lab.slow", "ops");
    let err = proxy.invoke("explode", Params::new()).await.unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::Internal));
    assert!(err.to_string().contains("adapter fault"), "{err}");
    // the server keeps serving
    assert_eq!(
        proxy.invoke("slow", Params::new()).await.unwrap(),
        json!("done")
    );
    assert_eq!(control.audit().entries().len(), 2);
    server.shutdown().await;
}

#[tokio::test]
async fn denied_principal_is_refused_and_audited() {
    let eco = Ecosystem::start_with(0.0, Some("allow ops 127.0.0.0/8 control\nallow ops 127.0.0.0/8 registry\nallow intruder 127.0.0.0/8 registry\n")).await;
    let mut intruder = Proxy::new(
        ice_core::registry::RegistryClient::new(eco.registry_endpoint(), "intruder"),
        DEFAULT_OBJECT_NAME,
        "intruder",
    );
    let err = intruder
        .invoke("set_probe_position", params(json!({"x": 0.9, "y": 0.9})))
        .await
        .unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::PolicyDenied));
    assert_eq!(
        eco.control.microscope().probe_position(),
        ice_core::instrument::ProbePosition::CENTER
    );

    let entries = eco.control.control().audit().entries();
    let last = entries.last().unwrap();
    assert_eq!(
        (last.principal.as_str(), last.error_code),
        ("intruder", Some(ErrorCode::PolicyDenied))
    );
    eco.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_clients_replay_to_the_final_position() {
    let eco = Ecosystem::start(0.0).await;
    let started = Instant::now();
    let outcome = common::run_concurrent_clients(&eco, 8, 100).await;
    assert!(outcome.failures.is_empty(), "{:?}", outcome.failures);
    assert_eq!(outcome.responses, 800);
    assert_eq!(outcome.replayed_calls, 400);
    assert_eq!(outcome.final_position, outcome.replayed_position);
    assert!(started.elapsed() < Duration::from_secs(30));

    let entries = ice_core::control::read_audit_file(eco.audit_path()).unwrap();
    assert_eq!(entries.len(), 800);
    let seqs: Vec<u64> = entries.iter().map(|e| e.sequence_no).collect();
    assert_eq!(seqs, (0..800).collect::<Vec<_>>());
    eco.shutdown().await;
}
