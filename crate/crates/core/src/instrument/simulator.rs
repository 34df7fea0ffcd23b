use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use super::{
    encode_measurement, generate_frame, Adapter, InstrumentMetadata, ProbePosition, ScanParameters,
    ScanState, ScanStatus,
};
use crate::wire::{ErrorInfo, Params};

/// Methods of the simulator that change instrument state.
pub const MUTATING_METHODS: [&str; 3] = ["set_probe_position", "start_scan", "abort_scan"];

/// Scratch directory inside the store for files not yet published.
const STAGING_DIR: &str = ".ice-staging";

#[derive(Debug, Clone)]
pub struct SimulatorConfig {
    pub store_dir: PathBuf,
    /// Multiplies the nominal scan time; 0 completes scans inside `start_scan`.
    pub time_scale: f64,
    pub metadata: InstrumentMetadata,
}

impl SimulatorConfig {
    pub fn new(store_dir: impl Into<PathBuf>) -> Self {
        SimulatorConfig {
            store_dir: store_dir.into(),
            time_scale: 1.0,
            metadata: InstrumentMetadata::default(),
        }
    }

    pub fn time_scale(mut self, time_scale: f64) -> Self {
        self.time_scale = time_scale;
        self
    }
}

#[derive(Debug, Clone)]
struct ActiveScan {
    id: String,
    params: ScanParameters,
    position: ProbePosition,
    started: Instant,
    duration: Duration,
}

impl ActiveScan {
    fn progress(&self) -> f64 {
        let total = self.params.pixel_count();
        let frac = if self.duration.is_zero() {
            1.0
        } else {
            self.started.elapsed().as_secs_f64() / self.duration.as_secs_f64()
        };
        // The last pixel completes only when the file is published.
        let done = ((frac * total as f64).floor() as u64).min(total - 1);
        done as f64 / total as f64
    }
}

#[derive(Debug)]
struct SimState {
    position: ProbePosition,
    frames_completed: u64,
    active: Option<ActiveScan>,
}

#[derive(Debug)]
struct Shared {
    config: SimulatorConfig,
    state: Mutex<SimState>,
    wake: Condvar,
}

/// Deterministic simulated STEM microscope. Cloning shares the instrument.
#[derive(Debug, Clone)]
pub struct Microscope {
    shared: Arc<Shared>,
}

impl Microscope {
    pub fn new(config: SimulatorConfig) -> std::io::Result<Self> {
        if !(config.time_scale.is_finite() && config.time_scale >= 0.0) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "time scale must be finite and non-negative",
            ));
        }
        std::fs::create_dir_all(config.store_dir.join(STAGING_DIR))?;
        Ok(Microscope {
            shared: Arc::new(Shared {
                config,
                state: Mutex::new(SimState {
                    position: ProbePosition::CENTER,
                    frames_completed: 0,
                    active: None,
                }),
                wake: Condvar::new(),
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, SimState> {
        self.shared.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn store_dir(&self) -> &Path {
        &self.shared.config.store_dir
    }

    pub fn scan_status(&self) -> ScanStatus {
        let st = self.lock();
        match &st.active {
            None => ScanStatus::idle(st.frames_completed),
            Some(scan) => ScanStatus {
                state: ScanState::Scanning,
                scan_id: Some(scan.id.clone()),
                progress: scan.progress(),
                frames_completed: st.frames_completed,
            },
        }
    }

    pub fn probe_position(&self) -> ProbePosition {
        self.lock().position
    }

    pub fn set_probe_position(&self, pos: ProbePosition) -> Result<(), ErrorInfo> {
        let pos = ProbePosition::new(pos.x, pos.y)?;
        let mut st = self.lock();
        if let Some(scan) = &st.active {
            return Err(ErrorInfo::busy(format!("scan {} is running", scan.id)));
        }
        st.position = pos;
        Ok(())
    }

    pub fn metadata(&self) -> &InstrumentMetadata {
        &self.shared.config.metadata
    }

    pub fn start_scan(&self, params: ScanParameters) -> Result<String, ErrorInfo> {
        params.validate()?;
        let mut st = self.lock();
        if let Some(scan) = &st.active {
            return Err(ErrorInfo::busy(format!("scan {} is running", scan.id)));
        }
        let id = new_scan_id();
        let nominal = Duration::from_micros(params.total_time_us());
        let duration = nominal.mul_f64(self.shared.config.time_scale);
        let scan = ActiveScan {
            id: id.clone(),
            params,
            position: st.position,
            started: Instant::now(),
            duration,
        };
        if duration.is_zero() {
            // Instant mode: acquire and publish before returning.
            let staged = self
                .stage(&scan)
                .map_err(|e| ErrorInfo::internal(e.to_string()))?;
            staged
                .publish()
                .map_err(|e| ErrorInfo::internal(e.to_string()))?;
            st.frames_completed += 1;
            info!(scan_id = %id, "scan complete");
            return Ok(id);
        }
        st.active = Some(scan);
        drop(st);
        let this = self.clone();
        let worker_id = id.clone();
        std::thread::Builder::new()
            .name(format!("scan-{id}"))
            .spawn(move || this.run_scan(&worker_id))
            .map_err(|e| ErrorInfo::internal(format!("cannot start acquisition: {e}")))?;
        Ok(id)
    }

    /// Aborts `scan_id` if it is the running scan; otherwise does nothing.
    pub fn abort_scan(&self, scan_id: &str) -> bool {
        let mut st = self.lock();
        let hit = st.active.as_ref().is_some_and(|s| s.id == scan_id);
        if hit {
            st.active = None;
            self.shared.wake.notify_all();
            info!(%scan_id, "scan aborted");
        }
        hit
    }

    fn run_scan(&self, id: &str) {
        let mut st = self.lock();
        let scan = loop {
            let Some(scan) = st.active.as_ref().filter(|s| s.id == id) else {
                return;
            };
            let deadline = scan.started + scan.duration;
            let now = Instant::now();
            if now >= deadline {
                break scan.clone();
            }
            st = self
                .shared
                .wake
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        };
        drop(st);

        let staged = self.stage(&scan);
        let mut st = self.lock();
        let still_active = st.active.as_ref().is_some_and(|s| s.id == id);
        match staged {
            Ok(staged) if still_active => {
                match staged.publish() {
                    Ok(()) => {
                        st.frames_completed += 1;
                        info!(scan_id = %id, "scan complete");
                    }
                    Err(e) => warn!(scan_id = %id, "publishing measurement failed: {e}"),
                }
                st.active = None;
            }
            Ok(staged) => staged.discard(),
            Err(e) => {
                warn!(scan_id = %id, "writing measurement failed: {e}");
                if still_active {
                    st.active = None;
                }
            }
        }
    }

    /// Writes the frame and sidecar into the staging directory.
    fn stage(&self, scan: &ActiveScan) -> std::io::Result<Staged> {
        let frame = generate_frame(&scan.params, scan.position)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.message))?;
        let bytes = encode_measurement(&frame);
        let digest = hex::encode(Sha256::digest(&bytes));
        let sidecar = json!({
            "scan_id": scan.id,
            "params": scan.params,
            "probe_position": scan.position,
            "instrument": self.shared.config.metadata,
            "timestamp": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            "sha256": digest,
        });
        let store = &self.shared.config.store_dir;
        let staging = store.join(STAGING_DIR);
        let data_name = format!("{}.icem", scan.id);
        let meta_name = format!("{}.meta.json", scan.id);
        std::fs::write(staging.join(&data_name), &bytes)?;
        std::fs::write(
            staging.join(&meta_name),
            serde_json::to_vec_pretty(&sidecar)?,
        )?;
        Ok(Staged {
            moves: vec![
                (staging.join(&meta_name), store.join(&meta_name)),
                (staging.join(&data_name), store.join(&data_name)),
            ],
        })
    }

    /// The simulator's method table.
    pub fn adapter(&self) -> Adapter {
        let m = self.clone();
        let status = move |_: &Params| Ok(serde_json::to_value(m.scan_status()).unwrap());
        let m = self.clone();
        let get_pos = move |_: &Params| Ok(serde_json::to_value(m.probe_position()).unwrap());
        let m = self.clone();
        let set_pos = move |p: &Params| {
            let pos = ProbePosition::from_params(p)?;
            m.set_probe_position(pos)?;
            Ok(serde_json::to_value(pos).unwrap())
        };
        let m = self.clone();
        let start = move |p: &Params| {
            let params = ScanParameters::from_params(p)?;
            let id = m.start_scan(params)?;
            Ok(json!({ "scan_id": id }))
        };
        let m = self.clone();
        let abort = move |p: &Params| {
            let id = p
                .get("scan_id")
                .and_then(Value::as_str)
                .ok_or_else(|| ErrorInfo::invalid_params("missing string parameter \"scan_id\""))?;
            Ok(json!({ "aborted": m.abort_scan(id) }))
        };
        let m = self.clone();
        let metadata = move |_: &Params| Ok(serde_json::to_value(m.metadata()).unwrap());
        Adapter::new()
            .method("scan_status", status)
            .method("get_probe_position", get_pos)
            .method("set_probe_position", set_pos)
            .method("start_scan", start)
            .method("abort_scan", abort)
            .method("metadata", metadata)
    }
}

struct Staged {
    // sidecar first, so a published measurement always has its sidecar
    moves: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    fn publish(self) -> std::io::Result<()> {
        for (from, to) in &self.moves {
            std::fs::rename(from, to)?;
        }
        Ok(())
    }

    fn discard(self) {
        for (from, _) in &self.moves {
            let _ = std::fs::remove_file(from);
        }
    }
}

fn new_scan_id() -> String {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%3f");
    let tag = uuid::Uuid::new_v4().simple().to_string();
    format!("scan-{stamp}-{}", &tag[..8])
}
