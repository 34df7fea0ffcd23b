use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::io::AsyncWriteExt;
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};

use super::manifest::{sha256_file, validate_file_id, Manifest, MeasurementRecord};
use super::store::{ChunkReply, STORE_OBJECT};
use crate::rpc::{Connection, RpcError};
use crate::wire::{ErrorCode, Params, Request};

/// Name of the last-sync summary written into the mirror. Dot-prefixed, so
/// it never appears in a manifest.
pub const REPORT_FILE: &str = ".ice-sync-report.json";

/// Attempts per file before recording a mismatch (first try plus two retries).
const ATTEMPTS: usize = 3;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub files_examined: u64,
    pub files_transferred: u64,
    pub bytes_transferred: u64,
    pub files_verified: u64,
    pub mismatches: Vec<String>,
    pub generation: u64,
    pub finished_at: String,
}

#[derive(Debug, thiserror::Error)]
pub enum SyncError {
    #[error("refused by the store: {0}")]
    PolicyDenied(String),
    #[error(transparent)]
    Channel(RpcError),
    #[error("store protocol error: {0}")]
    Protocol(String),
    #[error("mirror directory: {0}")]
    Io(#[from] std::io::Error),
}

struct StoreLink {
    conn: Connection,
    principal: String,
    timeout: Duration,
}

impl StoreLink {
    async fn call(&mut self, method: &str, params: Params) -> Result<serde_json::Value, SyncError> {
        let req = Request::new(STORE_OBJECT, method, params, self.principal.clone());
        let fut = self.conn.invoke(&req);
        match tokio::time::timeout(self.timeout, fut).await {
            Err(_) => Err(SyncError::Channel(RpcError::Timeout(self.timeout))),
            Ok(Err(RpcError::Remote(e))) if e.code == ErrorCode::PolicyDenied => {
                Err(SyncError::PolicyDenied(e.message))
            }
            Ok(Err(e)) => Err(SyncError::Channel(e)),
            Ok(Ok(v)) => Ok(v),
        }
    }
}

/// Pull-based mirror of a remote store.
#[derive(Debug, Clone)]
pub struct SyncClient {
    remote: String,
    mirror: PathBuf,
    principal: String,
    timeout: Duration,
}

impl SyncClient {
    pub fn new(
        remote: impl Into<String>,
        mirror: impl Into<PathBuf>,
        principal: impl Into<String>,
    ) -> Self {
        SyncClient {
            remote: remote.into(),
            mirror: mirror.into(),
            principal: principal.into(),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn mirror(&self) -> &Path {
        &self.mirror
    }

    async fn link(&self) -> Result<StoreLink, SyncError> {
        let conn = Connection::connect(&self.remote)
            .await
            .map_err(SyncError::Channel)?;
        Ok(StoreLink {
            conn,
            principal: self.principal.clone(),
            timeout: self.timeout,
        })
    }

    /// Brings the mirror up to date with the store's current manifest.
    pub async fn sync_once(&self) -> Result<SyncReport, SyncError> {
        tokio::fs::create_dir_all(&self.mirror).await?;
        let mut link = self.link().await?;
        let manifest = match link.call("manifest", Params::new()).await {
            // the store drops connections it will not serve before answering
            Err(SyncError::Channel(RpcError::Closed)) => {
                return Err(SyncError::PolicyDenied(
                    "connection closed by the store".into(),
                ))
            }
            other => other?,
        };
        let manifest: Manifest = serde_json::from_value(manifest)
            .map_err(|e| SyncError::Protocol(format!("bad manifest: {e}")))?;

        let mut report = SyncReport {
            generation: manifest.generation,
            ..Default::default()
        };
        for record in &manifest.records {
            report.files_examined += 1;
            if validate_file_id(&record.file_id).is_err() {
                report.mismatches.push(record.file_id.clone());
                continue;
            }
            let local = self.mirror.join(&record.file_id);
            if local_digest(&local).await?.as_deref() == Some(record.sha256.as_str()) {
                report.files_verified += 1;
                continue;
            }
            let mut done = false;
            for attempt in 1..=ATTEMPTS {
                match fetch(&mut link, record, &local).await {
                    Ok(Fetched { bytes, verified }) => {
                        report.bytes_transferred += bytes;
                        if verified {
                            done = true;
                            break;
                        }
                        warn!(file_id = %record.file_id, attempt, "digest mismatch");
                    }
                    Err(e @ (SyncError::PolicyDenied(_) | SyncError::Io(_))) => return Err(e),
                    Err(SyncError::Channel(e)) if !matches!(e, RpcError::Remote(_)) => {
                        return Err(SyncError::Channel(e))
                    }
                    Err(e) => warn!(file_id = %record.file_id, attempt, "chunk fetch failed: {e}"),
                }
            }
            if done {
                report.files_transferred += 1;
                report.files_verified += 1;
            } else {
                report.mismatches.push(record.file_id.clone());
            }
        }
        report.finished_at =
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        let summary =
            serde_json::to_vec_pretty(&json!({ "remote": self.remote, "report": report })).unwrap();
        crate::registry::write_atomic(&self.mirror.join(REPORT_FILE), &summary)?;
        info!(
            transferred = report.files_transferred,
            bytes = report.bytes_transferred,
            mismatches = report.mismatches.len(),
            "sync complete"
        );
        Ok(report)
    }

    /// Repeats [`SyncClient::sync_once`] every `interval` until `shutdown`
    /// fires. Failures are logged and retried on the next tick.
    pub async fn watch(
        &self,
        interval: Duration,
        shutdown: CancellationToken,
        mut on_report: impl FnMut(&Result<SyncReport, SyncError>),
    ) {
        let mut ticker = tokio::time::interval(interval);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                _ = shutdown.cancelled() => return,
                _ = ticker.tick() => {}
            }
            let result = tokio::select! {
                _ = shutdown.cancelled() => return,
                r = self.sync_once() => r,
            };
            if let Err(e) = &result {
                warn!("sync failed, retrying next interval: {e}");
            }
            on_report(&result);
        }
    }
}

/// Convenience wrapper for a single sync.
pub async fn sync_once(
    remote: &str,
    mirror: impl Into<PathBuf>,
    principal: &str,
) -> Result<SyncReport, SyncError> {
    SyncClient::new(remote, mirror, principal).sync_once().await
}

async fn local_digest(path: &Path) -> std::io::Result<Option<String>> {
    let path = path.to_owned();
    tokio::task::spawn_blocking(move || match sha256_file(&path) {
        Ok(d) => Ok(Some(d)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        // a directory or unreadable file where the mirror copy should be
        Err(e) if path.exists() => {
            warn!("cannot hash {}: {e}", path.display());
            Ok(None)
        }
        Err(e) => Err(e),
    })
    .await
    .map_err(std::io::Error::other)?
}

struct Fetched {
    bytes: u64,
    verified: bool,
}

fn partial_path(dest: &Path) -> PathBuf {
    let name = dest
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    dest.with_file_name(format!(".{name}.partial"))
}

/// Downloads one file into a hidden temp name and renames it into place if
/// the digest matches.
async fn fetch(
    link: &mut StoreLink,
    record: &MeasurementRecord,
    dest: &Path,
) -> Result<Fetched, SyncError> {
    if let Some(parent) = dest.parent() {
        tokio::fs::create_dir_all(parent).await?;
    }
    let tmp = partial_path(dest);
    let mut file = tokio::fs::File::create(&tmp).await?;
    let mut hasher = Sha256::new();
    let mut received = 0u64;
    let result: Result<(), SyncError> = async {
        for index in 0..record.chunk_count() {
            let mut params = Params::new();
            params.insert("file_id".into(), json!(record.file_id));
            params.insert("index".into(), json!(index));
            let reply: ChunkReply =
                serde_json::from_value(link.call("get_chunk", params).await?)
                    .map_err(|e| SyncError::Protocol(format!("bad chunk reply: {e}")))?;
            let bytes = reply
                .bytes()
                .map_err(|e| SyncError::Protocol(format!("bad chunk encoding: {e}")))?;
            received += bytes.len() as u64;
            hasher.update(&bytes);
            file.write_all(&bytes).await?;
        }
        file.flush().await?;
        file.sync_all().await?;
        Ok(())
    }
    .await;
    drop(file);
    if let Err(e) = result {
        let _ = tokio::fs::remove_file(&tmp).await;
        return Err(e);
    }
    let verified = hex::encode(hasher.finalize()) == record.sha256 && received == record.size_bytes;
    if verified {
        tokio::fs::rename(&tmp, dest).await?;
    } else {
        let _ = tokio::fs::remove_file(&tmp).await;
    }
    Ok(Fetched {
        bytes: received,
        verified,
    })
}

/// Reads the summary left by the last sync into `mirror`, if any.
pub fn read_last_report(mirror: &Path) -> Option<SyncReport> {
    let bytes = std::fs::read(mirror.join(REPORT_FILE)).ok()?;
    let v: serde_json::Value = serde_json::from_slice(&bytes).ok()?;
    serde_json::from_value(v.get("report")?.clone()).ok()
}
