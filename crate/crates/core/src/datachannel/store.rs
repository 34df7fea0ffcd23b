use std::io::{Read, Seek, SeekFrom};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use super::manifest::{build_manifest, validate_file_id, Manifest, CHUNK_SIZE};
use crate::policy::{Channel, Policy};
use crate::registry::str_param;
use crate::rpc::{self, Server, Service};
use crate::wire::{ErrorCode, ErrorInfo, Request, Response};

pub const STORE_OBJECT: &str = "store";

/// One chunk as returned by `get_chunk`, with the bytes still base64-encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkReply {
    pub file_id: String,
    pub index: u64,
    pub offset: u64,
    pub length: u64,
    pub chunk_count: u64,
    pub data: String,
}

impl ChunkReply {
    pub fn bytes(&self) -> Result<Vec<u8>, base64::DecodeError> {
        base64::engine::general_purpose::STANDARD.decode(&self.data)
    }
}

/// Instrument-side file server for the data channel.
pub struct StoreService {
    dir: PathBuf,
    policy: Policy,
    current: RwLock<Option<Arc<Manifest>>>,
    rebuild: tokio::sync::Mutex<()>,
}

impl StoreService {
    pub fn new(dir: impl Into<PathBuf>, policy: Policy) -> Self {
        StoreService {
            dir: dir.into(),
            policy,
            current: RwLock::new(None),
            rebuild: tokio::sync::Mutex::new(()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Rebuilds the manifest, bumping the generation only when the records
    /// changed. Readers see either the old or the new manifest.
    pub async fn refresh(&self) -> Result<Arc<Manifest>, ErrorInfo> {
        let _one_at_a_time = self.rebuild.lock().await;
        let dir = self.dir.clone();
        let built = tokio::task::spawn_blocking(move || build_manifest(&dir))
            .await
            .map_err(|e| ErrorInfo::internal(e.to_string()))?
            .map_err(|e| {
                ErrorInfo::internal(format!("cannot read store {}: {e}", self.dir.display()))
            })?;
        for w in &built.warnings {
            warn!("manifest: {w}");
        }
        let mut manifest = built.manifest;
        let prev = self.current.read().unwrap().clone();
        let next = match prev {
            Some(prev) if prev.records == manifest.records => prev,
            Some(prev) => {
                manifest.generation = prev.generation + 1;
                Arc::new(manifest)
            }
            None => Arc::new(manifest),
        };
        *self.current.write().unwrap() = Some(next.clone());
        Ok(next)
    }

    async fn manifest(&self) -> Result<Arc<Manifest>, ErrorInfo> {
        let cached = self.current.read().unwrap().clone();
        match cached {
            Some(m) => Ok(m),
            None => self.refresh().await,
        }
    }

    pub async fn get_chunk(&self, file_id: &str, index: u64) -> Result<ChunkReply, ErrorInfo> {
        validate_file_id(file_id)?;
        let manifest = self.manifest().await?;
        let record = manifest
            .get(file_id)
            .ok_or_else(|| ErrorInfo::not_found(format!("{file_id:?} is not in the manifest")))?;
        let chunk_count = record.chunk_count();
        if index >= chunk_count {
            return Err(ErrorInfo::out_of_range(format!(
                "chunk {index} of {file_id:?}, which has {chunk_count} chunks"
            )));
        }
        let offset = index * CHUNK_SIZE;
        let length = CHUNK_SIZE.min(record.size_bytes - offset);
        let path = self.dir.join(file_id);
        let bytes = tokio::task::spawn_blocking(move || -> std::io::Result<Vec<u8>> {
            let mut f = std::fs::File::open(path)?;
            f.seek(SeekFrom::Start(offset))?;
            let mut buf = vec![0u8; length as usize];
            f.read_exact(&mut buf)?;
            Ok(buf)
        })
        .await
        .map_err(|e| ErrorInfo::internal(e.to_string()))?
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                ErrorInfo::not_found(format!("{file_id:?} disappeared"))
            }
            _ => ErrorInfo::internal(format!("reading {file_id:?}: {e}")),
        })?;
        Ok(ChunkReply {
            file_id: file_id.to_owned(),
            index,
            offset,
            length,
            chunk_count,
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        })
    }

    async fn dispatch(&self, req: &Request) -> Result<Value, ErrorInfo> {
        if req.object != STORE_OBJECT {
            return Err(ErrorInfo::not_found(format!(
                "no object {:?} here",
                req.object
            )));
        }
        match req.method.as_str() {
            "manifest" => Ok(serde_json::to_value(&*self.refresh().await?).unwrap()),
            "get_chunk" => {
                let file_id = str_param(&req.params, "file_id")?;
                let index = req
                    .params
                    .get("index")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| {
                        ErrorInfo::invalid_params("missing non-negative integer \"index\"")
                    })?;
                Ok(json!(self.get_chunk(file_id, index).await?))
            }
            other => Err(ErrorInfo::not_found(format!(
                "store has no method {other:?}"
            ))),
        }
    }
}

impl Service for StoreService {
    async fn handle(&self, req: Request, peer: SocketAddr) -> Response {
        let outcome = match rpc::authorize(&self.policy, &req, &peer, Channel::Data) {
            Ok(()) => self.dispatch(&req).await,
            Err(e) => Err(e),
        };
        req.respond(outcome)
    }

    // A denied principal loses the connection, not just the request.
    fn close_after(&self, resp: &Response) -> bool {
        matches!(&resp.outcome, Err(e) if e.code == ErrorCode::PolicyDenied)
    }
}

/// Binds a store server on `addr` serving `dir`.
pub async fn serve_store(
    dir: impl Into<PathBuf>,
    addr: &str,
    policy: Policy,
) -> std::io::Result<Server> {
    let dir = dir.into();
    if !dir.is_dir() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("store directory {} does not exist", dir.display()),
        ));
    }
    let service = Arc::new(StoreService::new(dir, policy.clone()));
    Server::bind(addr, service, policy, Channel::Data).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn chunk_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let big: Vec<u8> = (0..CHUNK_SIZE + 1).map(|i| (i % 251) as u8).collect();
        std::fs::write(dir.path().join("one"), b"x").unwrap();
        std::fs::write(dir.path().join("big"), &big).unwrap();
        let s = StoreService::new(dir.path(), Policy::open());

        let c = s.get_chunk("one", 0).await.unwrap();
        assert_eq!(c.bytes().unwrap(), b"x");
        assert_eq!(c.chunk_count, 1);

        let c0 = s.get_chunk("big", 0).await.unwrap();
        assert_eq!(c0.length, CHUNK_SIZE);
        assert_eq!(c0.bytes().unwrap(), &big[..CHUNK_SIZE as usize]);
        let c1 = s.get_chunk("big", 1).await.unwrap();
        assert_eq!(c1.bytes().unwrap(), &big[CHUNK_SIZE as usize..]);
        assert_eq!(
            s.get_chunk("big", 2).await.unwrap_err().code,
            ErrorCode::OutOfRange
        );

        assert_eq!(
            s.get_chunk("../secret", 0).await.unwrap_err().code,
            ErrorCode::InvalidParams
        );
        assert_eq!(
            s.get_chunk("missing", 0).await.unwrap_err().code,
            ErrorCode::NotFound
        );
    }

    #[tokio::test]
    async fn generation_moves_only_on_change() {
        let dir = tempfile::tempdir().unwrap();
        let s = StoreService::new(dir.path(), Policy::open());
        assert_eq!(s.refresh().await.unwrap().generation, 1);
        assert_eq!(s.refresh().await.unwrap().generation, 1);
        std::fs::write(dir.path().join("a"), b"1").unwrap();
        let m = s.refresh().await.unwrap();
        assert_eq!((m.generation, m.records.len()), (2, 1));
        assert_eq!(s.refresh().await.unwrap().generation, 2);
        std::fs::write(dir.path().join("a"), b"2").unwrap();
        assert_eq!(s.refresh().await.unwrap().generation, 3);
    }

    #[tokio::test]
    async fn files_added_after_the_manifest_are_not_served() {
        let dir = tempfile::tempdir().unwrap();
        let s = StoreService::new(dir.path(), Policy::open());
        s.refresh().await.unwrap();
        std::fs::write(dir.path().join("late"), b"1").unwrap();
        assert_eq!(
            s.get_chunk("late", 0).await.unwrap_err().code,
            ErrorCode::NotFound
        );
        s.refresh().await.unwrap();
        assert!(s.get_chunk("late", 0).await.is_ok());
    }
}
