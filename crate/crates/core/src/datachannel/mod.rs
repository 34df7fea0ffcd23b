//! The data channel: an instrument-side store server publishing a manifest
//! of measurement files and serving them in 1 MiB chunks, and a remote-side
//! client that mirrors the store, verifying every file by SHA-256.
//!
//! Wire methods on object `"store"`:
//!
//! * `manifest {}` returns the current [`Manifest`].
//! * `get_chunk {file_id, index}` returns a [`ChunkReply`] with base64 data.

mod manifest;
mod store;
mod sync;

pub use manifest::{
    build_manifest, sha256_file, validate_file_id, Manifest, ManifestBuild, MeasurementRecord,
    CHUNK_SIZE, SIDECAR_SUFFIX,
};
pub use store::{serve_store, ChunkReply, StoreService, STORE_OBJECT};
pub use sync::{read_last_report, sync_once, SyncClient, SyncError, SyncReport, REPORT_FILE};
