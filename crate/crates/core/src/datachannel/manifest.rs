use std::fs::File;
use std::io::{self, Read};
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::wire::ErrorInfo;

/// Transfer granularity on the data channel.
pub const CHUNK_SIZE: u64 = 1 << 20;

/// Suffix that pairs a measurement with its metadata sidecar.
pub const SIDECAR_SUFFIX: &str = ".meta.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    /// Store-relative path with `/` separators.
    pub file_id: String,
    pub size_bytes: u64,
    pub sha256: String,
    pub modified_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<String>,
}

impl MeasurementRecord {
    pub fn chunk_count(&self) -> u64 {
        self.size_bytes.div_ceil(CHUNK_SIZE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub generation: u64,
    pub records: Vec<MeasurementRecord>,
}

impl Manifest {
    pub fn get(&self, file_id: &str) -> Option<&MeasurementRecord> {
        self.records
            .binary_search_by(|r| r.file_id.as_str().cmp(file_id))
            .ok()
            .map(|i| &self.records[i])
    }
}

/// A freshly built manifest plus files that could not be read.
#[derive(Debug, Clone)]
pub struct ManifestBuild {
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

/// Rejects ids that are empty, absolute, or step outside the store.
pub fn validate_file_id(file_id: &str) -> Result<(), ErrorInfo> {
    let bad =
        || ErrorInfo::invalid_params(format!("file id {file_id:?} is not a store-relative path"));
    if file_id.is_empty() || file_id.contains('\\') || file_id.contains('\0') {
        return Err(bad());
    }
    for part in file_id.split('/') {
        if part.is_empty() || part == "." || part == ".." {
            return Err(bad());
        }
    }
    let all_normal = Path::new(file_id)
        .components()
        .all(|c| matches!(c, Component::Normal(_)));
    if !all_normal {
        return Err(bad());
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 256 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn is_hidden(name: &std::ffi::OsStr) -> bool {
    name.to_string_lossy().starts_with('.')
}

/// Walks `store_dir`, hashing every regular file. Dot-prefixed files and
/// directories are staging areas and are left out.
pub fn build_manifest(store_dir: &Path) -> io::Result<ManifestBuild> {
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    walk(store_dir, "", &mut records, &mut warnings, true)?;
    records.sort_by(|a: &MeasurementRecord, b| a.file_id.cmp(&b.file_id));
    let ids: std::collections::HashSet<String> =
        records.iter().map(|r| r.file_id.clone()).collect();
    for r in &mut records {
        if let Some(stem) = r.file_id.strip_suffix(".icem") {
            let side = format!("{stem}{SIDECAR_SUFFIX}");
            if ids.contains(&side) {
                r.sidecar = Some(side);
            }
        }
    }
    Ok(ManifestBuild {
        manifest: Manifest {
            generation: 1,
            records,
        },
        warnings,
    })
}

fn walk(
    dir: &Path,
    prefix: &str,
    records: &mut Vec<MeasurementRecord>,
    warnings: &mut Vec<String>,
    root: bool,
) -> io::Result<()> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if root => return Err(e),
        Err(e) => {
            warnings.push(format!("{}: {e}", dir.display()));
            return Ok(());
        }
    };
    for entry in entries {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                warnings.push(format!("{}: {e}", dir.display()));
                continue;
            }
        };
        let name = entry.file_name();
        if is_hidden(&name) {
            continue;
        }
        let Some(name) = name.to_str() else {
            warnings.push(format!(
                "{}: non-UTF-8 name skipped",
                entry.path().display()
            ));
            continue;
        };
        let file_id = if prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{prefix}/{name}")
        };
        let path = entry.path();
        let file_type = match entry.file_type() {
            Ok(t) => t,
            Err(e) => {
                warnings.push(format!("{file_id}: {e}"));
                continue;
            }
        };
        if file_type.is_dir() {
            walk(&path, &file_id, records, warnings, false)?;
        } else if file_type.is_file() {
            match describe(&path, file_id.clone()) {
                Ok(r) => records.push(r),
                Err(e) => warnings.push(format!("{file_id}: {e}")),
            }
        }
    }
    Ok(())
}

fn describe(path: &Path, file_id: String) -> io::Result<MeasurementRecord> {
    let meta = std::fs::metadata(path)?;
    let sha256 = sha256_file(path)?;
    let modified: chrono::DateTime<chrono::Utc> = meta.modified()?.into();
    Ok(MeasurementRecord {
        file_id,
        size_bytes: meta.len(),
        sha256,
        modified_at: modified.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        sidecar: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let b = build_manifest(dir.path()).unwrap();
        assert_eq!(b.manifest.generation, 1);
        assert!(b.manifest.records.is_empty());
    }

    #[test]
    fn four_byte_file_digest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.bin"), b"abcd").unwrap();
        let m = build_manifest(dir.path()).unwrap().manifest;
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.records[0].size_bytes, 4);
        // sha256sum of the four bytes "abcd"
        assert_eq!(
            m.records[0].sha256,
            "88d4266fd4e6338d13b845fcf289579d209c897823b9217da3e161936f031589"
        );
    }

    #[test]
    fn sorted_nested_hidden_and_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        std::fs::create_dir_all(d.join("sub/deeper")).unwrap();
        std::fs::create_dir_all(d.join(".staging")).unwrap();
        for f in [
            "z.icem",
            "z.meta.json",
            "b.icem",
            "sub/deeper/x.txt",
            ".hidden",
            ".staging/y",
        ] {
            std::fs::write(d.join(f), f).unwrap();
        }
        let m = build_manifest(d).unwrap().manifest;
        let ids: Vec<_> = m.records.iter().map(|r| r.file_id.as_str()).collect();
        assert_eq!(ids, ["b.icem", "sub/deeper/x.txt", "z.icem", "z.meta.json"]);
        assert_eq!(
            m.get("z.icem").unwrap().sidecar.as_deref(),
            Some("z.meta.json")
        );
        assert_eq!(m.get("b.icem").unwrap().sidecar, None);
        assert!(m.get("nope").is_none());
        assert_eq!(build_manifest(d).unwrap().manifest.records, m.records);
    }

    #[test]
    fn missing_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_manifest(&dir.path().join("absent")).is_err());
    }

    #[test]
    fn file_id_guard() {
        for ok in ["a", "a/b.icem", "x..y"] {
            validate_file_id(ok).unwrap();
        }
        for bad in [
            "",
            "../secret",
            "a/../b",
            "/etc/passwd",
            "a//b",
            "./a",
            "a\\b",
            "a/",
        ] {
            assert!(validate_file_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn chunk_counts() {
        let rec = |size| MeasurementRecord {
            file_id: "f".into(),
            size_bytes: size,
            sha256: String::new(),
            modified_at: String::new(),
            sidecar: None,
        };
        assert_eq!(rec(0).chunk_count(), 0);
        assert_eq!(rec(1).chunk_count(), 1);
        assert_eq!(rec(CHUNK_SIZE).chunk_count(), 1);
        assert_eq!(rec(CHUNK_SIZE + 1).chunk_count(), 2);
    }
}
