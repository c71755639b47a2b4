use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version stamped on every raw record line.
pub const RAW_SCHEMA_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file and renames it into place, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        super::ensure_dir(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct LineOut<'a, T> {
    schema_version: u32,
    record: &'a T,
}

#[derive(Deserialize)]
struct LineIn<T> {
    schema_version: u32,
    record: T,
}

/// One JSON object per line, each wrapping a record with the schema version.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(
            &mut out,
            &LineOut {
                schema_version: RAW_SCHEMA_VERSION,
                record: r,
            },
        )?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let line: LineIn<T> = serde_json::from_str(l).map_err(|e| Error::Corruption {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            if line.schema_version != RAW_SCHEMA_VERSION {
                return Err(Error::Validation(format!(
                    "{} line {}: schema version {} (expected {RAW_SCHEMA_VERSION})",
                    path.display(),
                    i + 1,
                    line.schema_version
                )));
            }
            Ok(line.record)
        })
        .collect()
}
