//! rawbin: a JSON manifest plus one raw little-endian blob per tensor.
//!
//! ```json
//! [
//!   {"name": "w", "shape": [2, 2], "dtype": "f32", "file": "w.bin"}
//! ]
//! ```
//!
//! `file` is resolved relative to the manifest's directory; `dtype`
//! defaults to `f32`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{json_error_offset, locate_key, write_atomic, CheckpointError, DType, Tensor, WeightStore};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    #[serde(default = "default_dtype")]
    dtype: String,
    file: String,
}

fn default_dtype() -> String {
    "f32".into()
}

pub(crate) fn load(manifest_path: &Path) -> Result<WeightStore, CheckpointError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| CheckpointError::io(manifest_path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| CheckpointError::MalformedHeader {
        offset: json_error_offset(&text, &e),
        reason: e.to_string(),
    })?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = HashSet::new();
    let mut store = WeightStore::new();
    for entry in &entries {
        // offsets for manifest-level problems point at the entry's name value
        let at = name_offset(&text, &entry.name, 0);
        if !seen.insert(entry.name.as_str()) {
            return Err(CheckpointError::DuplicateTensor {
                name: entry.name.clone(),
                offset: name_offset(&text, &entry.name, 1),
            });
        }
        let dtype = DType::parse(&entry.dtype).ok_or_else(|| CheckpointError::UnsupportedDtype {
            name: entry.name.clone(),
            dtype: entry.dtype.clone(),
            offset: at,
        })?;
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(CheckpointError::InvalidShape {
                name: entry.name.clone(),
                offset: at,
                reason: format!("{:?}: need at least one dimension and positive extents", entry.shape),
            });
        }
        let nbytes = entry
            .shape
            .iter()
            .try_fold(dtype.size(), |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| CheckpointError::InvalidShape {
                name: entry.name.clone(),
                offset: at,
                reason: "byte size overflows".into(),
            })?;

        let blob_path = dir.join(&entry.file);
        let blob = fs::read(&blob_path).map_err(|e| CheckpointError::io(&blob_path, e))?;
        if blob.len() < nbytes {
            return Err(CheckpointError::TruncatedData {
                name: entry.name.clone(),
                offset: blob.len() as u64,
                reason: format!("{} holds {} bytes, shape needs {nbytes}", entry.file, blob.len()),
            });
        }
        if blob.len() > nbytes {
            return Err(CheckpointError::MalformedHeader {
                offset: at,
                reason: format!(
                    "{} holds {} bytes but `{}` declares {nbytes}",
                    entry.file,
                    blob.len(),
                    entry.name
                ),
            });
        }
        let tensor = Tensor::new(entry.shape.clone(), dtype, dtype.decode(&blob)).map_err(|reason| {
            CheckpointError::InvalidTensor {
                name: entry.name.clone(),
                reason,
            }
        })?;
        store.insert(entry.name.clone(), tensor)?;
    }
    Ok(store)
}

pub(crate) fn save(store: &WeightStore, manifest_path: &Path) -> Result<(), CheckpointError> {
    let dir = match manifest_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => Path::new(".").to_path_buf(),
    };
    fs::create_dir_all(&dir).map_err(|e| CheckpointError::io(&dir, e))?;
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("weights");

    let mut manifest = Vec::with_capacity(store.len());
    for (idx, (name, tensor)) in store.iter().enumerate() {
        let file = format!("{stem}.{idx:04}.{}.bin", sanitize(name));
        write_atomic(&dir.join(&file), &tensor.to_le_bytes())?;
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: tensor.dtype().to_string(),
            file,
        });
    }
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    // manifest last, so a reader never sees it before its blobs
    write_atomic(manifest_path, &text)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

fn name_offset(text: &str, name: &str, nth: usize) -> u64 {
    // `"name": "<value>"`: locate the value string
    let needle = serde_json::to_string(name).unwrap_or_default();
    let mut hits = text.match_indices(&needle).filter(|(pos, _)| {
        let before = text[..*pos].trim_end();
        before.ends_with(':') && before[..before.len() - 1].trim_end().ends_with("\"name\"")
    });
    match hits.nth(nth) {
        Some((pos, _)) => pos as u64,
        None => locate_key(text, name, nth),
    }
}
