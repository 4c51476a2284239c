//! Checkpoint I/O and transformer-block grouping.
//!
//! Two on-disk formats are supported:
//!
//! * **safetensors**: 8-byte little-endian header length, a UTF-8 JSON
//!   header mapping tensor names to `{dtype, shape, data_offsets}`, then a
//!   contiguous little-endian data region.
//! * **rawbin**: a JSON manifest (array of `{name, shape, dtype, file}`)
//!   next to one little-endian row-major blob per tensor. Meant for fixtures
//!   authored by hand or by small scripts.
//!
//! Tensors are held as `f32` in memory. `f16` and `bf16` widen to `f32`
//! exactly on load and narrow back on save, so a load/save cycle is
//! bit-identical.

mod dtype;
mod grouping;
mod rawbin;
mod safetensors;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub use dtype::DType;
pub use grouping::{group_blocks, Block, BlockGrouping, GroupingError, GroupingRules};

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: u64, reason: String },
    #[error("tensor `{name}`: truncated data at byte {offset}: {reason}")]
    TruncatedData {
        name: String,
        offset: u64,
        reason: String,
    },
    #[error("duplicate tensor name `{name}` at byte {offset}")]
    DuplicateTensor { name: String, offset: u64 },
    #[error("tensor `{name}`: unsupported dtype `{dtype}` at byte {offset}")]
    UnsupportedDtype {
        name: String,
        dtype: String,
        offset: u64,
    },
    #[error("tensor `{name}`: invalid shape at byte {offset}: {reason}")]
    InvalidShape {
        name: String,
        offset: u64,
        reason: String,
    },
    #[error("tensor `{name}`: {reason}")]
    InvalidTensor { name: String, reason: String },
}

impl CheckpointError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// On-disk checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointFormat {
    Safetensors,
    Rawbin,
}

impl CheckpointFormat {
    /// Guess from the file extension: `.json` is a rawbin manifest, anything
    /// else is treated as safetensors.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => CheckpointFormat::Rawbin,
            _ => CheckpointFormat::Safetensors,
        }
    }
}

impl FromStr for CheckpointFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "safetensors" | "st" => Ok(CheckpointFormat::Safetensors),
            "rawbin" | "raw" => Ok(CheckpointFormat::Rawbin),
            other => Err(format!("unknown checkpoint format `{other}` (expected safetensors or rawbin)")),
        }
    }
}

impl fmt::Display for CheckpointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointFormat::Safetensors => "safetensors",
            CheckpointFormat::Rawbin => "rawbin",
        })
    }
}

/// A dense row-major tensor. Values are stored as `f32`; `dtype` records the
/// on-disk precision.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, dtype: DType, data: Vec<f32>) -> Result<Self, String> {
        if shape.is_empty() {
            return Err("shape must have at least one dimension".into());
        }
        if shape.contains(&0) {
            return Err(format!("shape {shape:?} has a zero extent"));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| format!("shape {shape:?} overflows"))?;
        if numel != data.len() {
            return Err(format!(
                "shape {shape:?} needs {numel} elements, buffer holds {}",
                data.len()
            ));
        }
        Ok(Tensor { shape, dtype, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, String> {
        Self::new(vec![rows, cols], DType::F32, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn as_matrix(&self) -> Option<MatrixRef<'_>> {
        match self.shape[..] {
            [rows, cols] => Some(MatrixRef {
                rows,
                cols,
                data: &self.data,
            }),
            _ => None,
        }
    }

    /// Replace the values, keeping shape and dtype.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self, String> {
        Self::new(self.shape.clone(), self.dtype, data)
    }

    /// Element-wise bit comparison of the stored (widened) values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype == other.dtype
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn to_le_bytes(&self) -> Vec<u8> {
        self.dtype.encode(&self.data)
    }
}

/// Borrowed row-major 2-D view.
#[derive(Debug, Clone, Copy)]
pub struct MatrixRef<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f32],
}

impl<'a> MatrixRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f32]) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix buffer length mismatch");
        MatrixRef { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &'a [f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c) as f64)
    }
}

/// Named tensors from one checkpoint, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor; fails if the name is already taken.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), CheckpointError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(CheckpointError::DuplicateTensor { name, offset: 0 });
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Overwrite an existing tensor's contents.
    pub(crate) fn replace(&mut self, name: &str, tensor: Tensor) {
        if let Some(slot) = self.tensors.get_mut(name) {
            *slot = tensor;
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// True when both stores hold the same names, shapes, dtypes and bit
    /// patterns.
    pub fn bit_eq(&self, other: &WeightStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

/// Load a checkpoint. For rawbin, `path` is the manifest file.
pub fn load_checkpoint(path: &Path, format: CheckpointFormat) -> Result<WeightStore, CheckpointError> {
    match format {
        CheckpointFormat::Safetensors => {
            let bytes = fs::read(path).map_err(|e| CheckpointError::io(path, e))?;
            safetensors::decode(&bytes)
        }
        CheckpointFormat::Rawbin => rawbin::load(path),
    }
}

/// Save a checkpoint. Files are written to a temporary sibling and renamed
/// into place.
pub fn save_checkpoint(store: &WeightStore, path: &Path, format: CheckpointFormat) -> Result<(), CheckpointError> {
    match format {
        CheckpointFormat::Safetensors => write_atomic(path, &safetensors::encode(store)),
        CheckpointFormat::Rawbin => rawbin::save(store, path),
    }
}

/// Decode an in-memory safetensors buffer.
pub fn decode_safetensors(bytes: &[u8]) -> Result<WeightStore, CheckpointError> {
    safetensors::decode(bytes)
}

/// Encode a store as a safetensors buffer.
pub fn encode_safetensors(store: &WeightStore) -> Vec<u8> {
    safetensors::encode(store)
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CheckpointError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| CheckpointError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CheckpointError::io(path, e))?;
    tmp.persist(path).map_err(|e| CheckpointError::io(path, e.error))?;
    Ok(())
}

/// Byte offset of the `nth` (0-based) occurrence of `name` as a JSON string
/// key inside `text`, or 0 when it cannot be located.
pub(crate) fn locate_key(text: &str, name: &str, nth: usize) -> u64 {
    let needle = serde_json::to_string(name).unwrap_or_default();
    text.match_indices(&needle)
        .filter(|(pos, _)| {
            text[pos + needle.len()..]
                .trim_start()
                .starts_with(':')
        })
        .nth(nth)
        .map(|(pos, _)| pos as u64)
        .unwrap_or(0)
}

/// Byte offset of a serde_json error position inside `text`.
pub(crate) fn json_error_offset(text: &str, err: &serde_json::Error) -> u64 {
    let (line, column) = (err.line(), err.column());
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)) as u64
}
