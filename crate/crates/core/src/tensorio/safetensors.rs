//! safetensors codec.
//!
//! ```text
//! [u64 LE header_len][header_len bytes of JSON][data region]
//! ```
//!
//! The header maps tensor names to `{"dtype", "shape", "data_offsets"}`
//! where offsets are `[begin, end)` relative to the start of the data
//! region. An optional `__metadata__` entry holds string pairs.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{json_error_offset, locate_key, CheckpointError, DType, Tensor, WeightStore};

const METADATA_KEY: &str = "__metadata__";

/// Header entries in file order, duplicates kept (serde_json's map would
/// silently keep the last one).
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }

        de.deserialize_map(EntriesVisitor)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

pub(crate) fn decode(bytes: &[u8]) -> Result<WeightStore, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::MalformedHeader {
            offset: 0,
            reason: format!("file is {} bytes, shorter than the 8-byte length prefix", bytes.len()),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(CheckpointError::MalformedHeader {
            offset: 0,
            reason: format!("header length {header_len} exceeds the {available} bytes after the prefix"),
        });
    }
    let header_end = 8 + header_len as usize;
    let header = std::str::from_utf8(&bytes[8..header_end]).map_err(|e| CheckpointError::MalformedHeader {
        offset: 8 + e.valid_up_to() as u64,
        reason: "header is not valid UTF-8".into(),
    })?;
    let RawHeader(entries) = serde_json::from_str(header).map_err(|e| CheckpointError::MalformedHeader {
        offset: 8 + json_error_offset(header, &e),
        reason: e.to_string(),
    })?;

    let data = &bytes[header_end..];
    let data_start = header_end as u64;
    let key_offset = |name: &str, nth: usize| 8 + locate_key(header, name, nth);

    let mut store = WeightStore::new();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();

    for (name, value) in &entries {
        if !seen.insert(name) {
            return Err(CheckpointError::DuplicateTensor {
                name: name.clone(),
                offset: key_offset(name, 1),
            });
        }
        if name == METADATA_KEY {
            let meta: BTreeMap<String, String> =
                serde_json::from_value(value.clone()).map_err(|e| CheckpointError::MalformedHeader {
                    offset: key_offset(name, 0),
                    reason: format!("__metadata__ must map strings to strings: {e}"),
                })?;
            for (k, v) in meta {
                store.set_metadata(k, v);
            }
            continue;
        }

        let at = key_offset(name, 0);
        let entry: Entry = serde_json::from_value(value.clone()).map_err(|e| CheckpointError::MalformedHeader {
            offset: at,
            reason: format!("entry `{name}`: {e}"),
        })?;
        let dtype = match entry.dtype.as_str() {
            "F32" => DType::F32,
            "F16" => DType::F16,
            "BF16" => DType::BF16,
            other => {
                return Err(CheckpointError::UnsupportedDtype {
                    name: name.clone(),
                    dtype: other.to_string(),
                    offset: at,
                })
            }
        };
        let shape: Vec<usize> = entry
            .shape
            .iter()
            .map(|&e| usize::try_from(e))
            .collect::<Result<_, _>>()
            .map_err(|_| CheckpointError::InvalidShape {
                name: name.clone(),
                offset: at,
                reason: "extent does not fit in usize".into(),
            })?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(CheckpointError::InvalidShape {
                name: name.clone(),
                offset: at,
                reason: format!("{shape:?}: need at least one dimension and positive extents"),
            });
        }
        let nbytes = shape
            .iter()
            .try_fold(dtype.size() as u64, |acc, &e| acc.checked_mul(e as u64))
            .ok_or_else(|| CheckpointError::InvalidShape {
                name: name.clone(),
                offset: at,
                reason: "byte size overflows".into(),
            })?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end - begin != nbytes {
            return Err(CheckpointError::MalformedHeader {
                offset: at,
                reason: format!(
                    "entry `{name}`: data_offsets [{begin}, {end}) do not span the {nbytes} bytes its shape needs"
                ),
            });
        }
        if end > data.len() as u64 {
            return Err(CheckpointError::TruncatedData {
                name: name.clone(),
                offset: data_start + data.len() as u64,
                reason: format!("data region ends before the tensor's end offset {}", data_start + end),
            });
        }
        spans.push((begin, end, name));
        let values = dtype.decode(&data[begin as usize..end as usize]);
        let tensor = Tensor::new(shape, dtype, values).map_err(|reason| CheckpointError::InvalidTensor {
            name: name.clone(),
            reason,
        })?;
        store.insert(name.clone(), tensor)?;
    }

    spans.sort_unstable();
    for pair in spans.windows(2) {
        let (_, prev_end, prev) = pair[0];
        let (begin, _, name) = pair[1];
        if begin < prev_end {
            return Err(CheckpointError::MalformedHeader {
                offset: key_offset(name, 0),
                reason: format!("tensor `{name}` overlaps `{prev}` in the data region"),
            });
        }
    }

    Ok(store)
}

pub(crate) fn encode(store: &WeightStore) -> Vec<u8> {
    let mut header = Map::new();
    if !store.metadata().is_empty() {
        header.insert(METADATA_KEY.into(), json!(store.metadata()));
    }
    let mut blob = Vec::new();
    for (name, tensor) in store.iter() {
        let begin = blob.len();
        blob.extend_from_slice(&tensor.to_le_bytes());
        header.insert(
            name.to_string(),
            json!({
                "dtype": tensor.dtype().safetensors_name(),
                "shape": tensor.shape(),
                "data_offsets": [begin, blob.len()],
            }),
        );
    }
    let mut header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    // pad so the data region starts 8-byte aligned
    while !header.len().is_multiple_of(8) {
        header.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header.len() + blob.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    out
}
