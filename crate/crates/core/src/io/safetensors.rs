//! Reading (and, for fixtures, writing) safetensors checkpoints.
//!
//! Layout: `u64` little-endian header length, a JSON header mapping tensor
//! names to `{dtype, shape, data_offsets}`, then the raw data region.
//! F32, F16 and BF16 tensors are promoted to `f64` exactly; other dtypes
//! are reported as skipped.

use std::collections::BTreeMap;
use std::path::Path;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f64())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f64())
                .collect(),
        }
    }

    /// Rounds to the nearest value of this dtype.
    fn encode(self, values: &[f64], out: &mut Vec<u8>) {
        for &v in values {
            match self {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
                Dtype::BF16 => out.extend_from_slice(&bf16::from_f64(v).to_le_bytes()),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub dtype: Dtype,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedTensor {
    pub name: String,
    pub dtype: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    /// In data-region order.
    pub tensors: Vec<TensorRecord>,
    pub skipped: Vec<SkippedTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

fn parse_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let Some(len_bytes) = bytes.get(..8) else {
        return Err(parse_err(0, format!("file is {} bytes, too short for the header length", bytes.len())));
    };
    let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes"));
    let data_start = 8u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| parse_err(0, format!("header length {header_len} runs past end of file ({} bytes)", bytes.len())))?;
    let header_bytes = &bytes[8..data_start as usize];
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(header_bytes).map_err(|e| {
        // headers are a single JSON line in practice; column is then a byte index
        let offset = if e.line() <= 1 { 8 + e.column().saturating_sub(1) as u64 } else { 8 };
        parse_err(offset, format!("invalid header JSON: {e}"))
    })?;
    let data = &bytes[data_start as usize..];

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| parse_err(8, format!("tensor `{name}`: malformed entry: {e}")))?;
        let [begin, end] = entry.data_offsets;
        if begin > end || end > data.len() as u64 {
            return Err(parse_err(
                data_start + begin.min(end),
                format!("tensor `{name}`: data range {begin}..{end} outside data region of {} bytes", data.len()),
            ));
        }
        let Some(dtype) = Dtype::from_tag(&entry.dtype) else {
            log::warn!("skipping tensor `{name}` with unsupported dtype {}", entry.dtype);
            skipped.push(SkippedTensor {
                name,
                dtype: entry.dtype,
                reason: "unsupported dtype".into(),
            });
            continue;
        };
        let numel: usize = entry.shape.iter().product();
        if (end - begin) as usize != numel * dtype.size() {
            return Err(parse_err(
                data_start + begin,
                format!(
                    "tensor `{name}`: {} bytes for shape {:?} of {}",
                    end - begin,
                    entry.shape,
                    dtype.tag()
                ),
            ));
        }
        entries.push((begin, name, dtype, entry.shape));
    }
    entries.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let tensors = entries
        .into_iter()
        .map(|(begin, name, dtype, shape)| {
            let numel: usize = shape.iter().product();
            let raw = &data[begin as usize..begin as usize + numel * dtype.size()];
            TensorRecord {
                dtype,
                tensor: Tensor {
                    name,
                    shape,
                    values: dtype.decode(raw),
                },
            }
        })
        .collect();
    Ok(Checkpoint { tensors, skipped })
}

/// Serializes tensors, rounding values to each record's dtype.
pub fn encode_checkpoint(records: &[TensorRecord]) -> Vec<u8> {
    let mut data = Vec::new();
    let mut header = BTreeMap::new();
    for r in records {
        let begin = data.len() as u64;
        r.dtype.encode(&r.tensor.values, &mut data);
        header.insert(
            r.tensor.name.clone(),
            HeaderEntry {
                dtype: r.dtype.tag().to_string(),
                shape: r.tensor.shape.clone(),
                data_offsets: [begin, data.len() as u64],
            },
        );
    }
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn write_checkpoint(path: impl AsRef<Path>, records: &[TensorRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(records)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_file(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn minimal_f32_container() {
        let data: Vec<u8> = [1.0f32, -2.0, 0.5, 3.25].iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = raw_file(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]},"__metadata__":{"k":"v"}}"#,
            &data,
        );
        let ckpt = parse_checkpoint(&file).unwrap();
        assert_eq!(ckpt.tensors.len(), 1);
        let t = &ckpt.tensors[0].tensor;
        assert_eq!((t.name.as_str(), t.shape.clone()), ("w", vec![2, 2]));
        assert_eq!(t.values, vec![1.0, -2.0, 0.5, 3.25]);
    }

    #[test]
    fn bf16_and_f16_decode_exactly() {
        let file = raw_file(
            r#"{"b":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]},"h":{"dtype":"F16","shape":[1],"data_offsets":[2,4]}}"#,
            &[0x80, 0x3f, 0x00, 0x3c],
        );
        let ckpt = parse_checkpoint(&file).unwrap();
        assert_eq!(ckpt.tensors[0].tensor.values, vec![1.0]);
        assert_eq!(ckpt.tensors[0].dtype, Dtype::BF16);
        assert_eq!(ckpt.tensors[1].tensor.values, vec![1.0]);
    }

    #[test]
    fn unsupported_dtype_is_skipped() {
        let file = raw_file(
            r#"{"i":{"dtype":"I32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
            &[0, 0, 0, 0, 0, 0, 0x80, 0x3f],
        );
        let ckpt = parse_checkpoint(&file).unwrap();
        assert_eq!(ckpt.tensors.len(), 1);
        assert_eq!(ckpt.skipped.len(), 1);
        assert_eq!(ckpt.skipped[0].name, "i");
    }

    #[test]
    fn truncation_and_garbage_are_errors() {
        let data: Vec<u8> = [1.0f32; 4].iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = raw_file(r#"{"w":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#, &data);
        for cut in [0, 5, 20, file.len() - 1] {
            assert!(matches!(parse_checkpoint(&file[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
        let err = parse_checkpoint(&raw_file("{\"w\": nope}", &[])).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset >= 8),
            other => panic!("unexpected {other}"),
        }
        let file = raw_file(r#"{"w":{"dtype":"F32","shape":[3],"data_offsets":[0,16]}}"#, &data);
        assert!(parse_checkpoint(&file).is_err());
    }

    #[test]
    fn encode_round_trips_representable_values() {
        let records = vec![
            TensorRecord {
                dtype: Dtype::F32,
                tensor: Tensor::new("a", vec![2, 3], vec![0.1f32 as f64, 2.0, -3.5, 0.0, 1e-3f32 as f64, 7.0]).unwrap(),
            },
            TensorRecord {
                dtype: Dtype::BF16,
                tensor: Tensor::from_vec("b", vec![1.0, -0.5, 256.0]),
            },
        ];
        let bytes = encode_checkpoint(&records);
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(header_len % 8, 0);
        assert_eq!(parse_checkpoint(&bytes).unwrap().tensors, records);
    }
}
