//! Weight archive: an 8-byte little-endian header length, a compact JSON
//! header mapping each tensor name to `{dtype, shape, offset, length}`, then
//! the raw little-endian payload. Offsets are relative to the payload start.
//! Writers emit names in lexicographic order with contiguous extents, so a
//! read followed by a write reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ArchiveError, Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    I64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::I64 => "i64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            "i64" => Some(Dtype::I64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::I64(_) => Dtype::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::I64 => TensorData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

/// One stored tensor in its on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl ArchiveTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "ArchiveTensor::new",
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_tensor_f32(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: TensorData::F32(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_tensor_f64(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    /// Promotes to a `f64` tensor, rejecting non-finite floats.
    pub fn to_tensor(&self, name: &str) -> Result<Tensor> {
        let data = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::from_external(self.shape.clone(), data, name)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

/// Named tensors, kept sorted by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightArchive {
    pub tensors: BTreeMap<String, ArchiveTensor>,
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArchiveTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let length = (t.data.len() * t.data.dtype().size()) as u64;
            header.insert(
                name.clone(),
                HeaderEntry {
                    dtype: t.data.dtype().name().to_string(),
                    shape: t.shape.clone(),
                    offset,
                    length,
                },
            );
            offset += length;
        }
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            t.data.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let available = bytes.len() as u64;
        if available < 8 {
            return Err(ArchiveError::Truncated {
                needed: 8,
                available,
            });
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = 8u64
            .checked_add(header_len)
            .filter(|&end| end <= available)
            .ok_or(ArchiveError::Truncated {
                needed: 8u64.saturating_add(header_len),
                available,
            })?;
        let header_bytes = &bytes[8..header_end as usize];
        let header_text = std::str::from_utf8(header_bytes)
            .map_err(|e| ArchiveError::MalformedHeader(format!("not UTF-8: {e}")))?;
        let header: BTreeMap<String, HeaderEntry> = serde_json::from_str(header_text)
            .map_err(|e| ArchiveError::MalformedHeader(e.to_string()))?;
        let payload = &bytes[header_end as usize..];
        let payload_len = payload.len() as u64;

        let mut extents: Vec<(u64, u64, &str)> = Vec::with_capacity(header.len());
        let mut tensors = BTreeMap::new();
        for (name, entry) in &header {
            let dtype = Dtype::parse(&entry.dtype).ok_or_else(|| ArchiveError::UnknownDtype {
                name: name.clone(),
                dtype: entry.dtype.clone(),
            })?;
            let numel = entry
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            let expected = numel.and_then(|n| n.checked_mul(dtype.size() as u64));
            if expected != Some(entry.length) {
                return Err(ArchiveError::LengthMismatch {
                    name: name.clone(),
                    shape: entry.shape.clone(),
                    length: entry.length,
                    expected: expected.unwrap_or(u64::MAX),
                });
            }
            let end = entry.offset.checked_add(entry.length);
            if end.is_none_or(|e| e > payload_len) {
                return Err(ArchiveError::OutOfBounds {
                    name: name.clone(),
                    offset: entry.offset,
                    length: entry.length,
                    payload: payload_len,
                });
            }
            if entry.length > 0 {
                extents.push((entry.offset, entry.offset + entry.length, name));
            }
            let raw = &payload[entry.offset as usize..(entry.offset + entry.length) as usize];
            tensors.insert(
                name.clone(),
                ArchiveTensor {
                    shape: entry.shape.clone(),
                    data: TensorData::read_le(dtype, raw),
                },
            );
        }
        extents.sort();
        for pair in extents.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(ArchiveError::Overlap {
                    first: pair[0].2.to_string(),
                    second: pair[1].2.to_string(),
                });
            }
        }
        Ok(Self { tensors })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Every tensor promoted to `f64`.
    pub fn to_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.tensors
            .iter()
            .map(|(name, t)| Ok((name.clone(), t.to_tensor(name)?)))
            .collect()
    }

    /// Stores every tensor of `map` as `f32`.
    pub fn from_tensors_f32(map: &BTreeMap<String, Tensor>) -> Self {
        Self {
            tensors: map
                .iter()
                .map(|(k, v)| (k.clone(), ArchiveTensor::from_tensor_f32(v)))
                .collect(),
        }
    }

    pub fn from_tensors_f64(map: &BTreeMap<String, Tensor>) -> Self {
        Self {
            tensors: map
                .iter()
                .map(|(k, v)| (k.clone(), ArchiveTensor::from_tensor_f64(v)))
                .collect(),
        }
    }
}

/// Reads an archive and promotes every tensor to `f64`.
pub fn load_archive(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    WeightArchive::read(path)?.to_tensors()
}
