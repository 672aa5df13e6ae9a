//! Self-describing binary container for f32 tensors.
//!
//! Layout (safetensors-compatible):
//!
//! ```text
//! [0..8)        little-endian u64 header length H
//! [8..8+H)      UTF-8 JSON object, padded with spaces to an 8-byte boundary
//! [8+H..)       raw little-endian f32 buffers
//! ```
//!
//! The JSON object maps each tensor name to
//! `{"data_offsets":[begin,end],"dtype":"F32","shape":[...]}` and carries a
//! `"__metadata__"` string-to-string map. Offsets are relative to the start of
//! the data section. Keys are written in sorted order and tensors are laid out
//! in name order, so identical containers always serialize to identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{Deserialize, Deserializer, MapAccess, Visitor};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: &str = "1";
pub const VERSION_KEY: &str = "format_version";
/// Metadata key naming what a container holds (`model`, `calib-stats`, `masks`, ...).
pub const KIND_KEY: &str = "kind";

const METADATA_KEY: &str = "__metadata__";
const HEADER_ALIGN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
        }
    }

    pub fn size(self) -> usize {
        4
    }
}

/// One named tensor. The name lives in the owning [`Container`].
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel = checked_numel(&shape)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))?;
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * self.dtype().size()
    }

    /// Interprets a 2-D record as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            &[rows, cols] => Matrix::from_vec(rows, cols, self.data.clone()),
            other => Err(Error::Shape(format!("expected 2-D tensor, got {other:?}"))),
        }
    }

    /// Element-wise bit equality (treats identical NaN payloads as equal).
    pub fn bit_eq(&self, other: &TensorRecord) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Matrix> for TensorRecord {
    fn from(m: Matrix) -> Self {
        let (rows, cols) = m.shape();
        Self {
            shape: vec![rows, cols],
            data: m.into_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    metadata: BTreeMap<String, String>,
    tensors: BTreeMap<String, TensorRecord>,
}

impl Default for Container {
    fn default() -> Self {
        Self::new()
    }
}

impl Container {
    pub fn new() -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(VERSION_KEY.to_string(), FORMAT_VERSION.to_string());
        Self {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn with_kind(kind: &str) -> Self {
        let mut c = Self::new();
        c.set_meta(KIND_KEY, kind);
        c
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    /// Metadata lookup that fails with a descriptive error when absent.
    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Header(format!("missing metadata key `{key}`")))
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta(KIND_KEY)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, record: TensorRecord) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name == METADATA_KEY {
            return Err(Error::Invalid(format!("reserved tensor name `{name}`")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.insert(name, record);
        Ok(())
    }

    /// Adds or overwrites a tensor.
    pub fn replace(&mut self, name: impl Into<String>, record: TensorRecord) {
        self.tensors.insert(name.into(), record);
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &TensorRecord)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        let meta: Map<String, Value> = self
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));

        let mut offset = 0usize;
        for (name, rec) in &self.tensors {
            let end = offset + rec.byte_len();
            header.insert(
                name.clone(),
                json!({
                    "dtype": rec.dtype().as_str(),
                    "shape": rec.shape,
                    "data_offsets": [offset, end],
                }),
            );
            offset = end;
        }

        let mut header_bytes = serde_json::to_vec(&Value::Object(header))
            .map_err(|e| Error::Header(e.to_string()))?;
        let padded = (8 + header_bytes.len()).div_ceil(HEADER_ALIGN) * HEADER_ALIGN - 8;
        header_bytes.resize(padded, b' ');

        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for rec in self.tensors.values() {
            for v in &rec.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Truncated(format!(
                "{} bytes is shorter than the 8-byte length prefix",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(Error::Truncated(format!(
                "header length {header_len} exceeds the {available} bytes after the prefix"
            )));
        }
        let header_end = 8 + header_len as usize;
        let header_str = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::Header(format!("header is not UTF-8: {e}")))?;
        let entries: HeaderEntries = serde_json::from_str(header_str)
            .map_err(|e| Error::Header(format!("header is not a JSON object: {e}")))?;
        let data = &bytes[header_end..];

        let mut metadata = None;
        let mut extents: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (name, value) in entries.0 {
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            if name == METADATA_KEY {
                metadata = Some(parse_metadata(value)?);
                continue;
            }
            let (shape, begin, end) = parse_tensor_info(&name, &value)?;
            extents.push((name, shape, begin, end));
        }

        let metadata = metadata.unwrap_or_default();
        match metadata.get(VERSION_KEY) {
            Some(v) if v == FORMAT_VERSION => {}
            Some(v) => {
                return Err(Error::VersionMismatch {
                    expected: FORMAT_VERSION.into(),
                    found: v.clone(),
                })
            }
            None => {
                return Err(Error::VersionMismatch {
                    expected: FORMAT_VERSION.into(),
                    found: "<absent>".into(),
                })
            }
        }

        for (name, shape, begin, end) in &extents {
            if begin > end || *end > data.len() {
                return Err(Error::OutOfBounds {
                    name: name.clone(),
                    detail: format!(
                        "[{begin}, {end}) does not fit a data section of {} bytes",
                        data.len()
                    ),
                });
            }
            let expected = checked_numel(shape)
                .and_then(|n| n.checked_mul(Dtype::F32.size()))
                .ok_or_else(|| Error::Shape(format!("shape {shape:?} of `{name}` overflows")))?;
            if end - begin != expected {
                return Err(Error::OutOfBounds {
                    name: name.clone(),
                    detail: format!(
                        "extent of {} bytes does not match shape {shape:?} ({expected} bytes)",
                        end - begin
                    ),
                });
            }
        }

        let mut order: Vec<usize> = (0..extents.len()).collect();
        order.sort_by_key(|&i| (extents[i].2, extents[i].3));
        let mut cursor = 0usize;
        let mut prev: Option<usize> = None;
        for &i in &order {
            let (name, _, begin, end) = &extents[i];
            if *begin < cursor {
                let other = prev.map(|p| extents[p].0.clone()).unwrap_or_default();
                return Err(Error::Overlap(other, name.clone()));
            }
            if *begin > cursor {
                return Err(Error::Header(format!(
                    "gap in data section before `{name}` ({cursor}..{begin})"
                )));
            }
            cursor = *end;
            prev = Some(i);
        }
        if cursor != data.len() {
            return Err(Error::Header(format!(
                "data section has {} trailing bytes",
                data.len() - cursor
            )));
        }

        let mut tensors = BTreeMap::new();
        for (name, shape, begin, end) in extents {
            let values = data[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(name, TensorRecord { shape, data: values });
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Structural equality with bitwise float comparison.
    pub fn bit_eq(&self, other: &Container) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = value else {
        return Err(Error::Header("`__metadata__` must be an object".into()));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            other => Err(Error::Header(format!(
                "metadata value for `{k}` must be a string, got {other}"
            ))),
        })
        .collect()
}

fn parse_tensor_info(name: &str, value: &Value) -> Result<(Vec<usize>, usize, usize)> {
    let bad = |what: &str| Error::Header(format!("tensor `{name}`: {what}"));
    let obj = value.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?;
    if dtype != Dtype::F32.as_str() {
        return Err(Error::UnknownDtype {
            name: name.to_string(),
            dtype: dtype.to_string(),
        });
    }
    let as_usize = |v: &Value| v.as_u64().and_then(|x| usize::try_from(x).ok());
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| as_usize(d).ok_or_else(|| bad("shape entries must be non-negative integers")))
        .collect::<Result<Vec<_>>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing data_offsets"))?;
    if offsets.len() != 2 {
        return Err(bad("data_offsets must have two entries"));
    }
    let begin = as_usize(&offsets[0]).ok_or_else(|| bad("bad begin offset"))?;
    let end = as_usize(&offsets[1]).ok_or_else(|| bad("bad end offset"))?;
    Ok((shape, begin, end))
}

/// Header object entries in file order, duplicates preserved so they can be rejected.
struct HeaderEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(HeaderEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}
