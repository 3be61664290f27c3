//! Tensor container used for backbone weights, embedding fixtures, head
//! checkpoints and the embedding cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "VITWGT01"
//! offset 8   u64       manifest length M
//! offset 16  M bytes   UTF-8 JSON manifest
//!            zero pad  up to the next multiple of 64
//! payload    f32 LE    tensors, each starting at a 64-byte aligned offset
//! ```
//!
//! The manifest is `{"metadata": {...}, "tensors": [{"name", "dtype", "shape",
//! "byte_offset"}]}` where `byte_offset` is relative to the payload start.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 8] = b"VITWGT01";
pub const ALIGNMENT: usize = 64;

/// A dense f32 tensor with a row-major shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::structural(format!(
                "tensor shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(default)]
    metadata: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

/// Named tensors plus free-form metadata, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub metadata: BTreeMap<String, Value>,
    tensors: Vec<(String, Tensor)>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.tensors.push((name, tensor));
        }
    }

    pub fn insert_vec(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        self.insert(name, Tensor::new(shape, data)?);
        Ok(())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).and_then(Value::as_str)
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.metadata
            .get(key)
            .and_then(Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| FormatError::Manifest(format!("missing integer metadata {key:?}")).into())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Fetches a tensor and checks its shape.
    pub fn require(&self, name: &str, shape: &[usize]) -> Result<&Tensor, FormatError> {
        let t = self
            .get(name)
            .ok_or_else(|| FormatError::MissingTensor(name.to_string()))?;
        if t.shape != shape {
            return Err(FormatError::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(t)
    }

    /// Like [`require`](Self::require) but absent tensors yield `None`.
    pub fn optional(&self, name: &str, shape: &[usize]) -> Result<Option<&Tensor>, FormatError> {
        match self.get(name) {
            None => Ok(None),
            Some(_) => self.require(name, shape).map(Some),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape.clone(),
                byte_offset: offset as u64,
            });
            offset = align_up(offset + t.numel() * 4);
        }
        let manifest = serde_json::to_vec(&Manifest {
            metadata: self.metadata.clone(),
            tensors: entries,
        })
        .expect("manifest serializes");

        let header = align_up(16 + manifest.len());
        let mut out = Vec::with_capacity(header + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.resize(header, 0);
        for (_, t) in &self.tensors {
            let start = out.len();
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let end = header + align_up(start - header + t.numel() * 4);
            out.resize(end, 0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            let found = &bytes[..bytes.len().min(8)];
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            }
            .into());
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let mend = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| FormatError::Manifest(format!("manifest length {mlen} exceeds file")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..mend])
            .map_err(|e| FormatError::Manifest(e.to_string()))?;
        let header = align_up(mend);
        let payload = bytes.get(header..).unwrap_or(&[]);

        let mut container = TensorContainer {
            metadata: manifest.metadata,
            tensors: Vec::with_capacity(manifest.tensors.len()),
        };
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(FormatError::Dtype {
                    name: e.name,
                    dtype: e.dtype,
                }
                .into());
            }
            if e.byte_offset as usize % ALIGNMENT != 0 {
                return Err(FormatError::Misaligned {
                    name: e.name,
                    offset: e.byte_offset,
                }
                .into());
            }
            let n: usize = e.shape.iter().product();
            let start = e.byte_offset;
            let end = start + 4 * n as u64;
            if end > payload.len() as u64 {
                return Err(FormatError::Truncated {
                    name: e.name,
                    start,
                    end,
                    available: payload.len() as u64,
                }
                .into());
            }
            let data = payload[start as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            container.tensors.push((e.name, Tensor { shape: e.shape, data }));
        }
        Ok(container)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::from(e).with_path(path))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| e.with_path(path))?;
        w.flush()?;
        Ok(())
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::from(e).with_path(path))?;
        Self::read_from(BufReader::new(f)).map_err(|e| e.with_path(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.set_meta("kind", "test");
        c.insert_vec("a", vec![2, 3], (0..6).map(|v| v as f32 * 0.5).collect()).unwrap();
        c.insert_vec("b", vec![1], vec![-7.25]).unwrap();
        c.insert_vec("c", vec![0], vec![]).unwrap();
        c
    }

    #[test]
    fn layout_is_aligned() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len() % ALIGNMENT, 0);
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = align_up(16 + mlen);
        // first tensor begins right at the payload start
        assert_eq!(f32::from_le_bytes(bytes[header + 4..header + 8].try_into().unwrap()), 0.5);
        // second tensor at the next 64-byte boundary
        assert_eq!(
            f32::from_le_bytes(bytes[header + 64..header + 68].try_into().unwrap()),
            -7.25
        );
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[3] = b'X';
        assert!(matches!(
            TensorContainer::from_bytes(&bytes),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        assert!(matches!(
            TensorContainer::from_bytes(b"VIT"),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 64 - 8];
        match TensorContainer::from_bytes(cut) {
            Err(Error::Format(FormatError::Truncated { name, .. })) => assert_eq!(name, "b"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_checks() {
        let c = sample();
        assert!(c.require("a", &[2, 3]).is_ok());
        assert!(matches!(c.require("a", &[3, 2]), Err(FormatError::Shape { .. })));
        assert!(matches!(c.require("zz", &[1]), Err(FormatError::MissingTensor(_))));
        assert!(c.optional("zz", &[1]).unwrap().is_none());
    }

    proptest::proptest! {
        #[test]
        fn arbitrary_payloads_round_trip_bitwise(
            bits in proptest::collection::vec(proptest::num::u32::ANY, 0..200),
            split in 0usize..200,
        ) {
            let vals: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let split = split.min(vals.len());
            let mut c = TensorContainer::new();
            c.insert_vec("x", vec![split], vals[..split].to_vec()).unwrap();
            c.insert_vec("y", vec![vals.len() - split], vals[split..].to_vec()).unwrap();
            let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
            let got: Vec<u32> = back.iter().flat_map(|(_, t)| t.data.iter().map(|v| v.to_bits())).collect();
            proptest::prop_assert_eq!(got, bits);
        }
    }
}
