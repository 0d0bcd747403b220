//! Binary weight files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   "CNCT"            4 bytes
//! version u32
//! count   u32
//! count x {
//!     name_len u16, name bytes (UTF-8)
//!     dtype    u8   (0 = f32, 1 = f64)
//!     rank     u8
//!     dims     u32 x rank
//!     values   dtype x prod(dims)
//! }
//! ```
//!
//! Tensors are written in graph topological order. The training step and the
//! validation accuracy of the saved weights travel as the reserved f64
//! tensors `meta:step` and `meta:val_accuracy`.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;

use super::params::{split_key, Param, ParamStore};
use super::ArchitectureGraph;
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNCT";
pub const CHECKPOINT_VERSION: u32 = 1;

const META_STEP: &str = "meta:step";
const META_VAL_ACCURACY: &str = "meta:val_accuracy";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_elements<T: Element>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        }
    }

    fn from_elements<T: Element>(v: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(v.iter().map(|x| x.to_f64() as f32).collect()),
            DType::F64 => TensorData::F64(v.iter().map(|x| x.to_f64()).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<NamedTensor>,
    pub step: u64,
    pub val_accuracy: Option<f64>,
}

impl Checkpoint {
    pub fn from_params<T: Element>(params: &ParamStore<T>, step: u64, val_accuracy: Option<f64>) -> Self {
        let tensors = params
            .entries()
            .iter()
            .map(|(name, p)| {
                let dims = p.value.shape().dims()[4 - p.rank as usize..].to_vec();
                NamedTensor {
                    name: name.clone(),
                    dims,
                    data: TensorData::from_elements(p.value.data()),
                }
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            tensors,
            step,
            val_accuracy,
        }
    }

    /// Rebuilds a parameter store for `graph`, rejecting tensors the graph
    /// does not know and reporting the first node whose weights are missing.
    pub fn to_params<T: Element>(&self, graph: &ArchitectureGraph) -> Result<ParamStore<T>> {
        let slots = graph.param_slots();
        let known: std::collections::HashSet<String> = slots.iter().map(|s| s.key()).collect();
        let unknown: Vec<&str> = self
            .tensors
            .iter()
            .map(|t| t.name.as_str())
            .filter(|n| !known.contains(*n))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Compatibility(format!(
                "tensors not in graph: {}",
                unknown.join(", ")
            )));
        }
        let by_name: std::collections::HashMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut entries = IndexMap::new();
        for slot in slots {
            let key = slot.key();
            let Some(t) = by_name.get(key.as_str()) else {
                return Err(Error::Compatibility(format!(
                    "missing weights for node `{}` ({})",
                    slot.node, slot.param
                )));
            };
            if t.dims != slot.dims() {
                return Err(Error::Compatibility(format!(
                    "`{key}` has dims {:?}, graph expects {:?}",
                    t.dims,
                    slot.dims()
                )));
            }
            entries.insert(
                key,
                Param {
                    value: Tensor::from_vec(slot.shape, t.data.to_elements())?,
                    rank: slot.rank,
                    trainable: slot.trainable,
                },
            );
        }
        Ok(ParamStore::from_entries(entries))
    }

    /// Node names that own at least one tensor.
    pub fn node_names(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in &self.tensors {
            let node = split_key(&t.name).0;
            if out.last() != Some(&node) {
                out.push(node);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.write_u32::<LittleEndian>(self.version)?;
        let mut all: Vec<NamedTensor> = self.tensors.clone();
        all.push(NamedTensor {
            name: META_STEP.into(),
            dims: vec![1],
            data: TensorData::F64(vec![self.step as f64]),
        });
        if let Some(acc) = self.val_accuracy {
            all.push(NamedTensor {
                name: META_VAL_ACCURACY.into(),
                dims: vec![1],
                data: TensorData::F64(vec![acc]),
            });
        }
        buf.write_u32::<LittleEndian>(all.len() as u32)?;
        for t in &all {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
            buf.write_u16::<LittleEndian>(name_len)?;
            buf.extend_from_slice(name);
            buf.write_u8(t.data.dtype().code())?;
            let rank = u8::try_from(t.dims.len())
                .map_err(|_| Error::Format(format!("rank too large for {}", t.name)))?;
            buf.write_u8(rank)?;
            for &d in &t.dims {
                buf.write_u32::<LittleEndian>(d as u32)?;
            }
            let expected: usize = t.dims.iter().product();
            if expected != t.data.len() {
                return Err(Error::Format(format!(
                    "`{}` dims {:?} disagree with {} values",
                    t.name,
                    t.dims,
                    t.data.len()
                )));
            }
            match &t.data {
                TensorData::F32(v) => v
                    .iter()
                    .try_for_each(|&x| buf.write_f32::<LittleEndian>(x))?,
                TensorData::F64(v) => v
                    .iter()
                    .try_for_each(|&x| buf.write_f64::<LittleEndian>(x))?,
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |what: &str| Error::Format(format!("truncated file while reading {what}"));
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad magic bytes {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| truncated("version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.read_u32::<LittleEndian>().map_err(|_| truncated("count"))?;
        let mut tensors = Vec::new();
        let mut step = 0u64;
        let mut val_accuracy = None;
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>().map_err(|_| truncated("name length"))?;
            let mut name = vec![0u8; name_len as usize];
            r.read_exact(&mut name).map_err(|_| truncated("name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let code = r.read_u8().map_err(|_| truncated("dtype"))?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("unknown dtype code {code} for {name}")))?;
            let rank = r.read_u8().map_err(|_| truncated("rank"))?;
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(r.read_u32::<LittleEndian>().map_err(|_| truncated("dims"))? as usize);
            }
            let numel: usize = dims.iter().product();
            let width = match dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let remaining = bytes.len() - r.position() as usize;
            if numel.checked_mul(width).is_none_or(|need| need > remaining) {
                return Err(truncated(&format!("values of {name}")));
            }
            let data = match dtype {
                DType::F32 => {
                    let mut v = vec![0f32; numel];
                    r.read_f32_into::<LittleEndian>(&mut v)
                        .map_err(|_| truncated("values"))?;
                    TensorData::F32(v)
                }
                DType::F64 => {
                    let mut v = vec![0f64; numel];
                    r.read_f64_into::<LittleEndian>(&mut v)
                        .map_err(|_| truncated("values"))?;
                    TensorData::F64(v)
                }
            };
            match (name.as_str(), &data) {
                (META_STEP, TensorData::F64(v)) if v.len() == 1 => step = v[0] as u64,
                (META_VAL_ACCURACY, TensorData::F64(v)) if v.len() == 1 => val_accuracy = Some(v[0]),
                _ => tensors.push(NamedTensor { name, dims, data }),
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.position() as usize
            )));
        }
        Ok(Checkpoint {
            version,
            tensors,
            step,
            val_accuracy,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl Shape {
    /// Shape with leading unit axes padded to rank 4.
    pub fn from_dims(dims: &[usize]) -> Option<Self> {
        if dims.len() > 4 {
            return None;
        }
        let mut d = [1usize; 4];
        d[4 - dims.len()..].copy_from_slice(dims);
        Some(Shape::from(d))
    }
}
