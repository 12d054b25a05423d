//! Named parameter storage and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "CFRC" | u8 version=1 | u32 meta_len | meta bytes (UTF-8, usually JSON)
//! u32 count | count × { u16 name_len | name | u8 trainable | u8 ndim | u32 dims[ndim] | f64 data[] }
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CFRC";
const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameters keyed by dotted name. Iteration order is the sorted name order,
/// so anything derived from a walk over the store is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.value.shape() == b.value.shape())
    }

    pub fn write_to<W: Write>(&self, meta: &str, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        write_u32(&mut w, meta.len())?;
        w.write_all(meta.as_bytes())?;
        write_u32(&mut w, self.params.len())?;
        for (name, p) in &self.params {
            let name_len = u16::try_from(name.len())
                .map_err(|_| NnError::Format(format!("parameter name too long: {name}")))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[u8::from(p.trainable)])?;
            let ndim = u8::try_from(p.value.shape().len())
                .map_err(|_| NnError::Format(format!("too many dims in {name}")))?;
            w.write_all(&[ndim])?;
            for &d in p.value.shape() {
                write_u32(&mut w, d)?;
            }
            let mut buf = Vec::with_capacity(p.value.numel() * 8);
            for x in p.value.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a checkpoint, returning the metadata string and the store.
    pub fn read_from<R: Read>(mut r: R) -> Result<(String, ParamStore)> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let mut version = [0u8; 1];
        read_exact(&mut r, &mut version)?;
        if version[0] != VERSION {
            return Err(NnError::Format(format!("unsupported version {}", version[0])));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta)?;
        let meta = String::from_utf8(meta).map_err(|_| NnError::Format("metadata is not UTF-8".into()))?;
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| NnError::Format("name is not UTF-8".into()))?;
            let mut flags = [0u8; 2];
            read_exact(&mut r, &mut flags)?;
            let shape = (0..flags[1]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| NnError::Format(format!("dims overflow in {name}")))?;
            let mut bytes = vec![0u8; numel.checked_mul(8).ok_or_else(|| NnError::Format("dims overflow".into()))?];
            read_exact(&mut r, &mut bytes)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            store.insert(name, Tensor::new(&shape, data)?, flags[0] != 0)?;
        }
        Ok((meta, store))
    }
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NnError::Format(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NnError::Format("truncated checkpoint".into()),
        _ => NnError::Io(e),
    })
}
