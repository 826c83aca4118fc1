//! Binary checkpoint format.
//!
//! Layout, all integers `u64` little-endian:
//!
//! ```text
//! "PLRN1"
//! count, then `count` parameter records
//! count, then `count` optimizer records (`<name>#m`, `<name>#v`, `<name>#step`)
//! count, then `count` metadata records (model configuration, one scalar each)
//! ```
//!
//! A record is `name_len, name bytes, rank, dims[rank]` followed by the
//! row-major little-endian `f64` payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PLRN1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub store: ParameterStore,
    pub metadata: Vec<(String, f64)>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    put_u64(out, shape.len() as u64);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(store: &ParameterStore, metadata: &[(String, f64)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * 3 * store.num_scalars() + 1024);
    out.extend_from_slice(MAGIC);

    put_u64(&mut out, store.len() as u64);
    for p in store.iter() {
        put_record(&mut out, &p.name, p.value.shape(), p.value.data());
    }

    put_u64(&mut out, 3 * store.len() as u64);
    for p in store.iter() {
        let shape = p.value.shape();
        put_record(&mut out, &format!("{}#m", p.name), shape, &p.state.m);
        put_record(&mut out, &format!("{}#v", p.name), shape, &p.state.v);
        put_record(&mut out, &format!("{}#step", p.name), &[1], &[p.state.step as f64]);
    }

    put_u64(&mut out, metadata.len() as u64);
    for (key, value) in metadata {
        put_record(&mut out, key, &[1], &[*value]);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Data(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| Error::Data(format!("implausible length {v} in checkpoint")))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.len()?;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("checkpoint record name is not UTF-8".into()))?;
        let rank = self.len()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count.checked_mul(8).ok_or_else(|| {
            Error::Data(format!("record `{name}` is too large"))
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Data(format!("record `{name}`: {e}")))?;
        Ok((name, tensor))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Data("not a PLRN1 checkpoint".into()));
    }

    let mut store = ParameterStore::new();
    for _ in 0..r.u64()? {
        let (name, value) = r.record()?;
        store
            .add(name, value)
            .map_err(|e| Error::Data(e.to_string()))?;
    }

    for _ in 0..r.u64()? {
        let (name, value) = r.record()?;
        let (param, field) = name
            .rsplit_once('#')
            .ok_or_else(|| Error::Data(format!("bad optimizer record `{name}`")))?;
        let id = store
            .id(param)
            .ok_or_else(|| Error::Data(format!("optimizer state for unknown `{param}`")))?;
        let expected = store.value(id).len();
        let state = store.state_mut(id);
        match field {
            "m" if value.len() == expected => state.m = value.into_data(),
            "v" if value.len() == expected => state.v = value.into_data(),
            "step" if value.len() == 1 => state.step = value.data()[0] as u64,
            _ => return Err(Error::Data(format!("bad optimizer record `{name}`"))),
        }
    }

    let mut metadata = Vec::new();
    for _ in 0..r.u64()? {
        let (name, value) = r.record()?;
        metadata.push((name, value.item()?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { store, metadata })
}

pub fn save(path: &Path, store: &ParameterStore, metadata: &[(String, f64)]) -> Result<()> {
    std::fs::write(path, encode(store, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
