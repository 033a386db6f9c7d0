//! Flat binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "INVDCKPT"
//! version  u32
//! count    u32
//! count × entry:
//!   name_len u32, name (UTF-8)
//!   dtype    u8      0 = f32, 1 = f64, 2 = u8
//!   rank     u32
//!   dims     rank × u64
//!   payload  product(dims) little-endian elements
//! ```

use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"INVDCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl EntryData {
    fn dtype(&self) -> u8 {
        match self {
            EntryData::F32(_) => 0,
            EntryData::F64(_) => 1,
            EntryData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            EntryData::F32(v) => v.len(),
            EntryData::F64(v) => v.len(),
            EntryData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: EntryData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push(&mut self, entry: Entry) -> Result<()> {
        let n: u64 = entry.dims.iter().product();
        if n as usize != entry.data.len() {
            return Err(Error::invalid(format!(
                "entry {} dims {:?} do not match {} values",
                entry.name,
                entry.dims,
                entry.data.len()
            )));
        }
        if self.entries.iter().any(|e| e.name == entry.name) {
            return Err(Error::invalid(format!("duplicate entry name {}", entry.name)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.push(Entry {
            name: name.to_string(),
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            data: EntryData::F64(t.data().to_vec()),
        })
    }

    pub fn push_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.push(Entry {
            name: name.to_string(),
            dims: vec![bytes.len() as u64],
            data: EntryData::U8(bytes.to_vec()),
        })
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Reads a float entry as an `f64` tensor (f32 payloads are widened).
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing entry {name}")))?;
        let shape = e.dims.iter().map(|&d| d as usize).collect();
        let data = match &e.data {
            EntryData::F64(v) => v.clone(),
            EntryData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            EntryData::U8(_) => {
                return Err(Error::format("checkpoint", format!("entry {name} is not a float tensor")))
            }
        };
        Tensor::new(shape, data)
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name).map(|e| &e.data) {
            Some(EntryData::U8(v)) => Ok(v),
            Some(_) => Err(Error::format("checkpoint", format!("entry {name} is not a byte blob"))),
            None => Err(Error::format("checkpoint", format!("missing entry {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                EntryData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::format("checkpoint", format!("entry name: {e}")))?
                .to_string();
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()?);
            }
            let n = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("checkpoint", "dimension overflow"))?
                as usize;
            let data = match dtype {
                0 => EntryData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => EntryData::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => EntryData::U8(r.take(n)?.to_vec()),
                other => return Err(Error::format("checkpoint", format!("unknown dtype code {other}"))),
            };
            ck.push(Entry { name, dims, data })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes after last entry"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut ck = Checkpoint::new();
        ck.push_tensor("w", &Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let bytes = ck.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn f32_entries_widen_on_read() {
        let mut ck = Checkpoint::new();
        ck.push(Entry {
            name: "h".into(),
            dims: vec![2],
            data: EntryData::F32(vec![0.5, -1.25]),
        })
        .unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.tensor("h").unwrap().data(), &[0.5, -1.25]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            bits in proptest::collection::vec(any::<u64>(), 0..40),
            blob in proptest::collection::vec(any::<u8>(), 0..20),
        ) {
            let values: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let mut ck = Checkpoint::new();
            ck.push(Entry { name: "params/ü".into(), dims: vec![values.len() as u64], data: EntryData::F64(values) }).unwrap();
            ck.push_bytes("meta", &blob).unwrap();
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            match (&back.entries()[0].data, &ck.entries()[0].data) {
                (EntryData::F64(a), EntryData::F64(b)) => {
                    let ab: Vec<u64> = a.iter().map(|x| x.to_bits()).collect();
                    let bb: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
                    prop_assert_eq!(ab, bb);
                }
                _ => prop_assert!(false),
            }
        }
    }
}
