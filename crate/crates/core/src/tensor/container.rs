//! Binary tensor container used for checkpoints and precomputed features.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "COAL" | version: u32 | count: u32 |
//!   count x ( name_len: u32 | name: utf-8 | dtype: u8 (0 = f32, 1 = f64)
//!             | rank: u32 | dims: u32 x rank | values )
//! ```

use std::collections::HashMap;
use std::path::Path;

use super::{Precision, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"COAL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: Precision,
    pub tensor: Tensor,
}

/// Ordered set of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`. Values are rounded to `dtype`.
    pub fn insert(&mut self, name: impl Into<String>, dtype: Precision, tensor: Tensor) {
        let name = name.into();
        let entry = Entry {
            name: name.clone(),
            dtype,
            tensor: tensor.rounded(dtype),
        };
        match self.index.get(&name) {
            Some(&i) => self.entries[i] = entry,
            None => {
                self.index.insert(name, self.entries.len());
                self.entries.push(entry);
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entry(name).map(|e| &e.tensor)
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::NotFound(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.dtype_code());
            out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.tensor.data() {
                match e.dtype {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes (expected \"COAL\")".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()?;
        let mut file = TensorFile::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not utf-8".into()))?
                .to_string();
            let dtype = match r.take(1)?[0] {
                0 => Precision::F32,
                1 => Precision::F64,
                c => {
                    return Err(Error::Format(format!(
                        "entry `{name}`: unknown dtype code {c}"
                    )))
                }
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(match dtype {
                    Precision::F32 => f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64,
                    Precision::F64 => f64::from_le_bytes(r.take(8)?.try_into().unwrap()),
                });
            }
            if file.contains(&name) {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
            file.insert(name, dtype, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(file)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
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
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated container".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut f = TensorFile::new();
        f.insert("x", Precision::F64, Tensor::vector(vec![1.0]));
        let b = f.to_bytes();
        assert_eq!(&b[..4], b"COAL");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        // name_len, "x", dtype, rank, dim, value
        assert_eq!(b.len(), 12 + 4 + 1 + 1 + 4 + 4 + 8);
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        assert!(matches!(
            TensorFile::from_bytes(b"NOPE\x01\0\0\0\0\0\0\0"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            TensorFile::from_bytes(b"COAL\x09\0\0\0\0\0\0\0"),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(matches!(
            TensorFile::from_bytes(b"COAL\x01\0"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn missing_key_names_the_key() {
        let f = TensorFile::new();
        let err = f.get("seq/0/visual").unwrap_err();
        assert!(err.to_string().contains("seq/0/visual"));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in prop::collection::vec(-1e6f64..1e6, 0..40),
            wide in any::<bool>(),
        ) {
            let dtype = if wide { Precision::F64 } else { Precision::F32 };
            let mut f = TensorFile::new();
            f.insert("a.b", dtype, Tensor::vector(vals.clone()));
            f.insert("s", Precision::F64, Tensor::scalar(0.5));
            let bytes = f.to_bytes();
            let g = TensorFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&g, &f);
            prop_assert_eq!(g.to_bytes(), bytes);
        }
    }
}
