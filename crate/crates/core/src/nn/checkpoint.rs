//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! magic `EPFGCKPT`, u32 version, u32-prefixed model tag, u32-prefixed JSON
//! metadata, u32 entry count, then per entry a u32-prefixed name, u64 rows,
//! u64 cols and u64 payload byte offset, followed by the f64 payloads in
//! row-major order.

use std::fs;
use std::path::Path;

use super::mat::Mat;
use super::store::ParameterStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EPFGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn from_store(tag: &str, meta: serde_json::Value, store: &ParameterStore) -> Self {
        Self {
            tag: tag.to_string(),
            meta,
            arrays: store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect(),
        }
    }

    /// Loads values into a store with the same names and shapes.
    pub fn restore_into(&self, store: &mut ParameterStore) -> Result<()> {
        if self.arrays.len() != store.entries().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, model expects {}",
                self.arrays.len(),
                store.entries().len()
            )));
        }
        for (name, value) in &self.arrays {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{name}`")))?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}`: shape {:?} does not match model {:?}",
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.tag);
        put_str(&mut out, &serde_json::to_string(&self.meta)?);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, m) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols as u64).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * m.len() as u64;
        }
        for (_, m) in &self.arrays {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let tag = r.string()?;
        let meta = serde_json::from_str(&r.string()?)?;
        let n = r.u32()? as usize;
        let mut dir = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let offset = r.u64()? as usize;
            dir.push((name, rows, cols, offset));
        }
        let payload = &bytes[r.pos..];
        let mut arrays = Vec::with_capacity(n);
        for (name, rows, cols, offset) in dir {
            let len = rows
                .checked_mul(cols)
                .and_then(|k| k.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflow")))?;
            let chunk = payload
                .get(offset..offset + len)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: payload truncated")))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.push((name, Mat::from_vec(rows, cols, data)?));
        }
        Ok(Self { tag, meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::store::glorot_init;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParameterStore::new();
        store.add("a/kernel", glorot_init(3, 4, 1).unwrap()).unwrap();
        store
            .add("a/bias", Mat::row_vector(vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0]))
            .unwrap();
        let ck = Checkpoint::from_store("test-v1", serde_json::json!({"seed": 4, "x": 0.1}), &store);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.write(&p).unwrap();
        let back = Checkpoint::read(&p).unwrap();
        assert_eq!(back.tag, "test-v1");
        assert_eq!(back.meta, ck.meta);
        for ((na, a), (nb, b)) in ck.arrays.iter().zip(&back.arrays) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let mut fresh = store.clone();
        fresh.set_all(0.0);
        back.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh.entries()[0].value, store.entries()[0].value);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let store = ParameterStore::new();
        let mut bytes = Checkpoint::from_store("t", serde_json::Value::Null, &store).to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
    }
}
