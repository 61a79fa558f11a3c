//! Parameter checkpoints.
//!
//! Layout: magic `MKGC`, `u16` version, `u32` parameter count, then per
//! parameter a `u32` name length, the UTF-8 name, `u32` rows, `u32` cols and
//! `rows·cols` `f64` values, all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MKGC";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn checkpoint_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
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
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("missing MKGC checkpoint header".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let (rows, cols) = (r.u32()?, r.u32()?);
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("parameter size overflows".into()))?;
        let data = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(store)).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint into `store`, whose layout must match.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    store.load_values(parse_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Matrix::from_rows(&[vec![1.5, -2.0]]));
        s.add("b", Matrix::zeros(0, 3));
        s
    }

    #[test]
    fn exact_layout() {
        let b = checkpoint_bytes(&store());
        assert_eq!(&b[..4], b"MKGC");
        assert_eq!(&b[4..6], &1u16.to_le_bytes());
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(b[14], b'w');
        assert_eq!(&b[15..19], &1u32.to_le_bytes());
        assert_eq!(&b[19..23], &2u32.to_le_bytes());
        assert_eq!(&b[23..31], &1.5f64.to_le_bytes());
    }

    #[test]
    fn round_trip_and_errors() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mkgc");
        save_checkpoint(&s, &path).unwrap();
        let mut t = store();
        *t.value_mut(t.find("w").unwrap()) = Matrix::zeros(1, 2);
        load_checkpoint(&mut t, &path).unwrap();
        assert_eq!(t, s);

        let b = checkpoint_bytes(&s);
        assert!(parse_checkpoint(&b[..b.len() - 1]).is_err());
        assert!(parse_checkpoint(b"XXXX").is_err());
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(parse_checkpoint(&bad).is_err());

        let mut other = ParamStore::new();
        other.add("w", Matrix::zeros(2, 1));
        other.add("b", Matrix::zeros(0, 3));
        assert!(load_checkpoint(&mut other, &path).is_err());
    }
}
