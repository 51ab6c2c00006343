//! `IDSC-CKPT` parameter files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CKPT_MAGIC: &[u8; 9] = b"IDSC-CKPT";
pub const CKPT_VERSION: u32 = 1;

/// Magic, version, record count, then per record: name length, UTF-8 name,
/// rank, dimensions and little-endian f32 values. All integers are u32 LE.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = CKPT_MAGIC.to_vec();
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(&mut out, CKPT_VERSION as usize);
    put(&mut out, store.len());
    for (name, t) in store.iter() {
        put(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.rank());
        for &d in t.shape() {
            put(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format { offset: self.pos, msg: format!("truncated {what}") })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CKPT_MAGIC.len(), "magic").ok() != Some(CKPT_MAGIC.as_slice()) {
        return Err(Error::Format { offset: 0, msg: "bad magic".into() });
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != CKPT_VERSION as usize {
        return Err(Error::Format { offset: at, msg: format!("unsupported version {version}") });
    }
    let count = r.u32("record count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format { offset: at + 4, msg: "name is not UTF-8".into() })?
            .to_string();
        let at = r.pos;
        let rank = r.u32("rank")?;
        if rank == 0 {
            return Err(Error::Format { offset: at, msg: format!("zero rank for {name:?}") });
        }
        let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n > 0).ok_or_else(|| Error::Format { offset: at, msg: format!("bad shape {shape:?}") })?;
        let raw = r.take(n.checked_mul(4).unwrap_or(usize::MAX), "values")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("four bytes"))).collect();
        store
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::Format { offset: at, msg: e.to_string() })?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format { offset: r.pos, msg: "trailing bytes".into() });
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(vec![1], vec![1.5]).unwrap()).unwrap();
        s.insert("bb", Tensor::new(vec![2, 1], vec![-0.0, f32::MIN_POSITIVE]).unwrap()).unwrap();
        let bytes = encode_checkpoint(&s);
        assert_eq!(&bytes[..9], b"IDSC-CKPT");
        assert_eq!(bytes.len(), 9 + 8 + (4 + 1 + 4 + 4 + 4) + (4 + 2 + 4 + 8 + 8));
        assert!(decode_checkpoint(&bytes).unwrap().bit_eq(&s));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
