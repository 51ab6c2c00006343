//! `IDSC` raster files: a 20-byte header then little-endian f32 samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RASTER_MAGIC: &[u8; 4] = b"IDSC";
pub const RASTER_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub fn encode_raster(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    out.extend_from_slice(RASTER_MAGIC);
    for v in [RASTER_VERSION, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::Format { offset, msg: "truncated header".into() })
}

pub fn decode_raster(bytes: &[u8]) -> Result<Tensor> {
    if bytes.get(..4) != Some(RASTER_MAGIC.as_slice()) {
        return Err(Error::Format { offset: 0, msg: "bad magic".into() });
    }
    let version = u32_at(bytes, 4)?;
    if version != RASTER_VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let mut dims = [0usize; 3];
    for (k, d) in dims.iter_mut().enumerate() {
        let offset = 8 + 4 * k;
        *d = u32_at(bytes, offset)? as usize;
        if *d == 0 {
            return Err(Error::Format { offset, msg: "zero extent".into() });
        }
    }
    let n = dims.iter().product::<usize>();
    let expected = HEADER_LEN + 4 * n;
    if bytes.len() < expected {
        let offset = HEADER_LEN + 4 * ((bytes.len() - HEADER_LEN) / 4);
        return Err(Error::Format { offset, msg: format!("truncated data, expected {expected} bytes") });
    }
    if bytes.len() > expected {
        return Err(Error::Format { offset: expected, msg: "trailing bytes".into() });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
        .collect();
    Tensor::new(dims.to_vec(), data)
}

pub fn write_raster(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_raster(t)?)?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_raster(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_layout() {
        let t = Tensor::new(vec![1, 1, 1], vec![3.5]).unwrap();
        let bytes = encode_raster(&t).unwrap();
        let mut expect = b"IDSC".to_vec();
        for v in [1u32, 1, 1, 1] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(&[0x00, 0x00, 0x60, 0x40]);
        assert_eq!(bytes, expect);
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn errors_name_offsets() {
        let good = encode_raster(&Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_raster(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_raster(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode_raster(&good[..30]), Err(Error::Format { offset: 28, .. })));
        assert!(matches!(decode_raster(&good[..10]), Err(Error::Format { offset: 8, .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_raster(&long), Err(Error::Format { offset: 36, .. })));
    }

    #[test]
    fn rejects_non_map_tensors() {
        assert!(encode_raster(&Tensor::zeros(vec![4]).unwrap()).is_err());
    }
}
