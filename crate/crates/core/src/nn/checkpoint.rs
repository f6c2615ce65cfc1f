//! Binary checkpoint: a versioned magic string, a UTF-8 metadata block, then the
//! named parameter list with a shape header per entry and little-endian `f64`
//! values.

use alloc::string::String;
use alloc::vec::Vec;

use super::{ParameterSet, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GSIDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParameterSet, metadata: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id);
        let value = params.value(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(value.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(value.cols() as u64).to_le_bytes());
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(alloc::format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

/// Parses a checkpoint, returning the parameters and the metadata block.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParameterSet, String)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(alloc::format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let metadata = r.string(meta_len)?;
    let count = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let ndim = r.u32()?;
        if ndim != 2 {
            return Err(Error::Checkpoint(alloc::format!("`{name}` has {ndim} dims")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| {
                let mut a = [0u8; 8];
                a.copy_from_slice(c);
                f64::from_le_bytes(a)
            })
            .collect();
        params.add(&name, Tensor::new(rows, cols, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((params, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 1..40), meta in "[a-z=\n ]{0,30}") {
            let mut ps = ParameterSet::new();
            ps.add("a", Tensor::row(&vals)).unwrap();
            ps.add("b.w", Tensor::column(&vals)).unwrap();
            let bytes = encode_checkpoint(&ps, &meta);
            let (back, m) = decode_checkpoint(&bytes).unwrap();
            prop_assert!(back.values_equal(&ps));
            prop_assert_eq!(m, meta);
        }
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let mut ps = ParameterSet::new();
        ps.add("w", Tensor::filled(2, 2, 1.5)).unwrap();
        let bytes = encode_checkpoint(&ps, "");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
    }
}
