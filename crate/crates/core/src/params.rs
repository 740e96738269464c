//! Flat little-endian binary format for parameter sets.
//!
//! ```text
//! magic    4 bytes  "LSPS"
//! version  u32      1
//! count    u32      number of tensors
//! per tensor:
//!   ndim   u32
//!   dims   ndim x u64
//!   data   prod(dims) x f32
//! ```

use sha2::{Digest, Sha256};

use crate::tensor::{Result, Tensor, TensorError, BYTES_PER_ELEMENT};

pub const PARAMS_MAGIC: &[u8; 4] = b"LSPS";
pub const PARAMS_VERSION: u32 = 1;

pub fn encode_params(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TensorError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
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

/// Decodes a blob produced by [`encode_params`], returning the tensors and
/// the number of bytes consumed.
pub fn decode_params_prefix(bytes: &[u8]) -> Result<(Vec<Tensor>, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != PARAMS_MAGIC {
        return Err(TensorError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != PARAMS_VERSION {
        return Err(TensorError::Corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(TensorError::Corrupt(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(BYTES_PER_ELEMENT))
            .ok_or_else(|| TensorError::Corrupt("tensor size overflows".into()))?;
        let data = r.take(n)?;
        tensors.push(Tensor::from_le_bytes(&shape, data)?);
    }
    Ok((tensors, r.pos))
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let (tensors, used) = decode_params_prefix(bytes)?;
    if used != bytes.len() {
        return Err(TensorError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - used
        )));
    }
    Ok(tensors)
}

/// SHA-256 over the encoded parameter set, hex encoded.
pub fn params_digest(tensors: &[Tensor]) -> String {
    hex::encode(Sha256::digest(encode_params(tensors)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let blob = encode_params(&[Tensor::full(&[2, 3], 1.5)]);
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert!(matches!(decode_params(&bad), Err(TensorError::Corrupt(_))));
        assert!(matches!(decode_params(&blob[..blob.len() - 1]), Err(TensorError::Corrupt(_))));
    }

    proptest! {
        #[test]
        fn roundtrip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..5), seed in any::<u32>()) {
            let tensors: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|j| (seed as f32) * 1e-3 + (i * 31 + j) as f32).collect();
                Tensor::new(s.clone(), data).unwrap()
            }).collect();
            let blob = encode_params(&tensors);
            prop_assert_eq!(decode_params(&blob).unwrap(), tensors.clone());
            prop_assert_eq!(params_digest(&tensors), params_digest(&decode_params(&blob).unwrap()));
        }
    }
}
