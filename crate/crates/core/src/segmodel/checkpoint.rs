//! Versioned little-endian binary format for decoder heads.
//!
//! Layout: magic `RSDH`, `u32` version, `u32` flags (bit 0: trained),
//! `u32` class count, `u32` feature dim, one `u32` per class id, then the
//! `f32` weights (class-major) followed by the `f32` biases.

use super::head::DecoderHead;
use crate::error::{Error, Result};
use crate::image::ClassId;

pub const MAGIC: &[u8; 4] = b"RSDH";
pub const VERSION: u32 = 1;

pub fn to_bytes(head: &DecoderHead) -> Vec<u8> {
    let n = head.classes().len();
    let mut out = Vec::with_capacity(20 + 4 * n + 4 * (head.weights().len() + n));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(head.is_trained() as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(head.dim() as u32).to_le_bytes());
    for &c in head.classes() {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for v in head.weights().iter().chain(head.bias()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<DecoderHead> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let flags = c.u32()?;
    let n = c.u32()? as usize;
    let dim = c.u32()? as usize;
    let classes = (0..n)
        .map(|_| {
            let v = c.u32()?;
            ClassId::try_from(v).map_err(|_| Error::Checkpoint(format!("class id {v} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = (0..n * dim).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
    let bias = (0..n).map(|_| c.f32()).collect::<Result<Vec<_>>>()?;
    if c.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    DecoderHead::from_parts(classes, dim, weights, bias, flags & 1 == 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            classes in proptest::collection::btree_set(0u8..40, 1..6),
            dim in 1usize..8,
            seed in any::<u64>(),
            trained in any::<bool>(),
        ) {
            use rand::Rng;
            let classes: Vec<ClassId> = classes.into_iter().collect();
            let mut rng = crate::rng::stream(seed, "ckpt", &[]);
            let n = classes.len();
            let head = DecoderHead::from_parts(
                classes,
                dim,
                (0..n * dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                trained,
            ).unwrap();
            let bytes = to_bytes(&head);
            prop_assert_eq!(bytes.len(), 20 + 4 * n + 4 * n * (dim + 1));
            prop_assert_eq!(from_bytes(&bytes).unwrap(), head);
        }
    }

    #[test]
    fn rejects_corrupt_blobs() {
        let head = DecoderHead::zeroed(&[0, 1], 3).unwrap();
        let bytes = to_bytes(&head);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(from_bytes(&ver).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
