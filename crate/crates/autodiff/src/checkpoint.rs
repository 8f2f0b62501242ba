//! Binary tensor container.
//!
//! Layout, little-endian: magic `DANL1`, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rank, `u64` per dimension and the
//! `f64` payload in row-major order.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"DANL1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a tensor checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("unsupported tensor rank {0}")]
    BadRank(u32),
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
}

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf, pos: MAGIC.len() };
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = r.u32()?;
        let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let (rows, cols) = match dims[..] {
            [] => (1, 1),
            [n] => (1, n),
            [a, b] => (a, b),
            _ => return Err(CheckpointError::BadRank(rank)),
        };
        let bytes = r.take(rows.saturating_mul(cols).saturating_mul(8))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(rows, cols, data)));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Trailing(buf.len() - r.pos));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(
            shapes in proptest::collection::vec((0usize..4, 0usize..4), 0..5),
            fill in any::<f64>().prop_filter("not nan", |x| !x.is_nan()),
        ) {
            let tensors: Vec<(String, Tensor)> = shapes
                .iter()
                .enumerate()
                .map(|(i, &(r, c))| (format!("t{i}"), Tensor::full(r, c, fill)))
                .collect();
            prop_assert_eq!(decode(&encode(&tensors)).unwrap(), tensors);
        }
    }

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a".into(), Tensor::from_rows(&[[1.0, -2.5], [3.0, 1e-300]])),
            ("layer.0/w".into(), Tensor::column(vec![f64::MAX, 0.0, -0.0])),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let back = decode(&encode(&sample())).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back[1].1.data()[2].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..5], b"DANL1");
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        assert_eq!(bytes[13], b'a');
    }

    #[test]
    fn rejects_corruption() {
        assert!(matches!(decode(b"DANL2\0\0\0\0"), Err(CheckpointError::BadMagic)));
        let bytes = encode(&sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(CheckpointError::Trailing(1))));
    }
}
