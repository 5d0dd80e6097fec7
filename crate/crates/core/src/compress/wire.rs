//! Little-endian binary layout for payloads.
//!
//! ```text
//! offset  size  field
//! 0       1     tag: 0x01 low-rank, 0x02 top-k
//! 1       8     rows      (u64)
//! 9       8     cols      (u64)
//! 17      8     r or k    (u64)
//! 25      ...   low-rank: P̂ (rows·r f64, row-major) then Q (cols·r f64, row-major)
//!               top-k:    k indices (u64) then k values (f64)
//! ```

use super::{LowRankPayload, TopKPayload};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const TAG_LOWRANK: u8 = 0x01;
pub const TAG_TOPK: u8 = 0x02;
pub const HEADER_LEN: usize = 25;

fn header(out: &mut Vec<u8>, tag: u8, rows: usize, cols: usize, r: usize) {
    out.push(tag);
    for v in [rows, cols, r] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
}

pub fn encode_lowrank(p: &LowRankPayload) -> Vec<u8> {
    let (rows, cols) = p.original_shape;
    let mut out = Vec::with_capacity(encoded_len_lowrank(rows, cols, p.rank()));
    header(&mut out, TAG_LOWRANK, rows, cols, p.rank());
    for v in p.p_hat.data().iter().chain(p.q.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_topk(p: &TopKPayload) -> Vec<u8> {
    let (rows, cols) = p.original_shape;
    let mut out = Vec::with_capacity(encoded_len_topk(p.k()));
    header(&mut out, TAG_TOPK, rows, cols, p.k());
    for &i in &p.indices {
        out.extend_from_slice(&(i as u64).to_le_bytes());
    }
    for v in &p.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encoded_len_lowrank(rows: usize, cols: usize, rank: usize) -> usize {
    HEADER_LEN + 8 * rank * (rows + cols)
}

pub fn encoded_len_topk(k: usize) -> usize {
    HEADER_LEN + 16 * k
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take8(&mut self) -> Result<[u8; 8]> {
        let bytes = self
            .buf
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| Error::Decode(format!("truncated at byte {}", self.pos)))?;
        self.pos += 8;
        Ok(bytes.try_into().expect("8 bytes"))
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take8()?))
            .map_err(|_| Error::Decode("dimension overflows usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.take8()?))).collect()
    }

    fn header(&mut self, expect: u8) -> Result<(usize, usize, usize)> {
        let tag = *self.buf.first().ok_or_else(|| Error::Decode("empty buffer".into()))?;
        if tag != expect {
            return Err(Error::Decode(format!("unexpected tag {tag:#04x}")));
        }
        self.pos = 1;
        Ok((self.u64()?, self.u64()?, self.u64()?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Decode(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_lowrank(buf: &[u8]) -> Result<LowRankPayload> {
    let mut rd = Reader { buf, pos: 0 };
    let (rows, cols, rank) = rd.header(TAG_LOWRANK)?;
    if buf.len() != encoded_len_lowrank(rows, cols, rank) {
        return Err(Error::Decode("length does not match header".into()));
    }
    let p_hat = Matrix::new(rows, rank, rd.f64s(rows * rank)?)?;
    let q = Matrix::new(cols, rank, rd.f64s(cols * rank)?)?;
    rd.finish()?;
    Ok(LowRankPayload {
        p_hat,
        q,
        original_shape: (rows, cols),
    })
}

pub fn decode_topk(buf: &[u8]) -> Result<TopKPayload> {
    let mut rd = Reader { buf, pos: 0 };
    let (rows, cols, k) = rd.header(TAG_TOPK)?;
    if buf.len() != encoded_len_topk(k) {
        return Err(Error::Decode("length does not match header".into()));
    }
    let indices = (0..k).map(|_| rd.u64()).collect::<Result<Vec<_>>>()?;
    let values = rd.f64s(k)?;
    rd.finish()?;
    Ok(TopKPayload {
        indices,
        values,
        original_shape: (rows, cols),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{lowrank_compress, topk_compress, LowRankState};
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let p = TopKPayload {
            indices: vec![3],
            values: vec![1.5],
            original_shape: (2, 4),
        };
        let bytes = encode_topk(&p);
        assert_eq!(bytes.len(), 41);
        assert_eq!(bytes[0], TAG_TOPK);
        assert_eq!(&bytes[1..9], &2u64.to_le_bytes());
        assert_eq!(&bytes[9..17], &4u64.to_le_bytes());
        assert_eq!(&bytes[17..25], &1u64.to_le_bytes());
        assert_eq!(&bytes[25..33], &3u64.to_le_bytes());
        assert_eq!(&bytes[33..41], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_lowrank(&[]).is_err());
        assert!(decode_lowrank(&[TAG_TOPK; 25]).is_err());
        let p = lowrank_compress(&Matrix::seeded_normal(4, 3, 1), &mut LowRankState::new(1, 1)).unwrap();
        let mut bytes = encode_lowrank(&p);
        bytes.pop();
        assert!(decode_lowrank(&bytes).is_err());
    }

    #[test]
    fn identical_bytes_for_identical_seed() {
        let m = Matrix::seeded_normal(16, 12, 5);
        let a = encode_lowrank(&lowrank_compress(&m, &mut LowRankState::new(3, 8)).unwrap());
        let b = encode_lowrank(&lowrank_compress(&m, &mut LowRankState::new(3, 8)).unwrap());
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn lowrank_round_trip(n in 1usize..12, m in 1usize..12, r in 1usize..6, seed in any::<u64>()) {
            let mat = Matrix::seeded_normal(n, m, seed);
            let p = lowrank_compress(&mat, &mut LowRankState::new(r, seed)).unwrap();
            let bytes = encode_lowrank(&p);
            prop_assert_eq!(bytes.len(), encoded_len_lowrank(n, m, p.rank()));
            prop_assert_eq!(decode_lowrank(&bytes).unwrap(), p);
        }

        #[test]
        fn topk_round_trip(n in 1usize..12, m in 1usize..12, seed in any::<u64>(), frac in 0.0f64..1.0) {
            let mat = Matrix::seeded_normal(n, m, seed);
            let k = 1 + ((n * m - 1) as f64 * frac) as usize;
            let p = topk_compress(&mat, k).unwrap();
            prop_assert_eq!(decode_topk(&encode_topk(&p)).unwrap(), p);
        }
    }
}
