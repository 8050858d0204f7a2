use crate::error::{Error, Result};

/// Visibility pattern for attention scores, shape `[batch, nq, nk]` where a
/// `batch` of 1 broadcasts over every score matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    nq: usize,
    nk: usize,
    bits: Vec<bool>,
}

impl Mask {
    /// Builds a mask, rejecting any row with no visible key.
    pub fn new(batch: usize, nq: usize, nk: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != batch * nq * nk || batch == 0 {
            return Err(Error::shape(format!(
                "mask bits {} do not match [{batch}, {nq}, {nk}]",
                bits.len()
            )));
        }
        for r in 0..batch * nq {
            if !bits[r * nk..(r + 1) * nk].iter().any(|&b| b) {
                return Err(Error::EmptyMaskRow { row: r % nq.max(1) });
            }
        }
        Ok(Mask { batch, nq, nk, bits })
    }

    /// Every key visible.
    pub fn full(nq: usize, nk: usize) -> Self {
        Mask {
            batch: 1,
            nq,
            nk,
            bits: vec![true; nq * nk],
        }
    }

    /// Per-example key lengths: query rows of item `b` see keys `< lens[b]`.
    pub fn key_lengths(nq: usize, nk: usize, lens: &[usize]) -> Result<Self> {
        let mut bits = Vec::with_capacity(lens.len() * nq * nk);
        for &len in lens {
            for _ in 0..nq {
                bits.extend((0..nk).map(|k| k < len));
            }
        }
        Mask::new(lens.len(), nq, nk, bits)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn nq(&self) -> usize {
        self.nq
    }

    pub fn nk(&self) -> usize {
        self.nk
    }

    pub fn visible(&self, b: usize, q: usize, k: usize) -> bool {
        self.bits[(b * self.nq + q) * self.nk + k]
    }

    pub(crate) fn row(&self, b: usize, q: usize) -> &[bool] {
        let start = (b * self.nq + q) * self.nk;
        &self.bits[start..start + self.nk]
    }
}
