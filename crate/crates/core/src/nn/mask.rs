use crate::error::{Error, Result};
use crate::tensor::Mask;

/// Self-attention visibility pattern of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Position `t` sees positions `0..=t`.
    Causal,
    /// Positions are grouped into consecutive blocks of `K`; a position sees
    /// its whole block and every earlier block.
    Sat(usize),
    /// Every position sees every position.
    Full,
}

/// Square `n x n` attention mask. Query `t` sees key `s` under `Sat(k)` iff
/// `s < (t / k + 1) * k`; `Causal` is `Sat(1)`. A group size above `n`
/// degenerates to `Full`.
pub fn build_mask(n: usize, kind: MaskKind) -> Result<Mask> {
    if n == 0 {
        return Err(Error::Invalid("mask length must be at least 1".into()));
    }
    let group = match kind {
        MaskKind::Causal => 1,
        MaskKind::Sat(0) => return Err(Error::Invalid("group size must be at least 1".into())),
        MaskKind::Sat(k) => k,
        MaskKind::Full => return Ok(Mask::full(n, n)),
    };
    let mut bits = Vec::with_capacity(n * n);
    for t in 0..n {
        let limit = (t / group + 1) * group;
        bits.extend((0..n).map(|s| s < limit));
    }
    Mask::new(1, n, n, bits)
}
