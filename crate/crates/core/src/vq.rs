//! Nearest-neighbour vector quantization with straight-through gradients.

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::Rng;
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// Learnable code table plus the projections into and out of code space.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub entries: ParamId,
    pub size: usize,
    pub dim: usize,
    /// `d_model -> dim`, applied before quantization.
    pub down: Linear,
    /// `dim -> d_model`, applied after quantization.
    pub up: Linear,
}

impl Codebook {
    /// Entries start uniform in `±1/size`.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        size: usize,
        dim: usize,
        d_model: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::EmptyCodebook);
        }
        if size < 2 {
            return Err(Error::Invalid("codebook needs at least two entries".into()));
        }
        let bound = 1.0 / size as f64;
        let entries = crate::nn::uniform_param(store, format!("{name}.entries"), vec![size, dim], bound, rng);
        Ok(Codebook {
            entries,
            size,
            dim,
            down: Linear::new(store, &format!("{name}.down"), d_model, dim, true, rng),
            up: Linear::new(store, &format!("{name}.up"), dim, d_model, true, rng),
        })
    }
}

/// Index of the nearest entry of `entries[V, d]` to every row of
/// `features[.., d]` by squared Euclidean distance; ties go to the lowest
/// index. Also returns the selected entries, shaped like `features`.
pub fn quantize<T: Float>(features: &Tensor<T>, entries: &Tensor<T>) -> Result<(Vec<usize>, Tensor<T>)> {
    if entries.rank() != 2 || entries.shape()[0] == 0 {
        return Err(Error::EmptyCodebook);
    }
    let d = entries.shape()[1];
    if features.last_dim() != d {
        return Err(Error::shape(format!(
            "features of width {} against codebook of width {d}",
            features.last_dim()
        )));
    }
    if !features.all_finite() {
        return Err(Error::NonFinite { op: "quantize".into() });
    }
    let codes: Vec<usize> = (0..features.rows())
        .map(|r| nearest(features.row(r), entries))
        .collect();
    let mut data = Vec::with_capacity(features.numel());
    for &c in &codes {
        data.extend_from_slice(entries.row(c));
    }
    Ok((codes, Tensor::new(features.shape().to_vec(), data)?))
}

fn nearest<T: Float>(x: &[T], entries: &Tensor<T>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..entries.rows() {
        let e = entries.row(k);
        let dist: f64 = x
            .iter()
            .zip(e)
            .map(|(&a, &b)| {
                let t = a.as_f64() - b.as_f64();
                t * t
            })
            .sum();
        if dist < best_d {
            best_d = dist;
            best = k;
        }
    }
    best
}

/// Row lookup of `codes` in `entries[V, d]`, output `[codes.len(), d]`.
pub fn codes_to_vectors<T: Float>(codes: &[usize], entries: &Tensor<T>) -> Result<Tensor<T>> {
    if entries.rank() != 2 || entries.shape()[0] == 0 {
        return Err(Error::EmptyCodebook);
    }
    let (v, d) = (entries.shape()[0], entries.shape()[1]);
    let mut data = Vec::with_capacity(codes.len() * d);
    for &c in codes {
        if c >= v {
            return Err(Error::CodeOutOfRange { code: c, size: v });
        }
        data.extend_from_slice(entries.row(c));
    }
    Tensor::new(vec![codes.len(), d], data)
}

/// Result of quantizing a recorded feature tensor.
#[derive(Clone, Debug)]
pub struct Quantized {
    pub codes: Vec<usize>,
    /// Selected entries in the forward pass, identity gradient to the
    /// features in the backward pass.
    pub vectors: Var,
    /// `mean((features - sg[entries])^2)`: pulls features toward codes.
    pub commitment: Var,
    /// `mean((entries - sg[features])^2)`: pulls codes toward features.
    pub codebook_term: Var,
}

/// Quantizes `features[.., dim]` against the codebook entries on the graph.
pub fn quantize_on_graph<T: Float>(g: &mut Graph<'_, T>, features: Var, entries: ParamId) -> Result<Quantized> {
    let (codes, selected) = quantize(g.value(features), g.store().value(entries))?;
    let shape = selected.shape().to_vec();
    let vectors = g.straight_through(features, selected.clone());
    let (commitment, codebook_term) = vq_losses(g, features, entries, &codes, &shape)?;
    Ok(Quantized {
        codes,
        vectors,
        commitment,
        codebook_term,
    })
}

/// `(commitment, codebook_term)` for features quantized to `codes`.
pub fn vq_losses<T: Float>(
    g: &mut Graph<'_, T>,
    features: Var,
    entries: ParamId,
    codes: &[usize],
    shape: &[usize],
) -> Result<(Var, Var)> {
    let table = g.param(entries);
    let lead = &shape[..shape.len() - 1];
    let looked_up = g.embedding(table, codes, lead)?;
    let fixed_codes = g.detach(looked_up);
    let commitment = g.mse(features, fixed_codes);
    let fixed_features = g.detach(features);
    let codebook_term = g.mse(looked_up, fixed_features);
    Ok((commitment, codebook_term))
}
