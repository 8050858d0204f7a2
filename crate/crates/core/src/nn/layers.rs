use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::StackConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Graph, Mask, ParamId, ParamStore, Tensor, Var};

const EMBED_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

pub(crate) fn uniform_param<T: Float>(
    store: &mut ParamStore<T>,
    name: String,
    shape: Vec<usize>,
    bound: f64,
    rng: &mut Rng,
) -> ParamId {
    let t = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)));
    store.add(name, t)
}

pub(crate) fn normal_param<T: Float>(
    store: &mut ParamStore<T>,
    name: String,
    shape: Vec<usize>,
    std: f64,
    rng: &mut Rng,
) -> ParamId {
    let dist = Normal::new(0.0, std).expect("positive std");
    let t = Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)));
    store.add(name, t)
}

/// Affine map over the last axis, weight stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(d_in)` for weight and bias.
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = uniform_param(store, format!("{name}.weight"), vec![d_in, d_out], bound, rng);
        let bias = bias.then(|| uniform_param(store, format!("{name}.bias"), vec![d_out], bound, rng));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![d], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![d])),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        Attention {
            query: Linear::new(store, &format!("{name}.query"), d, d, true, rng),
            // A key bias shifts every score in a row equally, so softmax
            // cancels it and its gradient is identically zero.
            key: Linear::new(store, &format!("{name}.key"), d, d, false, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng),
            heads,
        }
    }

    /// `queries[B, n, d]` attend over `keys[B, m, d]`; `mask` is `[1 | B, n, m]`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        keys: Var,
        mask: &Mask,
    ) -> Result<Var> {
        let d = self.query.d_out;
        let dh = d / self.heads;
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, keys);
        let q = g.split_heads(q, self.heads);
        let k = g.split_heads(k, self.heads);
        let v = g.split_heads(v, self.heads);
        let scores = g.bmm(q, k, true, T::from_f64(1.0 / (dh as f64).sqrt()));
        let probs = g.masked_softmax(scores, mask)?;
        let ctx = g.bmm(probs, v, false, T::one());
        let ctx = g.merge_heads(ctx, self.heads);
        Ok(self.out.forward(g, ctx))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        d_ff: usize,
        rng: &mut Rng,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, d_ff, true, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d, true, rng),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm block: self-attention then feed-forward, each residual.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: Attention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &StackConfig,
        rng: &mut Rng,
    ) -> Self {
        EncoderBlock {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), cfg.d_model),
            attn: Attention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), cfg.d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.d_model, cfg.d_ff, rng),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, mask: &Mask) -> Result<Var> {
        let h = self.norm_attn.forward(g, x);
        let h = self.attn.forward(g, h, h, mask)?;
        let x = g.add(x, h);
        let h = self.norm_ff.forward(g, x);
        let h = self.ff.forward(g, h);
        Ok(g.add(x, h))
    }
}

/// Stack of encoder blocks with bidirectional attention. There is no final
/// normalization, so a stack whose weights are all zero is the identity.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlock>,
}

impl EncoderStack {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &StackConfig,
        rng: &mut Rng,
    ) -> Self {
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(store, &format!("{name}.layer{i}"), cfg, rng))
            .collect();
        EncoderStack { blocks }
    }

    /// `x[B, n, d] -> [B, n, d]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.shape(x)[1];
        let mask = Mask::full(n, n);
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, h, &mask)?;
        }
        Ok(h)
    }
}

/// Linear patch projection plus learned positional embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub patches: usize,
}

impl PatchEmbed {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        patch_dim: usize,
        patches: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Self {
        PatchEmbed {
            proj: Linear::new(store, &format!("{name}.proj"), patch_dim, d, true, rng),
            pos: normal_param(store, format!("{name}.pos"), vec![patches, d], EMBED_STD, rng),
            patches,
        }
    }

    /// `patches[B, N, patch_dim] -> [B, N, d]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let n = g.shape(patches)[1];
        if n != self.patches {
            return Err(Error::shape(format!(
                "expected {} patches, got {n}",
                self.patches
            )));
        }
        let h = self.proj.forward(g, patches);
        let pos = g.param(self.pos);
        Ok(g.add_broadcast(h, pos))
    }
}

/// Patch embedding followed by an encoder stack.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub embed: PatchEmbed,
    pub stack: EncoderStack,
}

impl VisionEncoder {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &StackConfig,
        patch_dim: usize,
        patches: usize,
        rng: &mut Rng,
    ) -> Self {
        VisionEncoder {
            embed: PatchEmbed::new(store, &format!("{name}.embed"), patch_dim, patches, cfg.d_model, rng),
            stack: EncoderStack::new(store, name, cfg, rng),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let h = self.embed.forward(g, patches)?;
        self.stack.forward(g, h)
    }
}

/// Pre-norm block: masked self-attention, cross-attention over a memory,
/// feed-forward; each residual.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_cross: LayerNorm,
    pub cross_attn: Attention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &StackConfig,
        rng: &mut Rng,
    ) -> Self {
        let d = cfg.d_model;
        DecoderBlock {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), d),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), d),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.d_ff, rng),
        }
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        self_mask: &Mask,
        memory: Var,
        memory_mask: &Mask,
    ) -> Result<Var> {
        let h = self.norm_self.forward(g, x);
        let h = self.self_attn.forward(g, h, h, self_mask)?;
        let x = g.add(x, h);
        let h = self.norm_cross.forward(g, x);
        let h = self.cross_attn.forward(g, h, memory, memory_mask)?;
        let x = g.add(x, h);
        let h = self.norm_ff.forward(g, x);
        let h = self.ff.forward(g, h);
        Ok(g.add(x, h))
    }
}

/// Decoder blocks followed by a final normalization.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
}

impl DecoderStack {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &StackConfig,
        rng: &mut Rng,
    ) -> Self {
        let blocks = (0..cfg.layers)
            .map(|i| DecoderBlock::new(store, &format!("{name}.layer{i}"), cfg, rng))
            .collect();
        DecoderStack {
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d_model),
        }
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        self_mask: &Mask,
        memory: Var,
        memory_mask: &Mask,
    ) -> Result<Var> {
        let n = g.shape(x)[1];
        if self_mask.nq() != n || self_mask.nk() != n {
            return Err(Error::shape(format!(
                "self mask is {}x{} for a sequence of length {n}",
                self_mask.nq(),
                self_mask.nk()
            )));
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, h, self_mask, memory, memory_mask)?;
        }
        Ok(self.norm.forward(g, h))
    }
}

/// Token decoder: embedding plus learned positions, a decoder stack and an
/// unshared output projection.
#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub stack: DecoderStack,
    pub head: Linear,
    pub input_vocab: usize,
    pub output_vocab: usize,
    pub max_len: usize,
}

impl TextDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &StackConfig,
        input_vocab: usize,
        output_vocab: usize,
        max_len: usize,
        rng: &mut Rng,
    ) -> Self {
        let d = cfg.d_model;
        TextDecoder {
            embed: normal_param(store, format!("{name}.embed"), vec![input_vocab, d], EMBED_STD, rng),
            pos: normal_param(store, format!("{name}.pos"), vec![max_len, d], EMBED_STD, rng),
            stack: DecoderStack::new(store, name, cfg, rng),
            head: Linear::new(store, &format!("{name}.head"), d, output_vocab, true, rng),
            input_vocab,
            output_vocab,
            max_len,
        }
    }

    /// Embeds `ids` (`batch * len` ids, row-major) and adds positions.
    pub fn embed<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        ids: &[usize],
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        if len > self.max_len {
            return Err(Error::Invalid(format!(
                "sequence length {len} exceeds decoder maximum {}",
                self.max_len
            )));
        }
        let table = g.param(self.embed);
        let x = g.embedding(table, ids, &[batch, len])?;
        let pos_table = g.param(self.pos);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.embedding(pos_table, &positions, &[len])?;
        Ok(g.add_broadcast(x, pos))
    }

    /// Hidden states `[B, len, d]` of an embedded input sequence.
    pub fn hidden<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        self_mask: &Mask,
        memory: Var,
        memory_mask: &Mask,
    ) -> Result<Var> {
        self.stack.forward(g, x, self_mask, memory, memory_mask)
    }

    /// Returns `(hidden [B, len, d], logits [B, len, output_vocab])`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        ids: &[usize],
        batch: usize,
        len: usize,
        self_mask: &Mask,
        memory: Var,
        memory_mask: &Mask,
    ) -> Result<(Var, Var)> {
        let x = self.embed(g, ids, batch, len)?;
        let h = self.hidden(g, x, self_mask, memory, memory_mask)?;
        let logits = self.head.forward(g, h);
        Ok((h, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mask, MaskKind};
    use crate::rng::rng_for;
    use crate::tensor::{finite_diff_check, FdOptions};

    fn cfg() -> StackConfig {
        StackConfig {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            layers: 2,
        }
    }

    fn input(store_len: usize, n: usize, d: usize, scale: f64) -> Tensor<f64> {
        Tensor::from_fn(vec![1, n, d], |i| ((i * 37 + store_len) % 17) as f64 * scale - 0.5)
    }

    #[test]
    fn zero_weight_encoder_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(0, "test");
        let enc = EncoderStack::new(&mut store, "enc", &cfg(), &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let x = input(0, 5, 8, 0.1);
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let y = enc.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(1, "test");
        let enc = EncoderStack::new(&mut store, "enc", &cfg(), &mut rng);
        let x = input(1, 4, 8, 0.1);
        let report = finite_diff_check(
            &store,
            |g| {
                let xv = g.constant(x.clone());
                let y = enc.forward(g, xv)?;
                let sq = g.mul(y, y);
                Ok(g.mean(sq))
            },
            &FdOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    fn decoder_hidden(dec: &TextDecoder, store: &ParamStore<f64>, ids: &[usize], kind: MaskKind) -> Tensor<f64> {
        let mut g = Graph::inference(store);
        let mem = g.constant(input(3, 3, 8, 0.2));
        let mask = build_mask(ids.len(), kind).unwrap();
        let (h, _) = dec
            .forward(&mut g, ids, 1, ids.len(), &mask, mem, &Mask::full(ids.len(), 3))
            .unwrap();
        g.value(h).clone()
    }

    #[test]
    fn sat_group_peers_see_each_other_but_causal_does_not() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(2, "test");
        let dec = TextDecoder::new(&mut store, "dec", &cfg(), 10, 10, 8, &mut rng);
        let a = [1, 2, 3, 4];
        let b = [1, 7, 3, 4];
        let sat_a = decoder_hidden(&dec, &store, &a, MaskKind::Sat(2));
        let sat_b = decoder_hidden(&dec, &store, &b, MaskKind::Sat(2));
        assert_ne!(sat_a.row(0), sat_b.row(0));
        let ca = decoder_hidden(&dec, &store, &a, MaskKind::Causal);
        let cb = decoder_hidden(&dec, &store, &b, MaskKind::Causal);
        assert_eq!(ca.row(0), cb.row(0));
        assert_ne!(ca.row(1), cb.row(1));
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(3, "test");
        let dec = TextDecoder::new(&mut store, "dec", &cfg(), 10, 12, 8, &mut rng);
        let a = [1, 2, 3, 4, 5];
        let b = [1, 2, 3, 9, 0];
        let ha = decoder_hidden(&dec, &store, &a, MaskKind::Causal);
        let hb = decoder_hidden(&dec, &store, &b, MaskKind::Causal);
        for t in 0..3 {
            assert_eq!(ha.row(t), hb.row(t));
        }
    }

    #[test]
    fn logits_have_vocab_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(4, "test");
        let dec = TextDecoder::new(&mut store, "dec", &cfg(), 10, 37, 8, &mut rng);
        let mut g = Graph::inference(&store);
        let mem = g.constant(input(3, 3, 8, 0.2));
        let mask = build_mask(5, MaskKind::Causal).unwrap();
        let (_, logits) = dec
            .forward(&mut g, &[1, 2, 3, 4, 5], 1, 5, &mask, mem, &Mask::full(5, 3))
            .unwrap();
        assert_eq!(g.shape(logits), [1, 5, 37]);
    }

    #[test]
    fn mismatched_self_mask_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(5, "test");
        let dec = TextDecoder::new(&mut store, "dec", &cfg(), 10, 10, 8, &mut rng);
        let mut g = Graph::inference(&store);
        let mem = g.constant(input(3, 3, 8, 0.2));
        let mask = build_mask(4, MaskKind::Causal).unwrap();
        assert!(dec
            .forward(&mut g, &[1, 2, 3], 1, 3, &mask, mem, &Mask::full(3, 3))
            .is_err());
    }
}
