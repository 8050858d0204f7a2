//! The full in-image translation model: background, code and translation
//! branches, the subword-to-character adapter, the code decoder, both
//! training objectives and end-to-end inference.

mod batch;
mod config;
mod decode;
pub mod gradcheck;
mod heads;
pub mod train;

pub use batch::{Batch, SourceInputs, TokenBatch, Vocabs};
pub use config::{DecodeConfig, ModelConfig, S2CVariant, Strategy};
pub use decode::{Translation, S2CDecode};
pub use heads::{FeaturePyramid, ImageHead};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{build_mask, EncoderStack, Linear, MaskKind, TextDecoder, VisionEncoder};
use crate::rng::rng_for;
use crate::tensor::{Float, Graph, Mask, ParamStore, Tensor, Var};
use crate::vq::{self, Codebook};

/// Parameter-name prefixes of the modules trained in stage 2. Everything
/// else belongs to stage 1.
pub const STAGE2_PREFIXES: [&str; 2] = ["s2c.", "two_pass."];

pub fn is_stage2_param(name: &str) -> bool {
    STAGE2_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug)]
pub enum S2CModule {
    None,
    Ctc { up: Linear, head: Linear },
    Decoder(TextDecoder),
}

/// Handles into a [`ParamStore`] for every module.
#[derive(Clone, Debug)]
pub struct VisTrans {
    pub cfg: ModelConfig,
    pub back_encoder: VisionEncoder,
    pub back_decoder1: EncoderStack,
    pub back_decoder2: EncoderStack,
    pub code_encoder: VisionEncoder,
    pub code_decoder1: EncoderStack,
    pub code_decoder2: EncoderStack,
    pub codebook: Codebook,
    pub img_decoder: EncoderStack,
    pub back_head: ImageHead,
    pub code_head: ImageHead,
    pub img_head: ImageHead,
    pub mt_encoder: VisionEncoder,
    pub ocr_decoder: TextDecoder,
    pub one_pass: TextDecoder,
    pub s2c: S2CModule,
    pub two_pass: TextDecoder,
    pub perceptual: FeaturePyramid,
}

/// Named scalar loss terms in the order they are summed.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

/// A recorded loss and its parts.
pub struct Loss {
    pub total: Var,
    pub parts: Vec<(&'static str, Var)>,
    /// Stage 1 only: selected codes and the quantizer's input features.
    pub quantized: Option<(Vec<usize>, Var)>,
}

impl Loss {
    fn from_parts<T: Float>(g: &mut Graph<'_, T>, parts: Vec<(&'static str, Var)>) -> Self {
        let mut total = parts[0].1;
        for &(_, v) in &parts[1..] {
            total = g.add(total, v);
        }
        Loss {
            total,
            parts,
            quantized: None,
        }
    }

    pub fn report<T: Float>(&self, g: &Graph<'_, T>) -> LossReport {
        LossReport {
            total: g.value(self.total).item().as_f64(),
            components: self.parts.iter().map(|&(n, v)| (n, g.value(v).item().as_f64())).collect(),
        }
    }
}

/// Outputs of the code branch for a batch of target images.
pub struct CodeBranch {
    pub codes: Vec<usize>,
    /// Quantizer input, `[B, N, codebook_dim]`.
    pub features: Var,
    pub h_code: Var,
    pub i_code1: Var,
    pub i_code2: Var,
    pub commitment: Var,
    pub codebook_term: Var,
}

/// Stage-2 intermediate: character states and the character loss.
pub struct CharStates {
    pub h_char: Var,
    /// Valid rows of `h_char` per item.
    pub lengths: Vec<usize>,
    pub loss: Option<Var>,
    /// Character logits of the decoder variants.
    pub logits: Option<Var>,
}

/// Quantizer decisions and stop-gradient values held fixed for gradient
/// checking.
#[derive(Clone, Debug)]
pub struct FrozenVq<T> {
    pub codes: Vec<usize>,
    /// Encoder features in codebook space.
    pub features: Tensor<T>,
    /// Selected entries, shaped like `features`.
    pub selected: Tensor<T>,
}

fn constant<T: Float>(g: &mut Graph<'_, T>, t: &Tensor<f32>) -> Var {
    g.constant(t.cast())
}

impl VisTrans {
    pub fn new<T: Float>(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, "init");
        let rng = &mut rng;
        let vit = cfg.stack(cfg.vit_layers);
        let patch_dim = cfg.patch * cfg.patch * cfg.channels;
        let mt_patch_dim = cfg.mt_patch * cfg.mt_patch * cfg.channels;
        let n = cfg.patches();
        let d = cfg.d_model;
        let back_encoder = VisionEncoder::new(store, "back_enc", &vit, patch_dim, n, rng);
        let back_decoder1 = EncoderStack::new(store, "back_dec1", &vit, rng);
        let back_decoder2 = EncoderStack::new(store, "back_dec2", &vit, rng);
        let code_encoder = VisionEncoder::new(store, "code_enc", &vit, patch_dim, n, rng);
        let code_decoder1 = EncoderStack::new(store, "code_dec1", &vit, rng);
        let code_decoder2 = EncoderStack::new(store, "code_dec2", &vit, rng);
        let codebook = Codebook::new(store, "codebook", cfg.codebook_size, cfg.codebook_dim, d, rng)?;
        let img_decoder = EncoderStack::new(store, "img_dec", &vit, rng);
        let back_head = ImageHead::new(store, "head_back", cfg, rng);
        let code_head = ImageHead::new(store, "head_code", cfg, rng);
        let img_head = ImageHead::new(store, "head_img", cfg, rng);
        let mt_encoder = VisionEncoder::new(store, "mt_enc", &cfg.stack(cfg.mt_layers), mt_patch_dim, cfg.mt_patches(), rng);
        let text = cfg.stack(cfg.text_layers);
        let sub = cfg.subword_vocab;
        let ocr_decoder = TextDecoder::new(store, "ocr_dec", &text, sub, sub, cfg.max_subword_len + 1, rng);
        let one_pass = TextDecoder::new(store, "one_pass", &text, sub, sub, cfg.max_subword_len + 1, rng);
        let s2c = match cfg.s2c {
            S2CVariant::None => S2CModule::None,
            S2CVariant::Ctc => S2CModule::Ctc {
                up: Linear::new(store, "s2c.up", d, 2 * d, true, rng),
                head: Linear::new(store, "s2c.head", d, cfg.char_vocab, true, rng),
            },
            S2CVariant::At | S2CVariant::Sat(_) => S2CModule::Decoder(TextDecoder::new(
                store,
                "s2c",
                &cfg.stack(cfg.s2c_layers),
                cfg.char_vocab,
                cfg.char_vocab,
                cfg.max_char_len + cfg.s2c.group(),
                rng,
            )),
        };
        let two_pass = TextDecoder::new(
            store,
            "two_pass",
            &cfg.stack(cfg.code_layers),
            cfg.codebook_size + 1,
            cfg.codebook_size,
            cfg.code_len(),
            rng,
        );
        Ok(VisTrans {
            cfg: cfg.clone(),
            back_encoder,
            back_decoder1,
            back_decoder2,
            code_encoder,
            code_decoder1,
            code_decoder2,
            codebook,
            img_decoder,
            back_head,
            code_head,
            img_head,
            mt_encoder,
            ocr_decoder,
            one_pass,
            s2c,
            two_pass,
            perceptual: FeaturePyramid::random(cfg.channels, &cfg.perceptual_channels, cfg.seed),
        })
    }

    /// Begin-of-sequence id on the code decoder's input side.
    pub fn code_bos(&self) -> usize {
        self.cfg.codebook_size
    }

    /// Freezes every stage-1 parameter and unfreezes the stage-2 modules.
    pub fn freeze_stage1<T: Float>(store: &mut ParamStore<T>) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            p.requires_grad = is_stage2_param(&p.name);
        }
    }

    /// `MSE + λ_p · perceptual`.
    pub fn image_loss<T: Float>(&self, g: &mut Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
        let pixel = g.mse(pred, target);
        if self.cfg.perceptual_weight == 0.0 {
            return Ok(pixel);
        }
        let perc = self.perceptual.distance(g, pred, target)?;
        let perc = g.scale(perc, self.cfg.perceptual_weight);
        Ok(g.add(pixel, perc))
    }

    /// `(H_back, I_back1, I_back2)` from source patches `[B, N, P*P*C]`.
    pub fn encode_background<T: Float>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<(Var, Var, Var)> {
        let h = self.back_encoder.forward(g, patches)?;
        let h1 = self.back_decoder1.forward(g, h)?;
        let h2 = self.back_decoder2.forward(g, h1)?;
        let i1 = self.back_head.forward(g, h1)?;
        let i2 = self.back_head.forward(g, h2)?;
        Ok((h2, i1, i2))
    }

    /// Encoded features `E(x)` in codebook space, `[B, N, codebook_dim]`.
    pub fn code_features<T: Float>(&self, g: &mut Graph<'_, T>, tgt_patches: Var) -> Result<(Var, Var)> {
        let h = self.code_encoder.forward(g, tgt_patches)?;
        let h1 = self.code_decoder1.forward(g, h)?;
        Ok((h1, self.codebook.down.forward(g, h1)))
    }

    /// Code vectors `[B, N, codebook_dim]` to `H_code`.
    pub fn decode_code_vectors<T: Float>(&self, g: &mut Graph<'_, T>, vectors: Var) -> Result<Var> {
        let up = self.codebook.up.forward(g, vectors);
        self.code_decoder2.forward(g, up)
    }

    pub fn encode_code_branch<T: Float>(&self, g: &mut Graph<'_, T>, tgt_patches: Var) -> Result<CodeBranch> {
        self.code_branch(g, tgt_patches, None)
    }

    fn code_branch<T: Float>(&self, g: &mut Graph<'_, T>, tgt_patches: Var, frozen: Option<&FrozenVq<T>>) -> Result<CodeBranch> {
        let (h1, feats) = self.code_features(g, tgt_patches)?;
        let i_code1 = self.code_head.forward(g, h1)?;
        let q = match frozen {
            None => vq::quantize_on_graph(g, feats, self.codebook.entries)?,
            Some(f) => {
                let offset = Tensor::from_fn(f.features.shape().to_vec(), |i| f.selected.data()[i] - f.features.data()[i]);
                let offset = g.constant(offset);
                let vectors = g.add(feats, offset);
                let lead = &f.features.shape()[..f.features.rank() - 1];
                let table = g.param(self.codebook.entries);
                let looked_up = g.embedding(table, &f.codes, lead)?;
                let selected = g.constant(f.selected.clone());
                let commitment = g.mse(feats, selected);
                let features = g.constant(f.features.clone());
                let codebook_term = g.mse(looked_up, features);
                vq::Quantized {
                    codes: f.codes.clone(),
                    vectors,
                    commitment,
                    codebook_term,
                }
            }
        };
        let h_code = self.decode_code_vectors(g, q.vectors)?;
        let i_code2 = self.code_head.forward(g, h_code)?;
        Ok(CodeBranch {
            codes: q.codes,
            features: feats,
            h_code,
            i_code1,
            i_code2,
            commitment: q.commitment,
            codebook_term: q.codebook_term,
        })
    }

    /// Quantizer state of `batch` at the current parameters. Replaying it
    /// through [`Self::stage1_loss_frozen`] gives a smooth loss whose exact
    /// gradient at these parameters is the straight-through gradient.
    pub fn freeze_vq<T: Float>(&self, store: &ParamStore<T>, batch: &Batch) -> Result<FrozenVq<T>> {
        let mut g = Graph::inference(store);
        let x = constant(&mut g, &batch.tgt_patches);
        let (_, feats) = self.code_features(&mut g, x)?;
        let (codes, selected) = vq::quantize(g.value(feats), store.value(self.codebook.entries))?;
        Ok(FrozenVq {
            codes,
            features: g.value(feats).clone(),
            selected,
        })
    }

    /// `H_code + H_back` through the image decoder and final head.
    pub fn synthesize<T: Float>(&self, g: &mut Graph<'_, T>, h_code: Var, h_back: Var) -> Result<Var> {
        if g.shape(h_code) != g.shape(h_back) {
            return Err(Error::shape(format!(
                "H_code {:?} and H_back {:?} differ",
                g.shape(h_code),
                g.shape(h_back)
            )));
        }
        let h = g.add(h_code, h_back);
        let h = self.img_decoder.forward(g, h)?;
        self.img_head.forward(g, h)
    }

    pub fn encode_trans<T: Float>(&self, g: &mut Graph<'_, T>, mt_patches: Var) -> Result<Var> {
        self.mt_encoder.forward(g, mt_patches)
    }

    /// Teacher-forced first pass: `(logits, H_1pass)`.
    pub fn decode_1pass<T: Float>(&self, g: &mut Graph<'_, T>, h_trans: Var, tokens: &TokenBatch) -> Result<(Var, Var)> {
        let mask = build_mask(tokens.len, MaskKind::Causal)?;
        let n = g.shape(h_trans)[1];
        let (h, logits) = self.one_pass.forward(
            g,
            &tokens.input,
            tokens.batch,
            tokens.len,
            &mask,
            h_trans,
            &Mask::full(tokens.len, n),
        )?;
        Ok((logits, h))
    }

    /// Character states from `H_1pass` (teacher-forced for the decoder
    /// variants).
    pub fn decode_s2c<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        h_1pass: Var,
        subword_lengths: &[usize],
        chars: &TokenBatch,
        char_seqs: &[Vec<usize>],
    ) -> Result<CharStates> {
        match (&self.s2c, self.cfg.s2c) {
            (S2CModule::None, S2CVariant::None) => Ok(CharStates {
                h_char: h_1pass,
                lengths: subword_lengths.to_vec(),
                loss: None,
                logits: None,
            }),
            (S2CModule::Ctc { up, head }, S2CVariant::Ctc) => {
                let shape = g.shape(h_1pass).to_vec();
                let x = up.forward(g, h_1pass);
                let h_char = g.reshape(x, &[shape[0], shape[1] * 2, shape[2]])?;
                let logits = head.forward(g, h_char);
                let lengths: Vec<usize> = subword_lengths.iter().map(|l| 2 * l).collect();
                let loss = g.ctc_loss(logits, char_seqs, &lengths, crate::data::vocab::PAD)?;
                Ok(CharStates {
                    h_char,
                    lengths,
                    loss: Some(loss),
                    logits: None,
                })
            }
            (S2CModule::Decoder(dec), variant) if variant.has_decoder() => {
                let kind = variant.mask_kind().expect("decoder variants have a mask");
                let mask = build_mask(chars.len, kind)?;
                let mem = Mask::key_lengths(chars.len, g.shape(h_1pass)[1], subword_lengths)?;
                let (h, logits) = dec.forward(g, &chars.input, chars.batch, chars.len, &mask, h_1pass, &mem)?;
                let loss = g.cross_entropy(logits, &chars.target, self.cfg.label_smoothing)?;
                Ok(CharStates {
                    h_char: h,
                    lengths: chars.lengths.clone(),
                    loss: Some(loss),
                    logits: Some(logits),
                })
            }
            _ => Err(Error::Invalid(format!(
                "S2C module does not match variant {}",
                self.cfg.s2c
            ))),
        }
    }

    /// Teacher-forced code logits `[B, N, V]` given character states.
    pub fn decode_2pass<T: Float>(&self, g: &mut Graph<'_, T>, chars: &CharStates, codes: &TokenBatch) -> Result<Var> {
        if codes.len > self.cfg.code_len() {
            return Err(Error::Invalid(format!(
                "code prefix of {} exceeds {} codes",
                codes.len,
                self.cfg.code_len()
            )));
        }
        let mask = build_mask(codes.len, MaskKind::Causal)?;
        let mem = Mask::key_lengths(codes.len, g.shape(chars.h_char)[1], &chars.lengths)?;
        let (_, logits) = self.two_pass.forward(g, &codes.input, codes.batch, codes.len, &mask, chars.h_char, &mem)?;
        Ok(logits)
    }

    /// The stage-1 objective over a batch.
    pub fn stage1_loss<T: Float>(&self, g: &mut Graph<'_, T>, batch: &Batch) -> Result<Loss> {
        self.stage1(g, batch, None)
    }

    /// The stage-1 objective with quantization replaced by a fixed offset.
    pub fn stage1_loss_frozen<T: Float>(&self, g: &mut Graph<'_, T>, batch: &Batch, frozen: &FrozenVq<T>) -> Result<Loss> {
        self.stage1(g, batch, Some(frozen))
    }

    fn stage1<T: Float>(&self, g: &mut Graph<'_, T>, batch: &Batch, frozen: Option<&FrozenVq<T>>) -> Result<Loss> {
        let src = constant(g, &batch.source.patches);
        let (h_back, i_back1, i_back2) = self.encode_background(g, src)?;
        let tgt_patches = constant(g, &batch.tgt_patches);
        let code = self.code_branch(g, tgt_patches, frozen)?;
        let i_img = self.synthesize(g, code.h_code, h_back)?;

        let text_img = constant(g, &batch.tgt_text);
        let back = constant(g, &batch.background);
        let tgt = constant(g, &batch.tgt);
        let img_code1 = self.image_loss(g, code.i_code1, text_img)?;
        let img_code2 = self.image_loss(g, code.i_code2, text_img)?;
        let img_back1 = self.image_loss(g, i_back1, back)?;
        let img_back2 = self.image_loss(g, i_back2, back)?;
        let img_final = self.image_loss(g, i_img, tgt)?;

        let mt = constant(g, &batch.source.mt_patches);
        let h_trans = self.encode_trans(g, mt)?;
        let (tit_logits, _) = self.decode_1pass(g, h_trans, &batch.tit)?;
        let ce_tit = g.cross_entropy(tit_logits, &batch.tit.target, self.cfg.label_smoothing)?;
        let n = g.shape(h_trans)[1];
        let ocr = &batch.ocr;
        let (_, ocr_logits) = self.ocr_decoder.forward(
            g,
            &ocr.input,
            ocr.batch,
            ocr.len,
            &build_mask(ocr.len, MaskKind::Causal)?,
            h_trans,
            &Mask::full(ocr.len, n),
        )?;
        let ce_ocr = g.cross_entropy(ocr_logits, &ocr.target, self.cfg.label_smoothing)?;

        let mut loss = Loss::from_parts(
            g,
            vec![
                ("img_code1", img_code1),
                ("img_code2", img_code2),
                ("commitment", code.commitment),
                ("codebook", code.codebook_term),
                ("img_back1", img_back1),
                ("img_back2", img_back2),
                ("ce_tit", ce_tit),
                ("ce_ocr", ce_ocr),
                ("img_final", img_final),
            ],
        );
        loss.quantized = Some((code.codes, code.features));
        Ok(loss)
    }

    /// `H_1pass [B, L, d]` of the teacher-forced target subwords.
    pub fn one_pass_states<T: Float>(&self, g: &mut Graph<'_, T>, source: &SourceInputs, tit: &TokenBatch) -> Result<Var> {
        let mt = constant(g, &source.mt_patches);
        let h_trans = self.encode_trans(g, mt)?;
        Ok(self.decode_1pass(g, h_trans, tit)?.1)
    }

    /// The stage-2 objective. `h_1pass` may carry precomputed first-pass
    /// states (stage-1 modules are frozen, so they never change).
    pub fn stage2_loss<T: Float>(&self, g: &mut Graph<'_, T>, batch: &Batch, h_1pass: Option<&Tensor<f32>>) -> Result<Loss> {
        let codes = batch
            .codes
            .as_ref()
            .ok_or_else(|| Error::Invalid("stage 2 needs teacher codes".into()))?;
        let h = match h_1pass {
            Some(t) => constant(g, t),
            None => self.one_pass_states(g, &batch.source, &batch.tit)?,
        };
        let chars = self.decode_s2c(g, h, &batch.tit.lengths, &batch.chars, &batch.char_seqs)?;
        let logits = self.decode_2pass(g, &chars, codes)?;
        let ce_code = g.cross_entropy(logits, &codes.target, self.cfg.label_smoothing)?;
        let ce_char = match chars.loss {
            Some(l) => l,
            None => g.constant(Tensor::scalar(T::zero())),
        };
        Ok(Loss::from_parts(g, vec![("ce_char", ce_char), ("ce_code", ce_code)]))
    }

    /// Fraction of non-padding positions whose argmax equals the target.
    pub fn token_accuracy<T: Float>(g: &Graph<'_, T>, logits: Var, targets: &[Option<usize>]) -> f64 {
        let lv = g.value(logits);
        let v = lv.last_dim();
        let mut hit = 0;
        let mut n = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            n += 1;
            if argmax(&lv.data()[r * v..(r + 1) * v]) == t {
                hit += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            hit as f64 / n as f64
        }
    }

    /// Codes of target images via the (frozen) stage-1 quantizer.
    pub fn extract_target_codes<T: Float>(&self, store: &ParamStore<T>, tgt: &[&Image]) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::inference(store);
        let patches = batch_patches(&self.cfg, tgt, self.cfg.patch)?;
        let x = constant(&mut g, &patches);
        let (_, feats) = self.code_features(&mut g, x)?;
        let (codes, _) = vq::quantize(g.value(feats), store.value(self.codebook.entries))?;
        Ok(codes.chunks(self.cfg.code_len()).map(<[usize]>::to_vec).collect())
    }

    /// Image decoded from a code sequence through the code decoder and
    /// code head (the text-image reconstruction).
    pub fn render_codes<T: Float>(&self, store: &ParamStore<T>, codes: &[usize]) -> Result<Image> {
        let mut g = Graph::inference(store);
        let h_code = self.code_states(&mut g, store, codes)?;
        let img = self.code_head.forward(&mut g, h_code)?;
        self.to_image(&g, img, 0)
    }

    fn code_states<T: Float>(&self, g: &mut Graph<'_, T>, store: &ParamStore<T>, codes: &[usize]) -> Result<Var> {
        if codes.len() != self.cfg.code_len() {
            return Err(Error::shape(format!("{} codes for a grid of {}", codes.len(), self.cfg.code_len())));
        }
        let vectors = vq::codes_to_vectors(codes, store.value(self.codebook.entries))?;
        let vectors = vectors.reshape(vec![1, codes.len(), self.cfg.codebook_dim])?;
        let v = g.constant(vectors);
        self.decode_code_vectors(g, v)
    }

    /// Item `b` of an image-valued var, clamped to `[0, 1]`.
    pub fn to_image<T: Float>(&self, g: &Graph<'_, T>, img: Var, b: usize) -> Result<Image> {
        let n = self.cfg.height * self.cfg.width * self.cfg.channels;
        let data: Vec<f32> = g.value(img).data()[b * n..(b + 1) * n]
            .iter()
            .map(|v| v.as_f64().clamp(0.0, 1.0) as f32)
            .collect();
        Image::new(self.cfg.height, self.cfg.width, self.cfg.channels, data)
    }
}

fn batch_patches(cfg: &ModelConfig, imgs: &[&Image], p: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for img in imgs {
        img.check_canvas(cfg.height, cfg.width, cfg.channels)?;
        let t: Tensor<f32> = crate::nn::patchify(img, p)?;
        shape = t.shape().to_vec();
        data.extend(t.into_data());
    }
    Tensor::new([vec![imgs.len()], shape].concat(), data)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
