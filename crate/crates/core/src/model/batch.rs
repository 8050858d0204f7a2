//! Packing of training examples into padded tensors and token grids.

use super::ModelConfig;
use crate::data::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::data::{Lang, TrainingExample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::patchify;
use crate::tensor::Tensor;

/// Teacher-forced token grid for a batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    /// `batch * len` decoder inputs, row-major, padded with [`PAD`].
    pub input: Vec<usize>,
    /// Prediction target per input position; `None` on padding.
    pub target: Vec<Option<usize>>,
    pub batch: usize,
    pub len: usize,
    /// Valid positions per item.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Targets are `seq` (plus `end` when given); the input at position
    /// `t` is the target at `t - shift`, or `start[b]` for the first
    /// `shift` positions.
    pub fn teacher_forced(seqs: &[Vec<usize>], start: &[usize], shift: usize, end: Option<usize>) -> Self {
        assert_eq!(seqs.len(), start.len(), "one start token per sequence");
        assert!(shift >= 1, "shift must be at least 1");
        let targets: Vec<Vec<usize>> = seqs
            .iter()
            .map(|s| s.iter().copied().chain(end).collect())
            .collect();
        let len = targets.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let batch = seqs.len();
        let mut input = vec![PAD; batch * len];
        let mut target = vec![None; batch * len];
        for (b, tgt) in targets.iter().enumerate() {
            for t in 0..tgt.len() {
                input[b * len + t] = if t < shift { start[b] } else { tgt[t - shift] };
                target[b * len + t] = Some(tgt[t]);
            }
        }
        TokenBatch {
            input,
            target,
            batch,
            len,
            lengths: targets.iter().map(|t| t.len().max(1)).collect(),
        }
    }

    pub fn targets_of(&self, b: usize) -> Vec<usize> {
        self.target[b * self.len..(b + 1) * self.len].iter().flatten().copied().collect()
    }
}

fn stack_images(imgs: &[&Image]) -> Result<Tensor<f32>> {
    let first = imgs.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut data = Vec::with_capacity(imgs.len() * h * w * c);
    for img in imgs {
        img.check_canvas(h, w, c)?;
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![imgs.len(), h, w, c], data)
}

pub(crate) fn stack_patches(imgs: &[&Image], p: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for img in imgs {
        let t: Tensor<f32> = patchify(img, p)?;
        shape = t.shape().to_vec();
        data.extend(t.into_data());
    }
    Tensor::new([vec![imgs.len()], shape].concat(), data)
}

/// Patch tensors of one source image, shared by training and inference.
pub struct SourceInputs {
    /// `[B, N, P*P*C]` for the background branch.
    pub patches: Tensor<f32>,
    /// `[B, N', p*p*C]` for the translation encoder.
    pub mt_patches: Tensor<f32>,
}

impl SourceInputs {
    pub fn new(cfg: &ModelConfig, imgs: &[&Image]) -> Result<Self> {
        for img in imgs {
            img.check_canvas(cfg.height, cfg.width, cfg.channels)?;
        }
        Ok(SourceInputs {
            patches: stack_patches(imgs, cfg.patch)?,
            mt_patches: stack_patches(imgs, cfg.mt_patch)?,
        })
    }
}

/// Everything both training stages read for one batch.
pub struct Batch {
    pub size: usize,
    pub langs: Vec<Lang>,
    pub source: SourceInputs,
    /// `[B, N, P*P*C]` patches of the target image.
    pub tgt_patches: Tensor<f32>,
    pub background: Tensor<f32>,
    pub tgt: Tensor<f32>,
    pub tgt_text: Tensor<f32>,
    /// Source subwords for the recognition decoder.
    pub ocr: TokenBatch,
    /// Target subwords after the language tag.
    pub tit: TokenBatch,
    /// Target characters after `K` begin tokens.
    pub chars: TokenBatch,
    /// Raw target character ids, for alignment-free losses.
    pub char_seqs: Vec<Vec<usize>>,
    /// Teacher codes, when known.
    pub codes: Option<TokenBatch>,
}

/// The subword and character vocabularies a model is built against.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabs {
    pub subword: Vocabulary,
    pub chars: Vocabulary,
}

impl Vocabs {
    /// BPE with at most `subword_size` tokens and the full charset, both
    /// learned from the source and target texts of `examples`.
    pub fn from_examples(examples: &[TrainingExample], subword_size: usize) -> Result<Self> {
        let lines: Vec<&str> = examples
            .iter()
            .flat_map(|e| [e.src_text.as_str(), e.tgt_text.as_str()])
            .collect();
        Ok(Vocabs {
            subword: crate::data::train_bpe(&lines, subword_size)?,
            chars: Vocabulary::chars(&lines)?,
        })
    }
}

impl Batch {
    /// `codes[b]` are teacher codes for `examples[b]`, needed in stage 2.
    pub fn new(
        cfg: &ModelConfig,
        vocabs: &Vocabs,
        examples: &[&TrainingExample],
        codes: Option<&[Vec<usize>]>,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let src: Vec<&Image> = examples.iter().map(|e| &e.src_image).collect();
        let tgt: Vec<&Image> = examples.iter().map(|e| &e.tgt_image).collect();
        for img in examples.iter().flat_map(|e| [&e.background, &e.tgt_image, &e.tgt_text_image]) {
            img.check_canvas(cfg.height, cfg.width, cfg.channels)?;
        }
        let too_long = |what: &str, n: usize, max: usize| {
            Error::Invalid(format!("{what} of {n} tokens exceeds the decoder maximum of {max}"))
        };
        let mut src_ids = Vec::new();
        let mut tgt_ids = Vec::new();
        let mut char_ids = Vec::new();
        let mut tags = Vec::new();
        for e in examples {
            let s = vocabs.subword.encode(&e.src_text);
            let t = vocabs.subword.encode(&e.tgt_text);
            let c = vocabs.chars.encode(&e.tgt_text);
            if s.len() > cfg.max_subword_len || t.len() > cfg.max_subword_len {
                return Err(too_long("text", s.len().max(t.len()), cfg.max_subword_len));
            }
            if c.len() > cfg.max_char_len {
                return Err(too_long("character sequence", c.len(), cfg.max_char_len));
            }
            src_ids.push(s);
            tgt_ids.push(t);
            char_ids.push(c);
            tags.push(vocabs.subword.lang_id(e.lang)?);
        }
        let b = examples.len();
        let codes = match codes {
            Some(c) => {
                if c.len() != b || c.iter().any(|s| s.len() != cfg.code_len()) {
                    return Err(Error::shape(format!("expected {b} code sequences of length {}", cfg.code_len())));
                }
                Some(TokenBatch::teacher_forced(c, &vec![cfg.codebook_size; b], 1, None))
            }
            None => None,
        };
        Ok(Batch {
            size: b,
            langs: examples.iter().map(|e| e.lang).collect(),
            source: SourceInputs::new(cfg, &src)?,
            tgt_patches: stack_patches(&tgt, cfg.patch)?,
            background: stack_images(&examples.iter().map(|e| &e.background).collect::<Vec<_>>())?,
            tgt: stack_images(&tgt)?,
            tgt_text: stack_images(&examples.iter().map(|e| &e.tgt_text_image).collect::<Vec<_>>())?,
            ocr: TokenBatch::teacher_forced(&src_ids, &vec![BOS; b], 1, Some(EOS)),
            tit: TokenBatch::teacher_forced(&tgt_ids, &tags, 1, Some(EOS)),
            chars: TokenBatch::teacher_forced(&char_ids, &vec![BOS; b], cfg.s2c.group(), Some(EOS)),
            char_seqs: char_ids,
            codes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifted_inputs() {
        let tb = TokenBatch::teacher_forced(&[vec![7, 8, 9], vec![5]], &[4, 4], 1, Some(2));
        assert_eq!(tb.len, 4);
        assert_eq!(&tb.input[..4], [4, 7, 8, 9]);
        assert_eq!(&tb.target[..4], [Some(7), Some(8), Some(9), Some(2)]);
        assert_eq!(&tb.input[4..], [4, 5, PAD, PAD]);
        assert_eq!(&tb.target[4..], [Some(5), Some(2), None, None]);
        assert_eq!(tb.lengths, [4, 2]);
    }

    #[test]
    fn group_shift_hides_the_current_group() {
        let tb = TokenBatch::teacher_forced(&[vec![10, 11, 12, 13]], &[1], 2, Some(2));
        assert_eq!(tb.input, [1, 1, 10, 11, 12]);
        assert_eq!(tb.targets_of(0), [10, 11, 12, 13, 2]);
    }
}
