//! Inference: subword search, character adapter decoding, code
//! generation and the end-to-end translation chain.

use super::{argmax, S2CModule, S2CVariant, SourceInputs, Strategy, VisTrans, Vocabs};
use super::DecodeConfig;
use crate::data::vocab::{BOS, EOS, PAD};
use crate::data::Lang;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{build_mask, MaskKind, TextDecoder};
use crate::tensor::{Float, Graph, Mask, ParamStore, Tensor};

/// Result of one image-to-image translation with its intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub image: Image,
    pub subwords: Vec<usize>,
    pub text: String,
    pub chars: Vec<usize>,
    pub char_text: String,
    pub codes: Vec<usize>,
    /// Some decoder hit its length limit without emitting an end token.
    pub truncated: bool,
    pub s2c_steps: usize,
}

/// Character-adapter output for one sequence.
#[derive(Clone, Debug)]
pub struct S2CDecode<T> {
    pub chars: Vec<usize>,
    /// `[1, L, d]` states handed to the code decoder.
    pub h_char: Tensor<T>,
    pub steps: usize,
    pub truncated: bool,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
    row.iter().map(|&x| x - lse).collect()
}

/// Runs `dec` on a single sequence `ids` over `memory` and returns
/// `(hidden [1, n, d], logits [n, V])` as plain tensors.
fn run_decoder<T: Float>(
    store: &ParamStore<T>,
    dec: &TextDecoder,
    ids: &[usize],
    kind: MaskKind,
    memory: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::inference(store);
    let mem = g.constant(memory.clone());
    let n = ids.len();
    let mask = build_mask(n, kind)?;
    let (h, logits) = dec.forward(&mut g, ids, 1, n, &mask, mem, &Mask::full(n, memory.shape()[1]))?;
    Ok((g.value(h).clone(), g.value(logits).clone()))
}

fn row_f64<T: Float>(t: &Tensor<T>, r: usize) -> Vec<f64> {
    t.row(r).iter().map(|v| v.as_f64()).collect()
}

impl VisTrans {
    /// `(H_back [1, N, d], H_trans [1, N', d])` of one source image.
    pub fn encode_source<T: Float>(&self, store: &ParamStore<T>, src: &Image) -> Result<(Tensor<T>, Tensor<T>)> {
        let inputs = SourceInputs::new(&self.cfg, &[src])?;
        let mut g = Graph::inference(store);
        let p = g.constant(inputs.patches.cast());
        let (h_back, _, _) = self.encode_background(&mut g, p)?;
        let mt = g.constant(inputs.mt_patches.cast());
        let h_trans = self.encode_trans(&mut g, mt)?;
        Ok((g.value(h_back).clone(), g.value(h_trans).clone()))
    }

    /// Subword ids after `tag` (without the end token) and whether the
    /// length limit was reached first.
    pub fn decode_subwords<T: Float>(
        &self,
        store: &ParamStore<T>,
        h_trans: &Tensor<T>,
        tag: usize,
        dcfg: &DecodeConfig,
    ) -> Result<(Vec<usize>, bool)> {
        dcfg.validate()?;
        if tag >= self.cfg.subword_vocab {
            return Err(Error::UnknownLanguage(format!("tag id {tag}")));
        }
        let max = dcfg.max_subword_len.min(self.cfg.max_subword_len);
        match dcfg.strategy {
            Strategy::Greedy => {
                let mut ids = vec![tag];
                while ids.len() <= max {
                    let (_, logits) = run_decoder(store, &self.one_pass, &ids, MaskKind::Causal, h_trans)?;
                    let scores = log_softmax(&row_f64(&logits, ids.len() - 1));
                    let next = argmax(&scores);
                    if next == EOS {
                        return Ok((ids[1..].to_vec(), false));
                    }
                    ids.push(next);
                }
                Ok((ids[1..].to_vec(), true))
            }
            Strategy::Beam(width) => self.beam_search(store, h_trans, tag, width, max),
        }
    }

    fn beam_search<T: Float>(
        &self,
        store: &ParamStore<T>,
        h_trans: &Tensor<T>,
        tag: usize,
        width: usize,
        max: usize,
    ) -> Result<(Vec<usize>, bool)> {
        let mut alive: Vec<(Vec<usize>, f64)> = vec![(vec![tag], 0.0)];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        while !alive.is_empty() {
            let best_finished = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
            if alive.iter().all(|a| a.1 < best_finished) {
                break;
            }
            if alive[0].0.len() > max {
                break;
            }
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (h, (ids, score)) in alive.iter().enumerate() {
                let (_, logits) = run_decoder(store, &self.one_pass, ids, MaskKind::Causal, h_trans)?;
                let lp = log_softmax(&row_f64(&logits, ids.len() - 1));
                cands.extend(lp.iter().enumerate().map(|(tok, &l)| (score + l, h, tok)));
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(width);
            for &(score, h, tok) in cands.iter().take(width) {
                let mut ids = alive[h].0.clone();
                if tok == EOS {
                    finished.push((ids, score));
                } else {
                    ids.push(tok);
                    next.push((ids, score));
                }
            }
            alive = next;
        }
        let pick = |v: &[(Vec<usize>, f64)]| {
            v.iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(ids, _)| ids[1..].to_vec())
        };
        match pick(&finished) {
            Some(ids) => Ok((ids, false)),
            None => Ok((pick(&alive).unwrap_or_default(), true)),
        }
    }

    /// First-pass states `[1, n + 1, d]` for the emitted `subwords`.
    pub fn one_pass_hidden<T: Float>(
        &self,
        store: &ParamStore<T>,
        h_trans: &Tensor<T>,
        tag: usize,
        subwords: &[usize],
    ) -> Result<Tensor<T>> {
        let ids: Vec<usize> = std::iter::once(tag).chain(subwords.iter().copied()).collect();
        Ok(run_decoder(store, &self.one_pass, &ids, MaskKind::Causal, h_trans)?.0)
    }

    /// Character states from `H_1pass`. With `fixed_len`, exactly that many
    /// characters are produced and end tokens are ignored.
    pub fn decode_chars<T: Float>(
        &self,
        store: &ParamStore<T>,
        h_1pass: &Tensor<T>,
        max_chars: usize,
        fixed_len: Option<usize>,
    ) -> Result<S2CDecode<T>> {
        match (&self.s2c, self.cfg.s2c) {
            (S2CModule::None, _) => Ok(S2CDecode {
                chars: Vec::new(),
                h_char: h_1pass.clone(),
                steps: 0,
                truncated: false,
            }),
            (S2CModule::Ctc { up, head }, _) => {
                let mut g = Graph::inference(store);
                let h = g.constant(h_1pass.clone());
                let shape = h_1pass.shape().to_vec();
                let x = up.forward(&mut g, h);
                let h_char = g.reshape(x, &[shape[0], shape[1] * 2, shape[2]])?;
                let logits = head.forward(&mut g, h_char);
                let lv = g.value(logits);
                let v = lv.last_dim();
                let mut chars = Vec::new();
                let mut prev = None;
                for frame in lv.data().chunks_exact(v) {
                    let k = argmax(frame);
                    if Some(k) != prev && k != PAD {
                        chars.push(k);
                    }
                    prev = Some(k);
                }
                if let Some(n) = fixed_len {
                    chars.resize(n, PAD);
                }
                Ok(S2CDecode {
                    chars,
                    h_char: g.value(h_char).clone(),
                    steps: 1,
                    truncated: false,
                })
            }
            (S2CModule::Decoder(dec), variant) => {
                let k = variant.group();
                let kind = variant.mask_kind().expect("decoder variant");
                let limit = match fixed_len {
                    Some(n) if n > self.cfg.max_char_len => {
                        return Err(Error::Invalid(format!(
                            "{n} characters exceed the adapter maximum of {}",
                            self.cfg.max_char_len
                        )))
                    }
                    Some(n) => n,
                    None => max_chars.min(self.cfg.max_char_len) + 1,
                };
                let mut target: Vec<usize> = Vec::new();
                let mut steps = 0;
                let mut ended = false;
                while target.len() < limit && !ended {
                    let input: Vec<usize> = std::iter::repeat_n(BOS, k).chain(target.iter().copied()).collect();
                    let (_, logits) = run_decoder(store, dec, &input, kind, h_1pass)?;
                    steps += 1;
                    for r in target.len()..input.len() {
                        let tok = argmax(&row_f64(&logits, r));
                        target.push(tok);
                        if fixed_len.is_none() && tok == EOS {
                            ended = true;
                            break;
                        }
                    }
                }
                target.truncate(limit);
                let truncated = fixed_len.is_none() && !ended;
                let chars: Vec<usize> = target.iter().copied().take_while(|&t| fixed_len.is_some() || t != EOS).collect();
                let n = target.len().max(1);
                let input: Vec<usize> = std::iter::repeat_n(BOS, k).chain(target.iter().copied()).take(n).collect();
                let (h_char, _) = run_decoder(store, dec, &input, kind, h_1pass)?;
                Ok(S2CDecode {
                    chars,
                    h_char,
                    steps,
                    truncated,
                })
            }
        }
    }

    /// Greedy generation of the full code grid.
    pub fn decode_codes<T: Float>(&self, store: &ParamStore<T>, h_char: &Tensor<T>) -> Result<Vec<usize>> {
        let n = self.cfg.code_len();
        let mut ids = vec![self.code_bos()];
        let mut codes = Vec::with_capacity(n);
        while codes.len() < n {
            let (_, logits) = run_decoder(store, &self.two_pass, &ids, MaskKind::Causal, h_char)?;
            let c = argmax(logits.row(ids.len() - 1));
            codes.push(c);
            ids.push(c);
        }
        Ok(codes)
    }

    /// Image from codes plus the background states of the source.
    pub fn image_from_codes<T: Float>(&self, store: &ParamStore<T>, codes: &[usize], h_back: &Tensor<T>) -> Result<Image> {
        let mut g = Graph::inference(store);
        let h_code = self.code_states(&mut g, store, codes)?;
        let hb = g.constant(h_back.clone());
        let img = self.synthesize(&mut g, h_code, hb)?;
        self.to_image(&g, img, 0)
    }

    /// Source image plus language to target image, through every stage.
    pub fn translate<T: Float>(
        &self,
        store: &ParamStore<T>,
        vocabs: &Vocabs,
        src: &Image,
        lang: Lang,
        dcfg: &DecodeConfig,
    ) -> Result<Translation> {
        dcfg.validate()?;
        let tag = vocabs.subword.lang_id(lang)?;
        let (h_back, h_trans) = self.encode_source(store, src)?;
        let (subwords, sub_trunc) = self.decode_subwords(store, &h_trans, tag, dcfg)?;
        let h_1pass = self.one_pass_hidden(store, &h_trans, tag, &subwords)?;
        let s2c = self.decode_chars(store, &h_1pass, dcfg.max_char_len, None)?;
        let codes = self.decode_codes(store, &s2c.h_char)?;
        let image = self.image_from_codes(store, &codes, &h_back)?;
        let text = vocabs.subword.decode(&subwords);
        let char_text = if self.cfg.s2c == S2CVariant::None {
            text.clone()
        } else {
            vocabs.chars.decode(&s2c.chars)
        };
        Ok(Translation {
            image,
            text,
            char_text,
            subwords,
            chars: s2c.chars,
            codes,
            truncated: sub_trunc || s2c.truncated,
            s2c_steps: s2c.steps,
        })
    }
}
