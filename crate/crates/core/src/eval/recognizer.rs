//! Character recognizer standing in for an external OCR engine: a
//! transformer over full-height column strips with a CTC head.

use crate::data::vocab::PAD;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::train::{batch_order, optimizer, StepLog, TrainConfig};
use crate::model::{argmax, LossReport};
use crate::nn::{Linear, StackConfig, VisionEncoder};
use crate::rng::rng_for;
use crate::tensor::{Graph, InverseSqrtSchedule, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct RecognizerConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Width in pixels of one column strip; each strip is one CTC frame.
    pub strip: usize,
    /// Neighbouring strips on each side included in a frame's input.
    pub context: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_chars: usize,
    pub seed: u64,
}

impl RecognizerConfig {
    pub fn tiny() -> Self {
        RecognizerConfig {
            height: 32,
            width: 512,
            channels: 3,
            strip: 4,
            context: 2,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            layers: 2,
            max_chars: 48,
            seed: 0,
        }
    }

    /// The tiny recognizer on the canvas of `model`.
    pub fn for_model(model: &crate::model::ModelConfig, seed: u64) -> Self {
        RecognizerConfig {
            height: model.height,
            width: model.width,
            channels: model.channels,
            max_chars: model.max_char_len,
            seed,
            ..Self::tiny()
        }
    }

    pub fn frames(&self) -> usize {
        self.width / self.strip
    }

    fn frame_dim(&self) -> usize {
        self.height * self.strip * (2 * self.context + 1) * self.channels
    }

    fn stack(&self) -> StackConfig {
        StackConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            layers: self.layers,
        }
    }
}

/// A recognizer with its own weights.
pub struct Recognizer {
    pub cfg: RecognizerConfig,
    pub chars: Vocabulary,
    pub store: ParamStore<f32>,
    encoder: VisionEncoder,
    head: Linear,
}

impl Recognizer {
    pub fn new(cfg: RecognizerConfig, chars: Vocabulary) -> Result<Self> {
        let stack = cfg.stack();
        stack.validate()?;
        if cfg.strip == 0 || cfg.width % cfg.strip != 0 {
            return Err(Error::ConfigValue {
                field: "recognizer.strip".into(),
                message: format!("{} does not tile width {}", cfg.strip, cfg.width),
            });
        }
        let mut rng = rng_for(cfg.seed, "recognizer");
        let mut store = ParamStore::new();
        let encoder = VisionEncoder::new(&mut store, "rec_enc", &stack, cfg.frame_dim(), cfg.frames(), &mut rng);
        let head = Linear::new(&mut store, "rec_head", cfg.d_model, chars.len(), true, &mut rng);
        Ok(Recognizer {
            cfg,
            chars,
            store,
            encoder,
            head,
        })
    }

    /// Architecture, vocabulary size and seed.
    pub fn id(&self) -> String {
        let c = &self.cfg;
        format!(
            "vit-ctc:d{}-ff{}-l{}-s{}:chars{}:seed{}",
            c.d_model,
            c.d_ff,
            c.layers,
            c.strip,
            self.chars.len(),
            c.seed
        )
    }

    /// `[B, frames, frame_dim]`: each frame is its strip plus `context`
    /// strips either side (zero past the edges), after shifting the image to
    /// zero mean so text polarity and background brightness matter less.
    fn strips(&self, imgs: &[&Image]) -> Result<Tensor<f32>> {
        let c = &self.cfg;
        let (h, w, ch) = (c.height, c.width, c.channels);
        let span = c.strip * (2 * c.context + 1);
        let mut data = Vec::with_capacity(imgs.len() * c.frames() * c.frame_dim());
        for img in imgs {
            img.check_canvas(h, w, ch)?;
            let px = img.data();
            let mean = px.iter().sum::<f32>() / px.len() as f32;
            for f in 0..c.frames() {
                let left = (f * c.strip) as isize - (c.context * c.strip) as isize;
                for y in 0..h {
                    for x in left..left + span as isize {
                        if (0..w as isize).contains(&x) {
                            let at = (y * w + x as usize) * ch;
                            data.extend(px[at..at + ch].iter().map(|&v| v - mean));
                        } else {
                            data.extend(std::iter::repeat_n(0.0, ch));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![imgs.len(), c.frames(), c.frame_dim()], data)
    }

    fn logits(&self, g: &mut Graph<'_, f32>, imgs: &[&Image]) -> Result<Var> {
        let x = g.constant(self.strips(imgs)?);
        let h = self.encoder.forward(g, x)?;
        Ok(self.head.forward(g, h))
    }

    fn loss(&self, g: &mut Graph<'_, f32>, imgs: &[&Image], texts: &[&str]) -> Result<Var> {
        let seqs: Vec<Vec<usize>> = texts
            .iter()
            .map(|t| {
                let mut ids = self.chars.encode(t);
                ids.truncate(self.cfg.max_chars);
                ids
            })
            .collect();
        let logits = self.logits(g, imgs)?;
        g.ctc_loss(logits, &seqs, &vec![self.cfg.frames(); seqs.len()], PAD)
    }

    /// Fits the recognizer to `(image, text)` samples.
    pub fn train(
        &mut self,
        samples: &[(&Image, &str)],
        cfg: &TrainConfig,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Invalid("no recognizer training samples".into()));
        }
        let schedule = InverseSqrtSchedule {
            peak: cfg.peak_lr,
            warmup: cfg.warmup,
        };
        let mut opt = optimizer(&self.store, cfg);
        let mut logs = Vec::new();
        for (step0, (epoch, idx)) in batch_order(samples.len(), cfg).into_iter().enumerate() {
            let imgs: Vec<&Image> = idx.iter().map(|&i| samples[i].0).collect();
            let texts: Vec<&str> = idx.iter().map(|&i| samples[i].1).collect();
            let (value, grads) = {
                let mut g = Graph::new(&self.store);
                let loss = self.loss(&mut g, &imgs, &texts)?;
                (g.value(loss).item() as f64, g.backward(loss)?)
            };
            self.store.zero_grad();
            self.store.accumulate(&grads);
            let step = step0 + 1;
            let lr = schedule.lr(step);
            let grad_norm = opt.step(&mut self.store, lr);
            let log = StepLog {
                step,
                epoch,
                lr,
                grad_norm,
                loss: LossReport {
                    total: value,
                    components: vec![("ce_rec", value)],
                },
            };
            on_step(&log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    /// Best-path CTC decoding: per-frame argmax, repeats merged, blanks dropped.
    pub fn recognize(&self, img: &Image) -> Result<String> {
        let mut g = Graph::inference(&self.store);
        let logits = self.logits(&mut g, &[img])?;
        let lv = g.value(logits);
        let mut ids = Vec::new();
        let mut prev = None;
        for frame in lv.data().chunks_exact(lv.last_dim()) {
            let k = argmax(frame);
            if Some(k) != prev && k != PAD {
                ids.push(k);
            }
            prev = Some(k);
        }
        ids.truncate(self.cfg.max_chars);
        Ok(self.chars.decode(&ids))
    }
}

/// Trains a recognizer on the source and target layers of `examples`
/// for about `steps` optimizer steps.
pub fn train_recognizer(
    examples: &[crate::data::TrainingExample],
    model: &crate::model::ModelConfig,
    seed: u64,
    steps: usize,
    on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Recognizer> {
    let mut samples: Vec<(&Image, &str)> = Vec::with_capacity(2 * examples.len());
    for e in examples {
        samples.push((&e.tgt_image, e.tgt_text.as_str()));
        samples.push((&e.src_image, e.src_text.as_str()));
    }
    let texts: Vec<&str> = samples.iter().map(|s| s.1).collect();
    let chars = Vocabulary::chars(&texts)?;
    let mut rec = Recognizer::new(RecognizerConfig::for_model(model, seed), chars)?;
    let batch_size = 8;
    let cfg = TrainConfig {
        epochs: (steps * batch_size).div_ceil(samples.len().max(1)).max(1),
        batch_size,
        peak_lr: 6e-3,
        warmup: 300,
        codebook_refresh: None,
        seed,
        ..TrainConfig::default()
    };
    rec.train(&samples, &cfg, on_step)?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RecognizerConfig {
        RecognizerConfig {
            height: 8,
            width: 16,
            strip: 2,
            d_model: 16,
            d_ff: 32,
            heads: 2,
            layers: 1,
            max_chars: 6,
            ..RecognizerConfig::tiny()
        }
    }

    #[test]
    fn overfits_its_own_images() {
        let texts = ["ab", "ba", "aab"];
        let chars = Vocabulary::chars(&texts).unwrap();
        let mut rec = Recognizer::new(small(), chars).unwrap();
        let imgs: Vec<Image> = (0..3)
            .map(|i| {
                let mut img = Image::filled(8, 16, &[1.0, 1.0, 1.0]);
                for x in 0..16 {
                    if (x / 4) % 3 == i {
                        img.pixel_mut(3, x).fill(0.0);
                    }
                }
                img
            })
            .collect();
        let samples: Vec<(&Image, &str)> = imgs.iter().zip(texts).collect();
        let cfg = TrainConfig {
            epochs: 150,
            batch_size: 3,
            peak_lr: 3e-3,
            warmup: 20,
            ..TrainConfig::default()
        };
        rec.train(&samples, &cfg, |_| Ok(())).unwrap();
        for (img, t) in &samples {
            assert_eq!(rec.recognize(img).unwrap(), *t);
            assert_eq!(rec.recognize(img).unwrap(), rec.recognize(img).unwrap());
        }
    }
}
