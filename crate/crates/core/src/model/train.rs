//! Training loops for both stages and teacher-forced evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{Batch, LossReport, VisTrans, Vocabs};
use crate::data::TrainingExample;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{AdamW, AdamWConfig, Graph, InverseSqrtSchedule, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    /// Stage 1: codebook entries unused for this many steps are re-seeded
    /// from current encoder features; `None` disables re-seeding.
    pub codebook_refresh: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            peak_lr: 3e-4,
            warmup: 200,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            codebook_refresh: Some(20),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::ConfigValue {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.codebook_refresh == Some(0) {
            return bad("codebook_refresh", "must be at least 1");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossReport,
}

/// Writes step logs as CSV; the header is taken from the first row.
pub struct CsvLog<W: Write> {
    out: W,
    header_written: bool,
}

impl<W: Write> CsvLog<W> {
    pub fn new(out: W) -> Self {
        CsvLog {
            out,
            header_written: false,
        }
    }

    pub fn write(&mut self, log: &StepLog) -> std::io::Result<()> {
        if !self.header_written {
            let names: Vec<&str> = log.loss.components.iter().map(|(n, _)| *n).collect();
            writeln!(self.out, "step,epoch,lr,grad_norm,total,{}", names.join(","))?;
            self.header_written = true;
        }
        let parts: Vec<String> = log.loss.components.iter().map(|(_, v)| format!("{v:.9e}")).collect();
        writeln!(
            self.out,
            "{},{},{:.9e},{:.9e},{:.9e},{}",
            log.step,
            log.epoch,
            log.lr,
            log.grad_norm,
            log.loss.total,
            parts.join(",")
        )
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub(crate) fn optimizer(store: &ParamStore<f32>, cfg: &TrainConfig) -> AdamW {
    AdamW::new(
        store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            ..AdamWConfig::default()
        },
    )
}

/// Epoch-wise shuffled index batches, reproducible from `seed`.
pub(crate) fn batch_order(n: usize, cfg: &TrainConfig) -> Vec<(usize, Vec<usize>)> {
    let mut rng = rng_for(cfg.seed, "shuffle");
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size) {
            out.push((epoch, chunk.to_vec()));
        }
    }
    out
}

/// Stage 1 over `examples`; `on_step` sees every step's log.
pub fn train_stage1(
    model: &VisTrans,
    store: &mut ParamStore<f32>,
    vocabs: &Vocabs,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let schedule = InverseSqrtSchedule {
        peak: cfg.peak_lr,
        warmup: cfg.warmup,
    };
    let mut opt = optimizer(store, cfg);
    let mut refresh = cfg
        .codebook_refresh
        .map(|after| CodebookRefresh::new(model.cfg.codebook_size, after, cfg.seed));
    let mut logs = Vec::new();
    for (step0, (epoch, idx)) in batch_order(examples.len(), cfg).into_iter().enumerate() {
        let members: Vec<&TrainingExample> = idx.iter().map(|&i| &examples[i]).collect();
        let batch = Batch::new(&model.cfg, vocabs, &members, None)?;
        let (report, grads, quantized) = {
            let mut g = Graph::new(store);
            let loss = model.stage1_loss(&mut g, &batch)?;
            let quantized = loss.quantized.as_ref().map(|(c, f)| (c.clone(), g.value(*f).clone()));
            (loss.report(&g), g.backward(loss.total)?, quantized)
        };
        store.zero_grad();
        store.accumulate(&grads);
        let step = step0 + 1;
        let lr = schedule.lr(step);
        let grad_norm = opt.step(store, lr);
        if let (Some(r), Some((codes, feats))) = (refresh.as_mut(), quantized) {
            r.update(store, model.codebook.entries, &codes, &feats);
        }
        let log = StepLog {
            step,
            epoch,
            lr,
            grad_norm,
            loss: report,
        };
        on_step(&log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Tracks when each codebook entry was last selected and moves entries
/// that have gone unused onto randomly chosen current features.
struct CodebookRefresh {
    last_used: Vec<usize>,
    after: usize,
    step: usize,
    rng: crate::rng::Rng,
}

impl CodebookRefresh {
    fn new(size: usize, after: usize, seed: u64) -> Self {
        CodebookRefresh {
            last_used: vec![0; size],
            after,
            step: 0,
            rng: rng_for(seed, "codebook-refresh"),
        }
    }

    fn update(&mut self, store: &mut ParamStore<f32>, entries: ParamId, codes: &[usize], feats: &Tensor<f32>) {
        self.step += 1;
        for &c in codes {
            self.last_used[c] = self.step;
        }
        let dead: Vec<usize> = (0..self.last_used.len())
            .filter(|&k| self.step - self.last_used[k] >= self.after)
            .collect();
        if dead.is_empty() || feats.rows() == 0 {
            return;
        }
        let table = store.value_mut(entries);
        for k in dead {
            let r = self.rng.random_range(0..feats.rows());
            let d = feats.last_dim();
            table.data_mut()[k * d..(k + 1) * d].copy_from_slice(feats.row(r));
            self.last_used[k] = self.step;
        }
    }
}

/// Stage-2 supervision derived once from the frozen stage-1 modules:
/// teacher codes and first-pass states for every example.
pub struct Stage2Targets {
    pub codes: Vec<Vec<usize>>,
    /// `[1, L_i, d]` per example.
    pub h_1pass: Vec<Tensor<f32>>,
}

pub fn stage2_targets(
    model: &VisTrans,
    store: &ParamStore<f32>,
    vocabs: &Vocabs,
    examples: &[TrainingExample],
) -> Result<Stage2Targets> {
    let mut codes = Vec::with_capacity(examples.len());
    let mut h_1pass = Vec::with_capacity(examples.len());
    for e in examples {
        codes.extend(model.extract_target_codes(store, &[&e.tgt_image])?);
        let batch = Batch::new(&model.cfg, vocabs, &[e], None)?;
        let mut g = Graph::inference(store);
        let h = model.one_pass_states(&mut g, &batch.source, &batch.tit)?;
        h_1pass.push(g.value(h).clone());
    }
    Ok(Stage2Targets { codes, h_1pass })
}

/// Zero-padded `[B, len, d]` stack of per-example first-pass states.
fn stack_states(states: &[&Tensor<f32>], len: usize) -> Result<Tensor<f32>> {
    let d = states[0].last_dim();
    let mut data = vec![0.0f32; states.len() * len * d];
    for (b, s) in states.iter().enumerate() {
        let n = s.numel().min(len * d);
        data[b * len * d..b * len * d + n].copy_from_slice(&s.data()[..n]);
    }
    Tensor::new(vec![states.len(), len, d], data)
}

fn stage2_batch(
    model: &VisTrans,
    vocabs: &Vocabs,
    examples: &[TrainingExample],
    targets: &Stage2Targets,
    idx: &[usize],
) -> Result<(Batch, Tensor<f32>)> {
    let members: Vec<&TrainingExample> = idx.iter().map(|&i| &examples[i]).collect();
    let codes: Vec<Vec<usize>> = idx.iter().map(|&i| targets.codes[i].clone()).collect();
    let batch = Batch::new(&model.cfg, vocabs, &members, Some(&codes))?;
    let states: Vec<&Tensor<f32>> = idx.iter().map(|&i| &targets.h_1pass[i]).collect();
    let h = stack_states(&states, batch.tit.len)?;
    Ok((batch, h))
}

/// Stage 2: stage-1 modules are frozen, only the adapter and the code
/// decoder move.
pub fn train_stage2(
    model: &VisTrans,
    store: &mut ParamStore<f32>,
    vocabs: &Vocabs,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<(Vec<StepLog>, Stage2Targets)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    VisTrans::freeze_stage1(store);
    let targets = stage2_targets(model, store, vocabs, examples)?;
    let schedule = InverseSqrtSchedule {
        peak: cfg.peak_lr,
        warmup: cfg.warmup,
    };
    let mut opt = optimizer(store, cfg);
    let mut logs = Vec::new();
    for (step0, (epoch, idx)) in batch_order(examples.len(), cfg).into_iter().enumerate() {
        let (batch, h) = stage2_batch(model, vocabs, examples, &targets, &idx)?;
        let (report, grads) = {
            let mut g = Graph::new(store);
            let loss = model.stage2_loss(&mut g, &batch, Some(&h))?;
            (loss.report(&g), g.backward(loss.total)?)
        };
        store.zero_grad();
        store.accumulate(&grads);
        let step = step0 + 1;
        let lr = schedule.lr(step);
        let grad_norm = opt.step(store, lr);
        let log = StepLog {
            step,
            epoch,
            lr,
            grad_norm,
            loss: report,
        };
        on_step(&log)?;
        logs.push(log);
    }
    Ok((logs, targets))
}

/// Teacher-forced metrics over a set of examples.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TeacherForced {
    pub subword_accuracy: f64,
    pub code_accuracy: Option<f64>,
    pub char_accuracy: Option<f64>,
    /// Mean squared error of the final image against the target.
    pub image_mse: f64,
    pub back_mse: f64,
    pub text_image_mse: f64,
}

/// Runs the teacher-forced paths example by example. Code and character
/// accuracies need `targets`.
pub fn evaluate_teacher_forced(
    model: &VisTrans,
    store: &ParamStore<f32>,
    vocabs: &Vocabs,
    examples: &[TrainingExample],
    targets: Option<&Stage2Targets>,
) -> Result<TeacherForced> {
    let mut hits = [0usize; 3];
    let mut counts = [0usize; 3];
    let mut mse = [0.0f64; 3];
    let count = |hits: &mut usize, n: &mut usize, g: &Graph<'_, f32>, logits, t: &[Option<usize>]| {
        let valid = t.iter().flatten().count();
        let acc = VisTrans::token_accuracy(g, logits, t);
        *hits += (acc * valid as f64).round() as usize;
        *n += valid;
    };
    for (i, e) in examples.iter().enumerate() {
        let batch = match targets {
            Some(t) => stage2_batch(model, vocabs, examples, t, &[i])?.0,
            None => Batch::new(&model.cfg, vocabs, &[e], None)?,
        };
        let mut g = Graph::inference(store);
        let src = g.constant(batch.source.patches.cast());
        let (h_back, _, i_back2) = model.encode_background(&mut g, src)?;
        let tp = g.constant(batch.tgt_patches.cast());
        let code = model.encode_code_branch(&mut g, tp)?;
        let img = model.synthesize(&mut g, code.h_code, h_back)?;
        for (slot, (v, want)) in [(img, &batch.tgt), (i_back2, &batch.background), (code.i_code2, &batch.tgt_text)]
            .into_iter()
            .enumerate()
        {
            let got = g.value(v).data();
            mse[slot] += got
                .iter()
                .zip(want.data())
                .map(|(&a, &b)| ((a.clamp(0.0, 1.0) - b) as f64).powi(2))
                .sum::<f64>()
                / got.len() as f64;
        }
        let mt = g.constant(batch.source.mt_patches.cast());
        let h_trans = model.encode_trans(&mut g, mt)?;
        let (logits, h_1pass) = model.decode_1pass(&mut g, h_trans, &batch.tit)?;
        count(&mut hits[0], &mut counts[0], &g, logits, &batch.tit.target);
        if let Some(codes) = &batch.codes {
            let chars = model.decode_s2c(&mut g, h_1pass, &batch.tit.lengths, &batch.chars, &batch.char_seqs)?;
            if let Some(cl) = chars.logits {
                count(&mut hits[2], &mut counts[2], &g, cl, &batch.chars.target);
            }
            let logits = model.decode_2pass(&mut g, &chars, codes)?;
            count(&mut hits[1], &mut counts[1], &g, logits, &codes.target);
        }
    }
    let n = examples.len().max(1) as f64;
    let ratio = |h: usize, c: usize| (c > 0).then(|| h as f64 / c as f64);
    Ok(TeacherForced {
        subword_accuracy: ratio(hits[0], counts[0]).unwrap_or(1.0),
        code_accuracy: ratio(hits[1], counts[1]),
        char_accuracy: ratio(hits[2], counts[2]),
        image_mse: mse[0] / n,
        back_mse: mse[1] / n,
        text_image_mse: mse[2] / n,
    })
}
