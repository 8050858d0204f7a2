//! Recognizer-mediated evaluation of a system over a manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bleu::{tokenize_13a, BleuStats};
use super::fid::{fid_from_features, FeatureExtractor};
use crate::data::manifest::{load_example, ManifestRecord};
use crate::data::{Lang, TrainingExample};
use crate::error::Result;
use crate::image::Image;

/// Maps an image to text.
pub trait Recognize {
    fn id(&self) -> String;
    fn recognize(&self, img: &Image) -> Result<String>;
}

impl Recognize for super::Recognizer {
    fn id(&self) -> String {
        super::Recognizer::id(self)
    }

    fn recognize(&self, img: &Image) -> Result<String> {
        super::Recognizer::recognize(self, img)
    }
}

/// Golden mode scores the reference target images themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    System,
    Golden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    /// `en-<lang>`.
    pub direction: String,
    pub examples: usize,
    pub bleu: f64,
    pub char_accuracy: f64,
    pub fid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedExample {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub system: String,
    pub mode: EvalMode,
    pub directions: Vec<DirectionMetrics>,
    /// Unweighted means over directions.
    pub average_bleu: f64,
    pub average_char_accuracy: f64,
    pub average_fid: f64,
    pub examples: usize,
    pub skipped: Vec<SkippedExample>,
    pub recognizer_id: String,
    pub extractor_id: String,
    pub decode: String,
    pub bleu_max_order: usize,
}

/// The rest of a report's provenance.
pub struct EvalSetup<'a> {
    pub system: &'a str,
    pub mode: EvalMode,
    pub decode: &'a str,
    pub recognizer: &'a dyn Recognize,
    pub extractor: &'a dyn FeatureExtractor,
    pub bleu_max_order: usize,
}

pub fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - edits / reference characters` summed over the corpus, floored at 0.
/// An empty reference corpus scores 1 when every hypothesis is empty.
pub fn char_accuracy<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> f64 {
    let (mut edits, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<char> = h.as_ref().chars().collect();
        let r: Vec<char> = r.as_ref().chars().collect();
        edits += levenshtein(&h, &r);
        total += r.len();
    }
    if total == 0 {
        return if edits == 0 { 1.0 } else { 0.0 };
    }
    (1.0 - edits as f64 / total as f64).max(0.0)
}

struct Scored {
    lang: Lang,
    hyp: String,
    reference: String,
    out_features: Vec<f64>,
    ref_features: Vec<f64>,
}

/// Scores `records` (paths relative to `root`). In system mode each source
/// image goes through `translate`; in golden mode the reference target is
/// used instead. Examples whose files or translation fail are skipped and
/// listed.
pub fn evaluate_system(
    root: &Path,
    records: &[ManifestRecord],
    mut translate: impl FnMut(&TrainingExample) -> Result<Image>,
    setup: &EvalSetup<'_>,
) -> Result<MetricsReport> {
    let mut scored = Vec::new();
    let mut skipped = Vec::new();
    for r in records {
        let attempt = (|| -> Result<Scored> {
            let e = load_example(root, r)?;
            let out = match setup.mode {
                EvalMode::System => translate(&e)?,
                EvalMode::Golden => e.tgt_image.clone(),
            };
            Ok(Scored {
                lang: e.lang,
                hyp: setup.recognizer.recognize(&out)?,
                out_features: setup.extractor.extract(&out)?,
                ref_features: setup.extractor.extract(&e.tgt_image)?,
                reference: e.tgt_text,
            })
        })();
        match attempt {
            Ok(s) => scored.push(s),
            Err(err) => skipped.push(SkippedExample {
                id: r.id.clone(),
                error: err.to_string(),
            }),
        }
    }
    let mut by_lang: BTreeMap<Lang, Vec<&Scored>> = BTreeMap::new();
    for s in &scored {
        by_lang.entry(s.lang).or_default().push(s);
    }
    let mut directions = Vec::new();
    for (lang, items) in &by_lang {
        let mut stats = BleuStats::new(setup.bleu_max_order);
        for s in items {
            stats.add(&tokenize_13a(&s.hyp), &[tokenize_13a(&s.reference)]);
        }
        let hyps: Vec<&str> = items.iter().map(|s| s.hyp.as_str()).collect();
        let refs: Vec<&str> = items.iter().map(|s| s.reference.as_str()).collect();
        let out: Vec<Vec<f64>> = items.iter().map(|s| s.out_features.clone()).collect();
        let reference: Vec<Vec<f64>> = items.iter().map(|s| s.ref_features.clone()).collect();
        directions.push(DirectionMetrics {
            direction: format!("en-{}", lang.code()),
            examples: items.len(),
            bleu: stats.score(),
            char_accuracy: char_accuracy(&hyps, &refs),
            fid: fid_from_features(&out, &reference)?,
        });
    }
    let mean = |f: fn(&DirectionMetrics) -> f64| {
        if directions.is_empty() {
            0.0
        } else {
            directions.iter().map(f).sum::<f64>() / directions.len() as f64
        }
    };
    Ok(MetricsReport {
        system: setup.system.to_owned(),
        mode: setup.mode,
        average_bleu: mean(|d| d.bleu),
        average_char_accuracy: mean(|d| d.char_accuracy),
        average_fid: mean(|d| d.fid),
        directions,
        examples: scored.len(),
        skipped,
        recognizer_id: setup.recognizer.id(),
        extractor_id: setup.extractor.id(),
        decode: setup.decode.to_owned(),
        bleu_max_order: setup.bleu_max_order,
    })
}
