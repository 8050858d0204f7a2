//! Finite-difference checks of both training objectives at micro dims.

use rand::Rng as _;

use super::{Batch, ModelConfig, S2CVariant, VisTrans, Vocabs};
use crate::data::{train_bpe, Lang, TrainingExample, Vocabulary};
use crate::error::Result;
use crate::image::Image;
use crate::rng::rng_for;
use crate::tensor::{finite_diff_check, FdOptions, FdReport, ParamStore};

const TEXTS: [(&str, &str, Lang); 2] = [("ab ba", "ba ab", Lang::De), ("aab", "bba", Lang::Ru)];

/// FD result for one named loss term.
#[derive(Clone, Debug)]
pub struct TermCheck {
    pub stage: u8,
    pub s2c: S2CVariant,
    pub term: &'static str,
    pub report: FdReport,
}

/// Small vocabularies over a two-letter alphabet.
pub fn fixture_vocabs() -> Vocabs {
    let lines: Vec<&str> = TEXTS.iter().flat_map(|(s, t, _)| [*s, *t]).collect();
    Vocabs {
        subword: train_bpe(&lines, 14).expect("fixture corpus"),
        chars: Vocabulary::chars(&lines).expect("fixture corpus"),
    }
}

/// The micro preset sized to `vocabs`.
pub fn fixture_config(vocabs: &Vocabs, s2c: S2CVariant) -> ModelConfig {
    ModelConfig {
        subword_vocab: vocabs.subword.len(),
        char_vocab: vocabs.chars.len(),
        s2c,
        ..ModelConfig::micro()
    }
}

/// Uniform-noise image on the configured canvas.
pub fn noise_image(cfg: &ModelConfig, seed: u64) -> Image {
    let mut rng = rng_for(seed, "noise");
    let n = cfg.height * cfg.width * cfg.channels;
    let data = (0..n).map(|_| rng.random::<f32>()).collect();
    Image::new(cfg.height, cfg.width, cfg.channels, data).expect("canvas size")
}

/// Two examples with noise layers and the fixture texts.
pub fn fixture_examples(cfg: &ModelConfig) -> Vec<TrainingExample> {
    TEXTS
        .iter()
        .enumerate()
        .map(|(i, &(s, t, lang))| {
            let base = 10 * i as u64;
            TrainingExample {
                src_image: noise_image(cfg, base),
                background: noise_image(cfg, base + 1),
                tgt_image: noise_image(cfg, base + 2),
                tgt_text_image: noise_image(cfg, base + 3),
                src_text: s.into(),
                tgt_text: t.into(),
                lang,
                seed: i as u64,
            }
        })
        .collect()
}

/// Checks every term of the stage-1 loss (with `s2c` fixing the model
/// layout) and of the stage-2 loss for each variant in `variants`.
///
/// Terms are checked separately: a gradient of size `g` is only resolvable
/// by central differences when `g` is well above `ulp(loss) / eps`, and the
/// individual terms are much smaller than their sum. Quantization is
/// replayed from a frozen state so the stage-1 terms are smooth and their
/// exact gradient is the straight-through gradient.
pub fn check_objectives(variants: &[S2CVariant], opts: &FdOptions) -> Result<Vec<TermCheck>> {
    let vocabs = fixture_vocabs();
    let mut out = Vec::new();
    {
        let s2c = variants.first().copied().unwrap_or(S2CVariant::Sat(2));
        let cfg = fixture_config(&vocabs, s2c);
        let examples = fixture_examples(&cfg);
        let refs: Vec<_> = examples.iter().collect();
        let mut store = ParamStore::<f64>::new();
        let model = VisTrans::new(&cfg, &mut store)?;
        let batch = Batch::new(&cfg, &vocabs, &refs, None)?;
        let frozen = model.freeze_vq(&store, &batch)?;
        let names = stage1_terms();
        for (i, term) in names.iter().enumerate() {
            let report = finite_diff_check(
                &store,
                |g| Ok(model.stage1_loss_frozen(g, &batch, &frozen)?.parts[i].1),
                opts,
            )?;
            out.push(TermCheck {
                stage: 1,
                s2c,
                term,
                report,
            });
        }
    }
    for &s2c in variants {
        let cfg = fixture_config(&vocabs, s2c);
        let examples = fixture_examples(&cfg);
        let refs: Vec<_> = examples.iter().collect();
        let mut store = ParamStore::<f64>::new();
        let model = VisTrans::new(&cfg, &mut store)?;
        let tgt: Vec<_> = examples.iter().map(|e| &e.tgt_image).collect();
        let codes = model.extract_target_codes(&store, &tgt)?;
        let batch = Batch::new(&cfg, &vocabs, &refs, Some(&codes))?;
        VisTrans::freeze_stage1(&mut store);
        for (i, term) in ["ce_char", "ce_code"].into_iter().enumerate() {
            let report = finite_diff_check(&store, |g| Ok(model.stage2_loss(g, &batch, None)?.parts[i].1), opts)?;
            out.push(TermCheck {
                stage: 2,
                s2c,
                term,
                report,
            });
        }
    }
    Ok(out)
}

/// Stage-1 term names in the order the objective sums them.
pub fn stage1_terms() -> [&'static str; 9] {
    [
        "img_code1",
        "img_code2",
        "commitment",
        "codebook",
        "img_back1",
        "img_back2",
        "ce_tit",
        "ce_ocr",
        "img_final",
    ]
}
