use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{MaskKind, StackConfig};

/// How subword states are turned into character states before code
/// generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum S2CVariant {
    /// Subword states are used as they are.
    None,
    /// Learned 2x upsampling with a character head trained by CTC.
    Ctc,
    /// Character decoder, one character per step.
    At,
    /// Character decoder emitting `K` characters per step.
    Sat(usize),
}

impl S2CVariant {
    pub fn mask_kind(self) -> Option<MaskKind> {
        match self {
            S2CVariant::At => Some(MaskKind::Causal),
            S2CVariant::Sat(k) => Some(MaskKind::Sat(k)),
            _ => None,
        }
    }

    /// Characters emitted per decoder invocation.
    pub fn group(self) -> usize {
        match self {
            S2CVariant::Sat(k) => k,
            _ => 1,
        }
    }

    pub fn has_decoder(self) -> bool {
        matches!(self, S2CVariant::At | S2CVariant::Sat(_))
    }

    /// Decoder invocations needed for `chars` characters: `ceil(chars/K)`
    /// for the decoders, one pass for CTC and none when states are reused.
    pub fn decode_steps(self, chars: usize) -> usize {
        match self {
            S2CVariant::None => 0,
            S2CVariant::Ctc => 1,
            S2CVariant::At => chars,
            S2CVariant::Sat(k) => chars.div_ceil(k),
        }
    }
}

impl fmt::Display for S2CVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            S2CVariant::None => f.write_str("none"),
            S2CVariant::Ctc => f.write_str("ctc"),
            S2CVariant::At => f.write_str("at"),
            S2CVariant::Sat(k) => write!(f, "sat{k}"),
        }
    }
}

impl FromStr for S2CVariant {
    type Err = Error;

    /// `none`, `ctc`, `at`, `sat2`, `sat(2)` or `sat:2`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "none" => return Ok(S2CVariant::None),
            "ctc" => return Ok(S2CVariant::Ctc),
            "at" => return Ok(S2CVariant::At),
            _ => {}
        }
        let k = s
            .strip_prefix("sat")
            .map(|r| r.trim_matches(|c| c == '(' || c == ')' || c == ':'))
            .and_then(|r| r.parse::<usize>().ok())
            .ok_or_else(|| Error::Invalid(format!("unknown S2C variant `{s}`")))?;
        if k == 0 {
            return Err(Error::Invalid("SAT group size must be at least 1".into()));
        }
        Ok(S2CVariant::Sat(k))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Patch size of the background, code and image branches.
    pub patch: usize,
    /// Patch size of the translation encoder.
    pub mt_patch: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Layers in each background, code and image stack.
    pub vit_layers: usize,
    pub mt_layers: usize,
    /// Layers of the recognition and first-pass text decoders.
    pub text_layers: usize,
    pub s2c_layers: usize,
    pub code_layers: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub subword_vocab: usize,
    pub char_vocab: usize,
    pub max_subword_len: usize,
    pub max_char_len: usize,
    /// Hidden channels between the transposed convolution and the final
    /// per-pixel projection of each image head.
    pub head_channels: usize,
    pub perceptual_channels: [usize; 3],
    pub perceptual_weight: f64,
    pub label_smoothing: f64,
    pub s2c: S2CVariant,
    pub seed: u64,
}

impl ModelConfig {
    /// Small enough to train on a laptop CPU.
    pub fn tiny() -> Self {
        ModelConfig {
            height: 32,
            width: 512,
            channels: 3,
            patch: 16,
            mt_patch: 8,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            vit_layers: 2,
            mt_layers: 2,
            text_layers: 2,
            s2c_layers: 2,
            code_layers: 2,
            codebook_size: 256,
            codebook_dim: 16,
            subword_vocab: 512,
            char_vocab: 176,
            max_subword_len: 24,
            max_char_len: 48,
            head_channels: 8,
            perceptual_channels: [8, 16, 32],
            perceptual_weight: 0.1,
            label_smoothing: 0.1,
            s2c: S2CVariant::Sat(2),
            seed: 0,
        }
    }

    /// Full-size dimensions.
    pub fn paper() -> Self {
        ModelConfig {
            d_model: 512,
            d_ff: 2048,
            heads: 8,
            vit_layers: 6,
            mt_layers: 6,
            text_layers: 6,
            s2c_layers: 3,
            code_layers: 6,
            codebook_size: 8192,
            codebook_dim: 32,
            subword_vocab: 35_000,
            char_vocab: 176,
            max_subword_len: 64,
            max_char_len: 64,
            head_channels: 32,
            ..ModelConfig::tiny()
        }
    }

    /// Minute dimensions for finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            height: 8,
            width: 16,
            channels: 3,
            patch: 4,
            mt_patch: 4,
            d_model: 8,
            d_ff: 12,
            heads: 2,
            vit_layers: 1,
            mt_layers: 1,
            text_layers: 1,
            s2c_layers: 1,
            code_layers: 1,
            codebook_size: 6,
            codebook_dim: 4,
            subword_vocab: 16,
            char_vocab: 12,
            max_subword_len: 6,
            max_char_len: 8,
            head_channels: 3,
            perceptual_channels: [2, 3, 4],
            ..ModelConfig::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            "micro" => Ok(Self::micro()),
            _ => Err(Error::ConfigValue {
                field: "preset".into(),
                message: format!("unknown preset `{name}` (tiny, paper, micro)"),
            }),
        }
    }

    /// Output layers sized to the actual vocabularies.
    pub fn sized_to(&self, vocabs: &super::Vocabs) -> Self {
        ModelConfig {
            subword_vocab: vocabs.subword.len(),
            char_vocab: vocabs.chars.len(),
            ..self.clone()
        }
    }

    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn mt_patches(&self) -> usize {
        (self.height / self.mt_patch) * (self.width / self.mt_patch)
    }

    /// Number of codes describing one target image.
    pub fn code_len(&self) -> usize {
        self.patches()
    }

    pub fn stack(&self, layers: usize) -> StackConfig {
        StackConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::ConfigValue {
                field: field.into(),
                message,
            })
        };
        for (field, p) in [("patch", self.patch), ("mt_patch", self.mt_patch)] {
            if p == 0 || self.height % p != 0 || self.width % p != 0 {
                return bad(field, format!("{p} does not tile a {}x{} canvas", self.height, self.width));
            }
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model", format!("{} is not divisible into {} heads", self.d_model, self.heads));
        }
        for (field, v) in [
            ("d_ff", self.d_ff),
            ("channels", self.channels),
            ("codebook_dim", self.codebook_dim),
            ("head_channels", self.head_channels),
            ("max_subword_len", self.max_subword_len),
            ("max_char_len", self.max_char_len),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1".into());
            }
        }
        if self.codebook_size < 2 {
            return bad("codebook_size", "needs at least two entries".into());
        }
        if self.perceptual_channels.contains(&0) {
            return bad("perceptual_channels", "every level needs a channel".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing", format!("{} not in [0, 1)", self.label_smoothing));
        }
        if self.perceptual_weight < 0.0 {
            return bad("perceptual_weight", "must be non-negative".into());
        }
        if let S2CVariant::Sat(0) = self.s2c {
            return bad("s2c", "SAT group size must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_subword_len: usize,
    pub max_char_len: usize,
}

impl DecodeConfig {
    pub fn greedy(cfg: &ModelConfig) -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            max_subword_len: cfg.max_subword_len,
            max_char_len: cfg.max_char_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Strategy::Beam(0) = self.strategy {
            return Err(Error::ConfigValue {
                field: "beam".into(),
                message: "beam width must be at least 1".into(),
            });
        }
        if self.max_subword_len == 0 || self.max_char_len == 0 {
            return Err(Error::ConfigValue {
                field: "max_len".into(),
                message: "decode lengths must be at least 1".into(),
            });
        }
        Ok(())
    }
}
