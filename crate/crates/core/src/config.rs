//! Run configuration: flat `key = value` text with `[section]` headers.
//!
//! ```text
//! preset = tiny
//! seed = 7
//!
//! [model]
//! s2c = sat2
//!
//! [stage1]
//! epochs = 250
//! lr = 3e-3
//! ```
//!
//! Keys before the first header belong to the top level. `#` starts a
//! comment line. Unknown sections and keys are errors naming the line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::Lang;
use crate::error::{Error, Result};
use crate::model::train::TrainConfig;
use crate::model::{DecodeConfig, ModelConfig, S2CVariant, Strategy};

/// One `key = value` entry with the line it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parsed text, sections in order of first appearance. The top level is
/// the section named `""`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Document {
    pub sections: Vec<(String, Vec<Entry>)>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document {
            sections: vec![(String::new(), Vec::new())],
        };
        let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            if let Some(rest) = t.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config {
                    line,
                    message: format!("unterminated section header `{t}`"),
                })?;
                let name = name.trim().to_owned();
                if doc.sections.iter().any(|(n, _)| *n == name) {
                    return Err(Error::Config {
                        line,
                        message: format!("section [{name}] appears twice"),
                    });
                }
                doc.sections.push((name, Vec::new()));
                continue;
            }
            let (k, v) = t.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got `{t}`"),
            })?;
            let key = k.trim().to_owned();
            if key.is_empty() {
                return Err(Error::Config {
                    line,
                    message: "empty key".into(),
                });
            }
            let (section, entries) = doc.sections.last_mut().expect("top level exists");
            if let Some(first) = seen.insert((section.clone(), key.clone()), line) {
                return Err(Error::Config {
                    line,
                    message: format!("`{key}` already set on line {first}"),
                });
            }
            entries.push(Entry {
                key,
                value: v.trim().to_owned(),
                line,
            });
        }
        Ok(doc)
    }

    pub fn section(&self, name: &str) -> Option<&[Entry]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, e)| e.as_slice())
    }

    /// Removes and returns a section.
    pub fn take(&mut self, name: &str) -> Option<Vec<Entry>> {
        let i = self.sections.iter().position(|(n, _)| n == name)?;
        Some(self.sections.remove(i).1)
    }
}

fn value_err(field: &str, line: usize, message: impl std::fmt::Display) -> Error {
    Error::Config {
        line,
        message: format!("`{field}`: {message}"),
    }
}

fn parse_num<V: FromStr>(field: &str, e: &Entry) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    e.value.parse().map_err(|err| value_err(field, e.line, format!("`{}` ({err})", e.value)))
}

fn parse_optional<V: FromStr>(field: &str, e: &Entry) -> Result<Option<V>>
where
    V::Err: std::fmt::Display,
{
    if e.value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_num(field, e).map(Some)
    }
}

fn fmt_optional<V: std::fmt::Display>(v: &Option<V>) -> String {
    v.as_ref().map_or_else(|| "none".to_owned(), ToString::to_string)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Manifest used for training and vocabularies.
    pub train: Option<String>,
    /// Manifest scored by `evaluate`.
    pub eval: Option<String>,
    /// Examples written by `synth`.
    pub count: usize,
    pub langs: Vec<Lang>,
    /// Parallel pairs as JSON Lines; the bundled corpus when unset.
    pub pairs: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            eval: None,
            count: 32,
            langs: vec![Lang::De, Lang::Fr],
            pairs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub bleu_order: usize,
    /// Seed of the random feature extractor used for FID.
    pub extractor_seed: u64,
    /// Recognizer checkpoint; trained when unset.
    pub recognizer: Option<String>,
    pub recognizer_steps: usize,
    /// Fresh renderings synthesized for recognizer training, on top of any
    /// training manifest.
    pub recognizer_synth: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bleu_order: 4,
            extractor_seed: 0,
            recognizer: None,
            recognizer_steps: 3000,
            recognizer_synth: 1024,
        }
    }
}

/// Everything a command needs, validated as a whole.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

pub const SECTIONS: [&str; 6] = ["model", "stage1", "stage2", "decode", "data", "eval"];

impl RunConfig {
    /// Defaults of a named preset. The training schedules are the ones that
    /// memorize the 32-example set on one CPU core.
    pub fn preset(name: &str) -> Result<Self> {
        let mut model = ModelConfig::preset(name)?;
        model.seed = 0;
        let stage1 = TrainConfig {
            epochs: 250,
            batch_size: 4,
            peak_lr: 3e-3,
            warmup: 300,
            ..TrainConfig::default()
        };
        let stage2 = TrainConfig {
            epochs: 75,
            batch_size: 8,
            peak_lr: 3e-3,
            warmup: 50,
            codebook_refresh: None,
            ..TrainConfig::default()
        };
        Ok(RunConfig {
            preset: name.to_owned(),
            seed: 0,
            decode: DecodeConfig::greedy(&model),
            model,
            stage1,
            stage2,
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        })
    }

    /// Parses `text` on top of its `preset` (default `tiny`, or
    /// `preset_override` when given).
    pub fn parse(text: &str, preset_override: Option<&str>) -> Result<Self> {
        Self::from_document(&Document::parse(text)?, preset_override)
    }

    pub fn load(path: &Path, preset_override: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, preset_override)
    }

    pub fn from_document(doc: &Document, preset_override: Option<&str>) -> Result<Self> {
        let top = doc.section("").unwrap_or(&[]);
        let preset = match (preset_override, top.iter().find(|e| e.key == "preset")) {
            (Some(p), _) => p.to_owned(),
            (None, Some(e)) => e.value.clone(),
            (None, None) => "tiny".to_owned(),
        };
        let mut cfg = Self::preset(&preset).map_err(|err| match top.iter().find(|e| e.key == "preset") {
            Some(e) if preset_override.is_none() => value_err("preset", e.line, err),
            _ => err,
        })?;
        for (name, entries) in &doc.sections {
            for e in entries {
                cfg.apply(name, e)?;
            }
        }
        cfg.decode.strategy = match cfg.decode.strategy {
            Strategy::Beam(1) => Strategy::Greedy,
            s => s,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, e: &Entry) -> Result<()> {
        let key = e.key.as_str();
        let unknown = || Error::Config {
            line: e.line,
            message: if section.is_empty() {
                format!("unknown key `{key}`")
            } else {
                format!("unknown key `{section}.{key}`")
            },
        };
        match section {
            "" => match key {
                "preset" => {}
                "seed" => self.seed = parse_num(key, e)?,
                _ => return Err(unknown()),
            },
            "model" => self.apply_model(e).ok_or_else(unknown)??,
            "stage1" | "stage2" => {
                let t = if section == "stage1" { &mut self.stage1 } else { &mut self.stage2 };
                match key {
                    "epochs" => t.epochs = parse_num(key, e)?,
                    "batch_size" => t.batch_size = parse_num(key, e)?,
                    "lr" => t.peak_lr = parse_num(key, e)?,
                    "warmup" => t.warmup = parse_num(key, e)?,
                    "weight_decay" => t.weight_decay = parse_num(key, e)?,
                    "clip_norm" => t.clip_norm = parse_optional(key, e)?,
                    "codebook_refresh" if section == "stage1" => t.codebook_refresh = parse_optional(key, e)?,
                    _ => return Err(unknown()),
                }
            }
            "decode" => match key {
                "beam" => {
                    let w: usize = parse_num(key, e)?;
                    if w == 0 {
                        return Err(value_err(key, e.line, "beam width must be at least 1"));
                    }
                    self.decode.strategy = Strategy::Beam(w);
                }
                "max_subword_len" => self.decode.max_subword_len = parse_num(key, e)?,
                "max_char_len" => self.decode.max_char_len = parse_num(key, e)?,
                _ => return Err(unknown()),
            },
            "data" => match key {
                "train" => self.data.train = Some(e.value.clone()),
                "eval" => self.data.eval = Some(e.value.clone()),
                "count" => self.data.count = parse_num(key, e)?,
                "pairs" => self.data.pairs = Some(e.value.clone()),
                "langs" => {
                    self.data.langs = e
                        .value
                        .split(',')
                        .map(|s| Lang::parse(s.trim()).map_err(|err| value_err(key, e.line, err)))
                        .collect::<Result<_>>()?
                }
                _ => return Err(unknown()),
            },
            "eval" => match key {
                "bleu_order" => self.eval.bleu_order = parse_num(key, e)?,
                "extractor_seed" => self.eval.extractor_seed = parse_num(key, e)?,
                "recognizer" => self.eval.recognizer = Some(e.value.clone()),
                "recognizer_steps" => self.eval.recognizer_steps = parse_num(key, e)?,
                "recognizer_synth" => self.eval.recognizer_synth = parse_num(key, e)?,
                _ => return Err(unknown()),
            },
            _ => {
                return Err(Error::Config {
                    line: e.line,
                    message: format!("unknown section [{section}]"),
                })
            }
        }
        Ok(())
    }

    /// `None` when the key is not a model field.
    fn apply_model(&mut self, e: &Entry) -> Option<Result<()>> {
        let m = &mut self.model;
        let key = e.key.as_str();
        let usize_field: Option<&mut usize> = match key {
            "height" => Some(&mut m.height),
            "width" => Some(&mut m.width),
            "channels" => Some(&mut m.channels),
            "patch" => Some(&mut m.patch),
            "mt_patch" => Some(&mut m.mt_patch),
            "d_model" => Some(&mut m.d_model),
            "d_ff" => Some(&mut m.d_ff),
            "heads" => Some(&mut m.heads),
            "vit_layers" => Some(&mut m.vit_layers),
            "mt_layers" => Some(&mut m.mt_layers),
            "text_layers" => Some(&mut m.text_layers),
            "s2c_layers" => Some(&mut m.s2c_layers),
            "code_layers" => Some(&mut m.code_layers),
            "codebook_size" => Some(&mut m.codebook_size),
            "codebook_dim" => Some(&mut m.codebook_dim),
            "subword_vocab" => Some(&mut m.subword_vocab),
            "char_vocab" => Some(&mut m.char_vocab),
            "max_subword_len" => Some(&mut m.max_subword_len),
            "max_char_len" => Some(&mut m.max_char_len),
            "head_channels" => Some(&mut m.head_channels),
            _ => None,
        };
        if let Some(slot) = usize_field {
            return Some(parse_num(key, e).map(|v| *slot = v));
        }
        Some(match key {
            "perceptual_weight" => parse_num(key, e).map(|v| m.perceptual_weight = v),
            "label_smoothing" => parse_num(key, e).map(|v| m.label_smoothing = v),
            "s2c" => e
                .value
                .parse::<S2CVariant>()
                .map(|v| m.s2c = v)
                .map_err(|err| value_err(key, e.line, err)),
            "perceptual_channels" => {
                let parts: Vec<&str> = e.value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Some(Err(value_err(key, e.line, "expects three comma-separated channel counts")));
                }
                let mut out = [0; 3];
                for (slot, p) in out.iter_mut().zip(parts) {
                    match p.parse() {
                        Ok(v) => *slot = v,
                        Err(err) => return Some(Err(value_err(key, e.line, format!("`{p}` ({err})")))),
                    }
                }
                m.perceptual_channels = out;
                Ok(())
            }
            _ => return None,
        })
    }

    /// Model config with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn stage_config(&self, stage: u8) -> TrainConfig {
        let t = if stage == 1 { &self.stage1 } else { &self.stage2 };
        TrainConfig {
            seed: self.seed,
            ..t.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.decode.validate()?;
        if self.data.langs.is_empty() {
            return Err(Error::ConfigValue {
                field: "data.langs".into(),
                message: "needs at least one language".into(),
            });
        }
        if self.eval.bleu_order == 0 {
            return Err(Error::ConfigValue {
                field: "eval.bleu_order".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Canonical text; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: &dyn std::fmt::Display| {
            writeln!(s, "{k} = {v}").expect("string write");
        };
        kv(&mut s, "preset", &self.preset);
        kv(&mut s, "seed", &self.seed);
        s.push_str("\n[model]\n");
        for (k, v) in [
            ("height", m.height),
            ("width", m.width),
            ("channels", m.channels),
            ("patch", m.patch),
            ("mt_patch", m.mt_patch),
            ("d_model", m.d_model),
            ("d_ff", m.d_ff),
            ("heads", m.heads),
            ("vit_layers", m.vit_layers),
            ("mt_layers", m.mt_layers),
            ("text_layers", m.text_layers),
            ("s2c_layers", m.s2c_layers),
            ("code_layers", m.code_layers),
            ("codebook_size", m.codebook_size),
            ("codebook_dim", m.codebook_dim),
            ("subword_vocab", m.subword_vocab),
            ("char_vocab", m.char_vocab),
            ("max_subword_len", m.max_subword_len),
            ("max_char_len", m.max_char_len),
            ("head_channels", m.head_channels),
        ] {
            kv(&mut s, k, &v);
        }
        let pc = m.perceptual_channels;
        kv(&mut s, "perceptual_channels", &format!("{},{},{}", pc[0], pc[1], pc[2]));
        kv(&mut s, "perceptual_weight", &m.perceptual_weight);
        kv(&mut s, "label_smoothing", &m.label_smoothing);
        kv(&mut s, "s2c", &m.s2c);
        for (name, t) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            writeln!(s, "\n[{name}]").expect("string write");
            kv(&mut s, "epochs", &t.epochs);
            kv(&mut s, "batch_size", &t.batch_size);
            kv(&mut s, "lr", &t.peak_lr);
            kv(&mut s, "warmup", &t.warmup);
            kv(&mut s, "weight_decay", &t.weight_decay);
            kv(&mut s, "clip_norm", &fmt_optional(&t.clip_norm));
            if name == "stage1" {
                kv(&mut s, "codebook_refresh", &fmt_optional(&t.codebook_refresh));
            }
        }
        s.push_str("\n[decode]\n");
        let beam = match self.decode.strategy {
            Strategy::Greedy => 1,
            Strategy::Beam(w) => w,
        };
        kv(&mut s, "beam", &beam);
        kv(&mut s, "max_subword_len", &self.decode.max_subword_len);
        kv(&mut s, "max_char_len", &self.decode.max_char_len);
        s.push_str("\n[data]\n");
        for (k, v) in [("train", &self.data.train), ("eval", &self.data.eval), ("pairs", &self.data.pairs)] {
            if let Some(v) = v {
                kv(&mut s, k, v);
            }
        }
        kv(&mut s, "count", &self.data.count);
        let langs: Vec<&str> = self.data.langs.iter().map(|l| l.code()).collect();
        kv(&mut s, "langs", &langs.join(","));
        s.push_str("\n[eval]\n");
        kv(&mut s, "bleu_order", &self.eval.bleu_order);
        kv(&mut s, "extractor_seed", &self.eval.extractor_seed);
        if let Some(r) = &self.eval.recognizer {
            kv(&mut s, "recognizer", r);
        }
        kv(&mut s, "recognizer_steps", &self.eval.recognizer_steps);
        kv(&mut s, "recognizer_synth", &self.eval.recognizer_synth);
        s
    }
}
