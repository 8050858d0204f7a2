//! Parallel text: the bundled English-to-five-languages phrase list and
//! loaders for user-supplied pairs.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Lang {
    De,
    Fr,
    Cs,
    Ru,
    Ro,
}

impl Lang {
    pub const ALL: [Lang; 5] = [Lang::De, Lang::Fr, Lang::Cs, Lang::Ru, Lang::Ro];

    pub fn code(self) -> &'static str {
        match self {
            Lang::De => "de",
            Lang::Fr => "fr",
            Lang::Cs => "cs",
            Lang::Ru => "ru",
            Lang::Ro => "ro",
        }
    }

    /// The prefix token selecting this output language, e.g. `<de>`.
    pub fn tag(self) -> String {
        format!("<{}>", self.code())
    }

    /// Accepts a bare code (`de`) or a tag (`<de>`).
    pub fn parse(s: &str) -> Result<Lang> {
        let code = s.strip_prefix('<').and_then(|r| r.strip_suffix('>')).unwrap_or(s);
        Lang::ALL
            .into_iter()
            .find(|l| l.code() == code)
            .ok_or_else(|| Error::UnknownLanguage(s.to_string()))
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Lang> {
        Lang::parse(s)
    }
}

impl Serialize for Lang {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.tag())
    }
}

impl<'de> Deserialize<'de> for Lang {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Lang, D::Error> {
        let s = String::deserialize(d)?;
        Lang::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    #[serde(rename = "lang_tag")]
    pub lang: Lang,
    #[serde(rename = "src_text")]
    pub src: String,
    #[serde(rename = "tgt_text")]
    pub tgt: String,
}

const PHRASES: &str = include_str!("../../assets/phrases.tsv");

/// Every bundled English phrase paired with each of its five translations,
/// ordered phrase-major.
pub fn bundled_pairs() -> Vec<ParallelPair> {
    let mut out = Vec::new();
    for line in PHRASES.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        debug_assert_eq!(cols.len(), 6, "{line}");
        for (lang, tgt) in Lang::ALL.into_iter().zip(&cols[1..]) {
            out.push(ParallelPair {
                lang,
                src: cols[0].to_string(),
                tgt: tgt.to_string(),
            });
        }
    }
    out
}

/// Bundled pairs restricted to `langs`, preserving order.
pub fn bundled_pairs_for(langs: &[Lang]) -> Vec<ParallelPair> {
    bundled_pairs().into_iter().filter(|p| langs.contains(&p.lang)).collect()
}

/// Reads pairs from JSON Lines with `lang_tag`, `src_text` and `tgt_text`
/// fields; other fields are ignored, so a dataset manifest also works.
pub fn load_pairs(path: &Path) -> Result<Vec<ParallelPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
