//! Token vocabularies: byte-pair subwords, characters and image codes.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use super::corpus::Lang;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const BASE_SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Marks a word that followed a space in subword tokens.
pub const SPACE_MARK: char = '▁';

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabKind {
    Subword,
    Char,
    /// Bare codebook indices, `<c0>` to `<c{V-1}>`, with no specials.
    Code,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    kind: VocabKind,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// Subword merge rules in the order they were learned.
    merges: Vec<(String, String)>,
    specials: usize,
}

fn specials_for(kind: VocabKind) -> Vec<String> {
    match kind {
        VocabKind::Subword => BASE_SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(Lang::ALL.iter().map(|l| l.tag()))
            .collect(),
        VocabKind::Char => BASE_SPECIALS.iter().map(|s| s.to_string()).collect(),
        VocabKind::Code => Vec::new(),
    }
}

impl Vocabulary {
    fn from_tokens(kind: VocabKind, tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let specials = specials_for(kind);
        if tokens.len() < specials.len() || tokens[..specials.len()] != specials[..] {
            return Err(Error::Vocab(format!("{kind:?} vocabulary must start with {specials:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            kind,
            specials: specials.len(),
            tokens,
            index,
            merges,
        })
    }

    /// Specials followed by every character of `texts`, in code-point order.
    pub fn chars<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        let set: BTreeSet<char> = texts.iter().flat_map(|t| t.as_ref().chars().collect::<Vec<_>>()).collect();
        let mut tokens = specials_for(VocabKind::Char);
        tokens.extend(set.into_iter().map(String::from));
        Self::from_tokens(VocabKind::Char, tokens, Vec::new())
    }

    pub fn codes(size: usize) -> Self {
        let tokens = (0..size).map(|i| format!("<c{i}>")).collect();
        Self::from_tokens(VocabKind::Code, tokens, Vec::new()).expect("code tokens are unique")
    }

    /// Rebuilds a vocabulary from its token list and merge rules.
    pub fn from_parts(kind: VocabKind, tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        Self::from_tokens(kind, tokens, merges)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.specials
    }

    pub fn lang_id(&self, lang: Lang) -> Result<usize> {
        self.id(&lang.tag()).ok_or_else(|| Error::UnknownLanguage(lang.tag()))
    }

    /// Language whose tag has this id, if any.
    pub fn lang_of(&self, id: usize) -> Option<Lang> {
        Lang::ALL.into_iter().find(|l| self.id(&l.tag()) == Some(id))
    }

    /// Token ids of `text`, with no framing tokens. Characters outside the
    /// vocabulary map to [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.kind {
            VocabKind::Char => text
                .chars()
                .map(|c| self.id(c.encode_utf8(&mut [0; 4])).unwrap_or(UNK))
                .collect(),
            VocabKind::Subword => {
                let ranks: HashMap<(&str, &str), usize> = self
                    .merges
                    .iter()
                    .enumerate()
                    .map(|(r, (a, b))| ((a.as_str(), b.as_str()), r))
                    .collect();
                words(text)
                    .into_iter()
                    .flat_map(|w| apply_merges(w, &ranks))
                    .map(|t| self.id(&t).unwrap_or(UNK))
                    .collect()
            }
            VocabKind::Code => text
                .split_whitespace()
                .map(|t| self.id(t).unwrap_or(UNK))
                .collect(),
        }
    }

    /// Concatenates tokens, dropping specials; unknown ids and [`UNK`]
    /// become U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.kind != VocabKind::Code && id == UNK {
                out.push('\u{fffd}');
                continue;
            }
            if self.is_special(id) {
                continue;
            }
            match self.token(id) {
                Some(t) if self.kind == VocabKind::Subword => {
                    out.extend(t.chars().map(|c| if c == SPACE_MARK { ' ' } else { c }))
                }
                Some(t) => {
                    if self.kind == VocabKind::Code && !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(t)
                }
                None => out.push('\u{fffd}'),
            }
        }
        out
    }

    /// Writes one token per line to `path`; subword merges go to
    /// `path.merges` as space-separated pairs.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        if self.kind == VocabKind::Subword {
            let mp = merges_path(path);
            let mut m: String = self.merges.iter().map(|(a, b)| format!("{a} {b}\n")).collect();
            if m.is_empty() {
                m.push('\n');
            }
            fs::write(&mp, m).map_err(|e| Error::io(&mp, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path, kind: VocabKind) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.split_terminator('\n').map(String::from).collect();
        let mut merges = Vec::new();
        if kind == VocabKind::Subword {
            let mp = merges_path(path);
            let m = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
            for (n, line) in m.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
                let (a, b) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::Vocab(format!("{}: bad merge on line {}", mp.display(), n + 1)))?;
                merges.push((a.to_string(), b.to_string()));
            }
        }
        Self::from_tokens(kind, tokens, merges)
    }
}

fn merges_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".merges");
    PathBuf::from(s)
}

/// Splits at spaces; each space becomes a [`SPACE_MARK`] prefix on the
/// following word, so concatenating the words restores the text exactly.
fn words(text: &str) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for c in text.chars() {
        if c == ' ' || out.is_empty() {
            out.push(Vec::new());
        }
        let sym = if c == ' ' { SPACE_MARK } else { c };
        out.last_mut().expect("pushed above").push(sym.to_string());
    }
    out
}

fn apply_merges(mut word: Vec<String>, ranks: &HashMap<(&str, &str), usize>) -> Vec<String> {
    loop {
        let best = word
            .windows(2)
            .enumerate()
            .filter_map(|(i, w)| ranks.get(&(w[0].as_str(), w[1].as_str())).map(|&r| (r, i)))
            .min();
        let Some((_, i)) = best else { return word };
        let right = word.remove(i + 1);
        word[i].push_str(&right);
    }
}

/// Learns byte-pair merges over `lines` until the vocabulary holds
/// `vocab_size` tokens or no adjacent pair occurs twice. Each round merges
/// the most frequent pair, breaking ties by the smaller `(left, right)`.
pub fn train_bpe<S: AsRef<str>>(lines: &[S], vocab_size: usize) -> Result<Vocabulary> {
    if lines.iter().all(|l| l.as_ref().is_empty()) {
        return Err(Error::Vocab("empty corpus".into()));
    }
    let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
    for l in lines {
        for w in words(l.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let charset: BTreeSet<String> = counts.keys().flatten().cloned().collect();
    let mut tokens = specials_for(VocabKind::Subword);
    let floor = tokens.len() + charset.len();
    if vocab_size < floor {
        return Err(Error::Vocab(format!(
            "vocabulary size {vocab_size} below specials plus charset ({floor})"
        )));
    }
    tokens.extend(charset);
    let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut word_list: Vec<(Vec<String>, usize)> = counts.into_iter().collect();
    word_list.sort();
    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (w, n) in &word_list {
            for p in w.windows(2) {
                *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += n;
            }
        }
        let Some((&(a, b), &n)) = pairs
            .iter()
            .max_by(|(pa, na), (pb, nb)| na.cmp(nb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        if n < 2 {
            break;
        }
        let (a, b) = (a.to_string(), b.to_string());
        let joined = format!("{a}{b}");
        for (w, _) in &mut word_list {
            let mut i = 0;
            while i + 1 < w.len() {
                if w[i] == a && w[i + 1] == b {
                    w[i] = joined.clone();
                    w.remove(i + 1);
                }
                i += 1;
            }
        }
        if known.insert(joined.clone()) {
            tokens.push(joined);
        }
        merges.push((a, b));
    }
    Vocabulary::from_tokens(VocabKind::Subword, tokens, merges)
}
