//! Corpus BLEU with 13a tokenization and no smoothing.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

struct Rules {
    symbols: Regex,
    period_comma_after: Regex,
    period_comma_before: Regex,
    dash: Regex,
}

fn rules() -> &'static Rules {
    static RULES: OnceLock<Rules> = OnceLock::new();
    RULES.get_or_init(|| Rules {
        symbols: Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").expect("regex"),
        period_comma_after: Regex::new(r"([^0-9])([\.,])").expect("regex"),
        period_comma_before: Regex::new(r"([\.,])([^0-9])").expect("regex"),
        dash: Regex::new(r"([0-9])(-)").expect("regex"),
    })
}

/// The mteval-v13a tokenizer: punctuation and symbols split off, periods
/// and commas split unless between digits, dashes after digits split.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let r = rules();
    let s = format!(" {s} ");
    let s = r.symbols.replace_all(&s, " $1 ");
    let s = r.period_comma_after.replace_all(&s, "$1 $2 ");
    let s = r.period_comma_before.replace_all(&s, " $1 $2");
    let s = r.dash.replace_all(&s, "$1 $2 ");
    s.split_whitespace().map(str::to_owned).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Sufficient statistics of a corpus: clipped matches and candidate
/// n-gram totals per order, plus hypothesis and effective reference length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn new(max_order: usize) -> Self {
        BleuStats {
            matches: vec![0; max_order],
            totals: vec![0; max_order],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    /// Adds one segment. The reference length is the one closest to the
    /// hypothesis, the shorter on ties.
    pub fn add(&mut self, hyp: &[String], refs: &[Vec<String>]) {
        self.hyp_len += hyp.len();
        self.ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(hyp.len()), r))
            .unwrap_or(0);
        for n in 1..=self.matches.len() {
            let hyp_counts = ngram_counts(hyp, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
            for (g, c) in hyp_counts {
                self.matches[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                self.totals[n - 1] += c;
            }
        }
    }

    /// Score in `[0, 100]`; any zero precision gives 0.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_p: f64 = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / self.matches.len() as f64;
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * log_p.exp()
    }
}

/// Corpus BLEU of `hypotheses` against `references[i]` (one or more
/// references per line) over n-gram orders `1..=max_order`.
pub fn corpus_bleu<H, R>(hypotheses: &[H], references: &[Vec<R>], max_order: usize) -> Result<f64>
where
    H: AsRef<str>,
    R: AsRef<str>,
{
    if hypotheses.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} hypotheses against {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_order == 0 {
        return Err(Error::Metric("BLEU order must be at least 1".into()));
    }
    let mut stats = BleuStats::new(max_order);
    for (h, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Metric("hypothesis without a reference".into()));
        }
        let refs: Vec<Vec<String>> = refs.iter().map(|r| tokenize_13a(r.as_ref())).collect();
        stats.add(&tokenize_13a(h.as_ref()), &refs);
    }
    Ok(stats.score())
}
