//! Synthetic homophone language and character vocabulary folding.

use std::collections::BTreeMap;
use std::path::Path;

use numerics::Rng;

use super::{CorpusError, Result};
use crate::ctc::Vocab;

/// First glyph of the synthetic script; character `i` is `U+4E00 + i`.
const GLYPH_BASE: u32 = 0x4E00;

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageConfig {
    pub n_chars: usize,
    pub n_classes: usize,
    /// Markov order of the sentence grammar (context of `order - 1` chars).
    pub order: usize,
    pub n_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Successors per grammar context.
    pub branching: usize,
    pub zipf_exponent: f64,
    /// Sentence topics; each topic has its own successor tables, so the
    /// whole sentence carries information a short n-gram window lacks.
    pub topics: usize,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        Self {
            n_chars: 60,
            n_classes: 24,
            order: 3,
            n_sentences: 1000,
            min_len: 5,
            max_len: 12,
            branching: 6,
            zipf_exponent: 1.0,
            topics: 4,
        }
    }
}

impl LanguageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::Config(m.into()));
        if self.n_classes < 2 || self.n_chars < self.n_classes {
            return bad("need n_chars >= n_classes >= 2");
        }
        if self.order == 0 || self.n_sentences == 0 || self.branching == 0 || self.topics == 0 {
            return bad("order, sentence count, branching and topics must be positive");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad("zipf exponent must be finite and nonnegative");
        }
        if char::from_u32(GLYPH_BASE + self.n_chars as u32).is_none() {
            return bad("too many characters");
        }
        Ok(())
    }
}

/// Characters with their pronunciation class and corpus frequency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    chars: Vec<char>,
    classes: Vec<usize>,
    counts: Vec<u64>,
    index: BTreeMap<char, usize>,
}

impl Lexicon {
    pub fn new(entries: Vec<(char, usize, u64)>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, &(c, _, _)) in entries.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(CorpusError::Config(format!("character {c} listed twice")));
            }
        }
        Ok(Self {
            chars: entries.iter().map(|e| e.0).collect(),
            classes: entries.iter().map(|e| e.1).collect(),
            counts: entries.iter().map(|e| e.2).collect(),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn num_classes(&self) -> usize {
        self.classes.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn index(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn class_of(&self, c: char) -> Option<usize> {
        self.index(c).map(|i| self.classes[i])
    }

    pub fn count(&self, c: char) -> u64 {
        self.index(c).map_or(0, |i| self.counts[i])
    }

    /// Members of pronunciation class `class`, in lexicon order.
    pub fn homophones(&self, class: usize) -> Vec<char> {
        self.chars
            .iter()
            .zip(&self.classes)
            .filter(|&(_, &k)| k == class)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn to_text(&self) -> String {
        (0..self.len())
            .map(|i| {
                format!(
                    "{}\t{}\t{}\n",
                    self.chars[i], self.classes[i], self.counts[i]
                )
            })
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let parse_err = |msg: &str| CorpusError::Parse {
                line: n + 1,
                msg: msg.into(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            let mut cs = f.first().copied().unwrap_or("").chars();
            let (Some(c), None, 3) = (cs.next(), cs.next(), f.len()) else {
                return Err(parse_err("expected char<TAB>class<TAB>count"));
            };
            let class = f[1].parse().map_err(|_| parse_err("bad class"))?;
            let count = f[2].parse().map_err(|_| parse_err("bad count"))?;
            entries.push((c, class, count));
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed for a tuple of integers.
pub(crate) fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ p))
}

/// Successor table of one `(topic, context)`, drawn from its own stream so
/// the grammar does not depend on the order contexts are first visited in.
fn successors(
    seed: u64,
    key: &[usize],
    zipf: &[f64],
    branching: usize,
) -> (Vec<usize>, Vec<f64>) {
    let parts: Vec<u64> = key.iter().map(|&c| c as u64 + 1).collect();
    let mut rng = Rng::seed(mix(seed, &parts));
    let mut weights = vec![1.0; zipf.len()];
    let mut next = Vec::with_capacity(branching);
    let mut probs = Vec::with_capacity(branching);
    for _ in 0..branching.min(zipf.len()) {
        let c = rng.categorical(&weights);
        probs.push(zipf[c]);
        weights[c] = 0.0;
        next.push(c);
    }
    (next, probs)
}

/// Generates a lexicon and a text corpus.
///
/// Characters have Zipf prior weights by index. Classes are dealt over the
/// frequency ranking in a serpentine (0, 1, .., C-1, C-1, .., 0, 0, ..), so
/// every class owns one of the C most frequent characters and the homophone
/// pairs range from lopsided (ranks 0 and 2C-1) to evenly matched (ranks C-1
/// and C). Each sentence draws a topic, then its characters from an
/// order-`k` Markov grammar: every (topic, context) allows a uniformly drawn
/// set of successors weighted by their Zipf prior, except sentence openings,
/// which allow every character.
pub fn synth_language(seed: u64, cfg: &LanguageConfig) -> Result<(Lexicon, Vec<String>)> {
    cfg.validate()?;
    let n = cfg.n_chars;
    let zipf: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((i + 1) as f64).powf(cfg.zipf_exponent))
        .collect();
    let grammar_seed = mix(seed, &[1]);
    let mut rng = Rng::seed(mix(seed, &[2]));
    let mut tables: BTreeMap<Vec<usize>, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let ctx_len = cfg.order - 1;
    let mut counts = vec![0u64; n];
    let mut sentences = Vec::with_capacity(cfg.n_sentences);
    for _ in 0..cfg.n_sentences {
        let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
        let topic = rng.below(cfg.topics);
        // `n` stands for the sentence start in contexts.
        let mut history = vec![n; ctx_len];
        let mut s = String::with_capacity(len * 3);
        for _ in 0..len {
            let mut key = vec![topic];
            key.extend_from_slice(&history[history.len() - ctx_len..]);
            let (next, probs) = tables
                .entry(key)
                .or_insert_with_key(|key| {
                    // Sentence openings draw from the full Zipf prior.
                    let opening = key[1..].iter().all(|&c| c == n);
                    let width = if opening { n } else { cfg.branching };
                    successors(grammar_seed, key, &zipf, width)
                });
            let c = next[rng.categorical(probs)];
            counts[c] += 1;
            s.push(glyph(c));
            history.push(c);
        }
        sentences.push(s);
    }
    let entries = (0..n)
        .map(|i| (glyph(i), serpentine(i, cfg.n_classes), counts[i]))
        .collect();
    Ok((Lexicon::new(entries)?, sentences))
}

fn serpentine(i: usize, classes: usize) -> usize {
    let (row, col) = (i / classes, i % classes);
    if row % 2 == 0 {
        col
    } else {
        classes - 1 - col
    }
}

fn glyph(i: usize) -> char {
    char::from_u32(GLYPH_BASE + i as u32).expect("validated range")
}

/// Acoustic modelling units plus the fold map for everything else.
#[derive(Clone, Debug, PartialEq)]
pub struct CharVocab {
    /// Kept characters, most frequent first.
    units: Vec<char>,
    fold: BTreeMap<char, char>,
    coverage: f64,
    warnings: Vec<String>,
}

impl CharVocab {
    pub fn units(&self) -> &[char] {
        &self.units
    }

    /// Fraction of corpus tokens that are units.
    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    /// Classes without an in-vocabulary member.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn fold_map(&self) -> &BTreeMap<char, char> {
        &self.fold
    }

    /// In-vocabulary target of `c` (unknown characters pass through).
    pub fn fold(&self, c: char) -> char {
        self.fold.get(&c).copied().unwrap_or(c)
    }

    pub fn fold_text(&self, s: &str) -> String {
        s.chars().map(|c| self.fold(c)).collect()
    }

    pub fn ctc_vocab(&self) -> Vocab {
        Vocab::new(self.units.iter().map(|c| c.to_string())).expect("units are distinct")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("coverage\t{}\n", self.coverage);
        for c in &self.units {
            s.push_str(&format!("unit\t{c}\n"));
        }
        for (a, b) in &self.fold {
            s.push_str(&format!("fold\t{a}\t{b}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut v = Self {
            units: Vec::new(),
            fold: BTreeMap::new(),
            coverage: 0.0,
            warnings: Vec::new(),
        };
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let err = || CorpusError::Parse {
                line: n + 1,
                msg: format!("bad vocabulary line {line:?}"),
            };
            let f: Vec<&str> = line.split('\t').collect();
            let one = |s: &str| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(err()),
                }
            };
            match f.as_slice() {
                ["coverage", x] => v.coverage = x.parse().map_err(|_| err())?,
                ["unit", c] => v.units.push(one(c)?),
                ["fold", a, b] => {
                    v.fold.insert(one(a)?, one(b)?);
                }
                _ => return Err(err()),
            }
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Keeps the `k` most frequent characters of `sentences` (ties by lexicon
/// order) and folds every other character onto the most frequent kept
/// member of its pronunciation class, or onto the globally most frequent
/// unit when its class has none (reported in `warnings`).
pub fn build_char_vocab(sentences: &[String], lexicon: &Lexicon, k: usize) -> Result<CharVocab> {
    if k == 0 || k > lexicon.len() {
        return Err(CorpusError::Vocab(format!(
            "K={k} outside 1..={}",
            lexicon.len()
        )));
    }
    let mut counts = vec![0u64; lexicon.len()];
    let mut total = 0u64;
    for s in sentences {
        for c in s.chars() {
            let i = lexicon
                .index(c)
                .ok_or_else(|| CorpusError::Vocab(format!("character {c} not in lexicon")))?;
            counts[i] += 1;
            total += 1;
        }
    }
    let mut ranked: Vec<usize> = (0..lexicon.len()).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let kept = &ranked[..k];
    let units: Vec<char> = kept.iter().map(|&i| lexicon.chars[i]).collect();
    let covered: u64 = kept.iter().map(|&i| counts[i]).sum();
    let coverage = if total == 0 {
        1.0
    } else {
        covered as f64 / total as f64
    };

    let mut fold = BTreeMap::new();
    let mut warnings = Vec::new();
    for &i in &ranked[k..] {
        let class = lexicon.classes[i];
        // `kept` is frequency ordered, so the first hit is the most frequent.
        let target = match kept.iter().find(|&&j| lexicon.classes[j] == class) {
            Some(&j) => lexicon.chars[j],
            None => {
                warnings.push(format!(
                    "class {class} has no unit; {} folds to {}",
                    lexicon.chars[i], units[0]
                ));
                units[0]
            }
        };
        fold.insert(lexicon.chars[i], target);
    }
    Ok(CharVocab {
        units,
        fold,
        coverage,
        warnings,
    })
}
