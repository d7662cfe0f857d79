//! Training-pair expansion from decoder outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::io::{read_transcripts, write_transcripts, Pair};
use super::{CorpusError, Result};
use crate::ctc::{greedy_search, threshold_expand, PosteriorMatrix, ThresholdConfig, Vocab};
use crate::wfst::{word_label, Label, Lattice};

/// Where a hypothesis came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Source {
    Greedy,
    Threshold(ThresholdConfig),
    Nbest(usize),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Greedy => write!(f, "greedy"),
            Source::Threshold(c) => write!(f, "threshold({},{})", c.upper(), c.lower()),
            Source::Nbest(k) => write!(f, "nbest({k})"),
        }
    }
}

impl FromStr for Source {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CorpusError::Config(format!("unknown source {s:?}"));
        let s = s.trim();
        if s == "greedy" {
            return Ok(Source::Greedy);
        }
        let args = |name: &str| {
            s.strip_prefix(name)
                .and_then(|r| r.strip_prefix('('))
                .and_then(|r| r.strip_suffix(')'))
        };
        if let Some(a) = args("threshold") {
            let (u, l) = a.split_once(',').ok_or_else(bad)?;
            let u = u.trim().parse().map_err(|_| bad())?;
            let l = l.trim().parse().map_err(|_| bad())?;
            let cfg = ThresholdConfig::new(u, l).map_err(|e| CorpusError::Config(e.to_string()))?;
            return Ok(Source::Threshold(cfg));
        }
        if let Some(a) = args("nbest") {
            let k: usize = a.trim().parse().map_err(|_| bad())?;
            if k == 0 {
                return Err(CorpusError::Config("nbest(k) needs k >= 1".into()));
            }
            return Ok(Source::Nbest(k));
        }
        Err(bad())
    }
}

/// Splits a comma separated source list, ignoring commas inside parentheses.
pub fn parse_sources(list: &str) -> Result<Vec<Source>> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, ch) in list.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(list[start..i].parse()?);
                start = i + 1;
            }
            _ => {}
        }
    }
    if !list[start..].trim().is_empty() {
        out.push(list[start..].parse()?);
    }
    if out.is_empty() {
        return Err(CorpusError::Config("empty source list".into()));
    }
    Ok(out)
}

/// Decoder artifacts of one utterance.
#[derive(Clone, Debug)]
pub struct DecodedUtterance {
    pub id: String,
    pub reference: String,
    pub posterior: Option<PosteriorMatrix>,
    pub lattice: Option<Lattice>,
}

/// Writes `ref.txt`, `posteriors/<id>.pstm` and `lattices/<id>.lat`.
pub fn save_decoded(dir: &Path, decoded: &[DecodedUtterance]) -> Result<()> {
    std::fs::create_dir_all(dir.join("posteriors"))?;
    std::fs::create_dir_all(dir.join("lattices"))?;
    let refs: Vec<(String, String)> = decoded
        .iter()
        .map(|d| (d.id.clone(), d.reference.clone()))
        .collect();
    write_transcripts(&dir.join("ref.txt"), &refs)?;
    for d in decoded {
        if let Some(p) = &d.posterior {
            p.save(dir.join("posteriors").join(format!("{}.pstm", d.id)))?;
        }
        if let Some(l) = &d.lattice {
            l.save(&dir.join("lattices").join(format!("{}.lat", d.id)))?;
        }
    }
    Ok(())
}

/// Reads what [`save_decoded`] wrote; absent files become `None`.
pub fn load_decoded(dir: &Path) -> Result<Vec<DecodedUtterance>> {
    let refs = read_transcripts(&dir.join("ref.txt"))?;
    refs.into_iter()
        .map(|(id, reference)| {
            let pp = dir.join("posteriors").join(format!("{id}.pstm"));
            let lp = dir.join("lattices").join(format!("{id}.lat"));
            let posterior = if pp.exists() {
                Some(PosteriorMatrix::load(&pp)?)
            } else {
                None
            };
            let lattice = if lp.exists() {
                Some(Lattice::load(&lp)?)
            } else {
                None
            };
            Ok(DecodedUtterance {
                id,
                reference,
                posterior,
                lattice,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedCorpus {
    pub pairs: Vec<Pair>,
    /// Pairs contributed by each tag after deduplication.
    pub tag_counts: BTreeMap<String, usize>,
}

fn spell(units: &Vocab, ids: &[usize]) -> Result<String> {
    Ok(units
        .decode(ids)
        .map_err(|e| CorpusError::Vocab(e.to_string()))?
        .concat())
}

/// Output labels of a lattice path as unit ids (the lexicon maps each unit
/// to the word with the same index).
pub fn words_to_units(olabels: &[Label]) -> Vec<usize> {
    olabels
        .iter()
        .map(|&l| (l - word_label(0)) as usize)
        .collect()
}

/// Union of the hypotheses each recipe entry produces, paired with the
/// reference. Duplicate `(hyp, ref)` pairs keep the tag of the first entry
/// that produced them.
pub fn expand_dataset(
    decoded: &[DecodedUtterance],
    units: &Vocab,
    recipe: &[Source],
    max_paths: usize,
) -> Result<PairedCorpus> {
    let mut seen = BTreeSet::new();
    let mut out = PairedCorpus::default();
    for source in recipe {
        let tag = source.to_string();
        out.tag_counts.entry(tag.clone()).or_insert(0);
        for d in decoded {
            if d.reference.is_empty() {
                return Err(CorpusError::Config(format!("empty reference for {}", d.id)));
            }
            let missing =
                |what: &str| CorpusError::MissingArtifact(format!("{what} for {} ({tag})", d.id));
            let hyps: Vec<String> = match source {
                Source::Greedy => {
                    let post = d.posterior.as_ref().ok_or_else(|| missing("posteriors"))?;
                    vec![spell(units, &greedy_search(post).1)?]
                }
                Source::Threshold(cfg) => {
                    let post = d.posterior.as_ref().ok_or_else(|| missing("posteriors"))?;
                    threshold_expand(post, cfg, max_paths)
                        .iter()
                        .map(|h| spell(units, &h.tokens))
                        .collect::<Result<_>>()?
                }
                Source::Nbest(k) => {
                    let lat = d.lattice.as_ref().ok_or_else(|| missing("lattice"))?;
                    lat.nbest(*k)
                        .iter()
                        .map(|(o, _)| spell(units, &words_to_units(o)))
                        .collect::<Result<_>>()?
                }
            };
            for hyp in hyps {
                if seen.insert((hyp.clone(), d.reference.clone())) {
                    out.pairs.push(Pair {
                        hyp,
                        reference: d.reference.clone(),
                        tag: tag.clone(),
                    });
                    *out.tag_counts.get_mut(&tag).expect("inserted above") += 1;
                }
            }
        }
    }
    Ok(out)
}
