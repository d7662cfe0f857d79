//! Plain-text and binary artifact formats.

use std::path::Path;

use numerics::{ParamStore, Tensor};

use super::{CorpusError, Result};

/// Reads `id<TAB>text` lines. The text may be empty.
pub fn parse_transcripts(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let (id, t) = line.split_once('\t').ok_or_else(|| CorpusError::Parse {
            line: n + 1,
            msg: "expected id<TAB>text".into(),
        })?;
        if id.is_empty() {
            return Err(CorpusError::Parse {
                line: n + 1,
                msg: "empty id".into(),
            });
        }
        out.push((id.to_string(), t.to_string()));
    }
    Ok(out)
}

pub fn format_transcripts(items: &[(String, String)]) -> String {
    items.iter().map(|(id, t)| format!("{id}\t{t}\n")).collect()
}

pub fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    parse_transcripts(&std::fs::read_to_string(path)?)
}

pub fn write_transcripts(path: &Path, items: &[(String, String)]) -> Result<()> {
    Ok(std::fs::write(path, format_transcripts(items))?)
}

/// A synthetic utterance with its (stacked) feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub reference: String,
    pub features: Tensor,
}

/// Writes `<stem>.txt` transcripts and `<stem>.feats` features.
pub fn save_utterances(dir: &Path, stem: &str, utts: &[Utterance]) -> Result<()> {
    let refs: Vec<(String, String)> = utts
        .iter()
        .map(|u| (u.id.clone(), u.reference.clone()))
        .collect();
    write_transcripts(&dir.join(format!("{stem}.txt")), &refs)?;
    let mut store = ParamStore::new();
    for u in utts {
        store.add(u.id.clone(), u.features.clone());
    }
    store.save(dir.join(format!("{stem}.feats")))?;
    Ok(())
}

pub fn load_utterances(dir: &Path, stem: &str) -> Result<Vec<Utterance>> {
    let refs = read_transcripts(&dir.join(format!("{stem}.txt")))?;
    let store = ParamStore::load(dir.join(format!("{stem}.feats")))?;
    refs.into_iter()
        .map(|(id, reference)| {
            let features = store
                .by_name(&id)
                .ok_or_else(|| CorpusError::MissingArtifact(format!("features for {id}")))?
                .clone();
            Ok(Utterance {
                id,
                reference,
                features,
            })
        })
        .collect()
}

/// One line of a pair file.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pair {
    pub hyp: String,
    pub reference: String,
    pub tag: String,
}

pub fn format_pairs(pairs: &[Pair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.hyp, p.reference, p.tag))
        .collect()
}

/// Reads `hyp<TAB>ref<TAB>tag` lines; references must be nonempty.
pub fn parse_pairs(text: &str) -> Result<Vec<Pair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 || f[1].is_empty() {
            return Err(CorpusError::Parse {
                line: n + 1,
                msg: "expected hyp<TAB>ref<TAB>tag with nonempty ref".into(),
            });
        }
        out.push(Pair {
            hyp: f[0].into(),
            reference: f[1].into(),
            tag: f[2].into(),
        });
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<Pair>> {
    parse_pairs(&std::fs::read_to_string(path)?)
}

pub fn write_pairs(path: &Path, pairs: &[Pair]) -> Result<()> {
    Ok(std::fs::write(path, format_pairs(pairs))?)
}
