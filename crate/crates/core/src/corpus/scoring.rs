//! CER scoring with error-type totals and multi-system comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{CorpusError, Result};
use crate::metrics::{align, Edit, ErrorCounts};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UttAlignment {
    pub id: String,
    pub edits: Vec<Edit>,
    pub counts: ErrorCounts,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentReport {
    /// Sorted by id.
    pub utterances: Vec<UttAlignment>,
    pub totals: ErrorCounts,
}

impl AlignmentReport {
    pub fn cer(&self) -> f64 {
        self.totals.cer()
    }
}

/// Character-level alignment of hypotheses against references, matched by id.
pub fn score(
    references: &[(String, String)],
    hypotheses: &[(String, String)],
) -> Result<AlignmentReport> {
    let refs = by_id(references, "reference")?;
    let hyps = by_id(hypotheses, "hypothesis")?;
    if let Some(id) = refs.keys().find(|id| !hyps.contains_key(*id)) {
        return Err(CorpusError::IdMismatch(format!("no hypothesis for {id}")));
    }
    if let Some(id) = hyps.keys().find(|id| !refs.contains_key(*id)) {
        return Err(CorpusError::IdMismatch(format!("no reference for {id}")));
    }
    let mut utterances = Vec::with_capacity(refs.len());
    let mut totals = ErrorCounts::default();
    for (id, r) in refs {
        let h: Vec<char> = hyps[id].chars().collect();
        let r: Vec<char> = r.chars().collect();
        let edits = align(&h, &r);
        let mut counts = ErrorCounts {
            ref_len: r.len(),
            ..Default::default()
        };
        for e in &edits {
            match e {
                Edit::Match => {}
                Edit::Sub => counts.sub += 1,
                Edit::Ins => counts.ins += 1,
                Edit::Del => counts.del += 1,
            }
        }
        totals += counts;
        utterances.push(UttAlignment {
            id: id.to_string(),
            edits,
            counts,
        });
    }
    Ok(AlignmentReport { utterances, totals })
}

fn by_id<'a>(items: &'a [(String, String)], what: &str) -> Result<BTreeMap<&'a str, &'a str>> {
    let mut m = BTreeMap::new();
    for (id, text) in items {
        if m.insert(id.as_str(), text.as_str()).is_some() {
            return Err(CorpusError::IdMismatch(format!("duplicate {what} id {id}")));
        }
    }
    Ok(m)
}

/// Totals of one system on one test set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoredRun {
    pub system: String,
    pub testset: String,
    pub counts: ErrorCounts,
}

impl ScoredRun {
    pub fn to_line(&self) -> String {
        let c = &self.counts;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            self.system, self.testset, c.sub, c.ins, c.del, c.ref_len
        )
    }

    /// Parses lines written by [`to_line`](Self::to_line).
    pub fn parse_lines(text: &str) -> Result<Vec<Self>> {
        let mut runs = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let err = || CorpusError::Parse {
                line: n + 1,
                msg: "expected system, testset, S, I, D, N".into(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(err());
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| err());
            runs.push(Self {
                system: f[0].to_string(),
                testset: f[1].to_string(),
                counts: ErrorCounts {
                    sub: num(f[2])?,
                    ins: num(f[3])?,
                    del: num(f[4])?,
                    ref_len: num(f[5])?,
                },
            });
        }
        Ok(runs)
    }
}

/// `(baseline - system) / baseline` in percent.
pub fn relative_improvement(baseline_cer: f64, system_cer: f64) -> f64 {
    100.0 * (baseline_cer - system_cer) / baseline_cer
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub testset: String,
    pub system: String,
    pub counts: ErrorCounts,
    /// Percent relative CER reduction against the baseline on the same set.
    pub relative: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub baseline: Option<String>,
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    fn has_relative(&self) -> bool {
        self.baseline.is_some()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{:<12} {:<20} {:>8} {:>7} {:>7} {:>7} {:>8}",
            "testset", "system", "CER%", "S", "I", "D", "N"
        );
        if self.has_relative() {
            let _ = write!(s, " {:>9}", "rel%");
        }
        s.push('\n');
        for r in &self.rows {
            let c = &r.counts;
            let _ = write!(
                s,
                "{:<12} {:<20} {:>8.2} {:>7} {:>7} {:>7} {:>8}",
                r.testset,
                r.system,
                100.0 * c.cer(),
                c.sub,
                c.ins,
                c.del,
                c.ref_len
            );
            if self.has_relative() {
                match r.relative {
                    Some(x) => {
                        let _ = write!(s, " {x:>9.2}");
                    }
                    None => {
                        let _ = write!(s, " {:>9}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("testset,system,cer,sub,ins,del,ref_len");
        if self.has_relative() {
            s.push_str(",relative_improvement");
        }
        s.push('\n');
        for r in &self.rows {
            let c = &r.counts;
            let _ = write!(
                s,
                "{},{},{:.6},{},{},{},{}",
                r.testset,
                r.system,
                c.cer(),
                c.sub,
                c.ins,
                c.del,
                c.ref_len
            );
            if self.has_relative() {
                s.push(',');
                if let Some(x) = r.relative {
                    let _ = write!(s, "{x:.4}");
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Groups runs by test set (ordered by the baseline's CER on each set, high
/// to low, falling back to the first listed system) and adds relative improvements
/// against `baseline`. A single run never gets a relative column.
pub fn report(runs: &[ScoredRun], baseline: Option<&str>) -> Result<ComparisonTable> {
    if runs.is_empty() {
        return Err(CorpusError::Config("nothing to report".into()));
    }
    if let Some(b) = baseline {
        if !runs.iter().any(|r| r.system == b) {
            return Err(CorpusError::UnknownBaseline(b.to_string()));
        }
    }
    let baseline = baseline.filter(|_| runs.len() > 1);
    let mut sets: Vec<&str> = Vec::new();
    for r in runs {
        if !sets.contains(&r.testset.as_str()) {
            sets.push(&r.testset);
        }
    }
    let anchor = |set: &str| -> Option<f64> {
        let in_set = || runs.iter().filter(move |r| r.testset == set);
        baseline
            .and_then(|b| in_set().find(|r| r.system == b))
            .or_else(|| in_set().next())
            .map(|r| r.counts.cer())
    };
    // Stable sort keeps first-seen order among equal CERs.
    sets.sort_by(|a, b| {
        anchor(b)
            .unwrap_or(0.0)
            .total_cmp(&anchor(a).unwrap_or(0.0))
    });
    let mut rows = Vec::with_capacity(runs.len());
    for set in sets {
        let base = baseline.and_then(|b| runs.iter().find(|r| r.testset == set && r.system == b));
        for r in runs.iter().filter(|r| r.testset == set) {
            let relative = base
                .filter(|b| b.counts.cer() > 0.0)
                .map(|b| relative_improvement(b.counts.cer(), r.counts.cer()));
            rows.push(TableRow {
                testset: set.to_string(),
                system: r.system.clone(),
                counts: r.counts,
                relative,
            });
        }
    }
    Ok(ComparisonTable {
        baseline: baseline.map(str::to_string),
        rows,
    })
}
