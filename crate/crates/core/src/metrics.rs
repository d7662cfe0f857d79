//! Levenshtein alignment and character error rate.

use std::ops::AddAssign;

/// One alignment column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edit {
    Match,
    Sub,
    /// Hypothesis token with no reference counterpart.
    Ins,
    /// Reference token missing from the hypothesis.
    Del,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.ins + self.del
    }

    /// Errors over reference length; 0 for an empty reference and hypothesis,
    /// the raw error count when only the reference is empty.
    pub fn cer(&self) -> f64 {
        if self.ref_len == 0 {
            self.errors() as f64
        } else {
            self.errors() as f64 / self.ref_len as f64
        }
    }
}

impl AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.sub += o.sub;
        self.ins += o.ins;
        self.del += o.del;
        self.ref_len += o.ref_len;
    }
}

impl std::iter::Sum for ErrorCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut t = Self::default();
        for x in iter {
            t += x;
        }
        t
    }
}

/// Minimum-edit alignment of `hyp` against `reference`. Among equal-cost
/// alignments the backtrace prefers match/substitution, then deletion, then
/// insertion, so error-type counts are deterministic.
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> Vec<Edit> {
    let (n, m) = (hyp.len(), reference.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            let ins = d[(i - 1) * w + j] + 1;
            let del = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut edits = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = hyp[i - 1] == reference[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                edits.push(if same { Edit::Match } else { Edit::Sub });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            edits.push(Edit::Del);
            j -= 1;
        } else {
            edits.push(Edit::Ins);
            i -= 1;
        }
    }
    edits.reverse();
    edits
}

pub fn error_counts<T: PartialEq>(hyp: &[T], reference: &[T]) -> ErrorCounts {
    let mut c = ErrorCounts {
        ref_len: reference.len(),
        ..Default::default()
    };
    for e in align(hyp, reference) {
        match e {
            Edit::Match => {}
            Edit::Sub => c.sub += 1,
            Edit::Ins => c.ins += 1,
            Edit::Del => c.del += 1,
        }
    }
    c
}

/// Corpus-level CER: total errors over total reference length.
pub fn corpus_cer<T: PartialEq, H: AsRef<[T]>, R: AsRef<[T]>>(
    pairs: impl IntoIterator<Item = (H, R)>,
) -> ErrorCounts {
    pairs
        .into_iter()
        .map(|(h, r)| error_counts(h.as_ref(), r.as_ref()))
        .sum()
}
