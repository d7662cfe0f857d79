use std::collections::{BTreeMap, HashMap, HashSet};

use super::fst::{Arc, Fst, Label, StateId, EPS};
use super::ops::{compose, determinize, minimize, remove_aux_labels};
use super::{Weight, WfstError};

/// First auxiliary (disambiguation) label. `#0`, the backoff symbol, is
/// `AUX_BASE`; homophone markers `#k` are `AUX_BASE + k`.
pub const AUX_BASE: Label = 1 << 24;
pub const BACKOFF_LABEL: Label = AUX_BASE;

/// Sentence-start and sentence-end tokens in n-gram histories.
pub const BOS: u32 = u32::MAX - 1;
pub const EOS: u32 = u32::MAX;

pub fn is_aux(label: Label) -> bool {
    label >= AUX_BASE
}

/// FST label of CTC output index `k` (units first, blank last).
pub fn ctc_label(k: usize) -> Label {
    k as Label + 1
}

/// FST label of word id `w`.
pub fn word_label(w: usize) -> Label {
    w as Label + 1
}

/// Token transducer for `num_units` units plus a blank: accepts
/// `blank* u+ blank*` per unit and emits `u` once. Input labels are
/// [`ctc_label`]s (blank is `ctc_label(num_units)`), outputs are unit labels.
pub fn build_token_fst(num_units: usize) -> Fst {
    let mut t = Fst::new();
    let blank = ctc_label(num_units);
    let s0 = t.add_state();
    t.set_start(s0);
    t.set_final(s0, Weight::one());
    t.add_arc(s0, Arc::new(blank, EPS, Weight::one(), s0));
    let unit_states: Vec<StateId> = (0..num_units).map(|_| t.add_state()).collect();
    for (u, &su) in unit_states.iter().enumerate() {
        let l = ctc_label(u);
        t.set_final(su, Weight::one());
        t.add_arc(s0, Arc::new(l, l, Weight::one(), su));
        t.add_arc(su, Arc::new(l, EPS, Weight::one(), su));
        t.add_arc(su, Arc::new(blank, EPS, Weight::one(), s0));
        for (v, &sv) in unit_states.iter().enumerate() {
            if v != u {
                t.add_arc(su, Arc::new(ctc_label(v), ctc_label(v), Weight::one(), sv));
            }
        }
    }
    t
}

/// Lexicon transducer mapping unit sequences to words; `prons[w]` lists the
/// unit ids of word `w`. With `disambig`, pronunciations shared by several
/// words or that prefix another word's pronunciation end in `#k`, and a
/// `#0:#0` loop lets the grammar's backoff symbol through.
pub fn build_lexicon_fst(prons: &[Vec<usize>], disambig: bool) -> Result<Fst, WfstError> {
    if let Some(w) = prons.iter().position(|p| p.is_empty()) {
        return Err(WfstError::EmptyPronunciation(w));
    }
    let mut marker = vec![0u32; prons.len()];
    if disambig {
        let mut groups: HashMap<&[usize], Vec<usize>> = HashMap::new();
        for (w, p) in prons.iter().enumerate() {
            groups.entry(p.as_slice()).or_default().push(w);
        }
        let prefixes: HashSet<&[usize]> = prons
            .iter()
            .flat_map(|p| (1..p.len()).map(move |k| &p[..k]))
            .collect();
        for (p, words) in &groups {
            if words.len() > 1 || prefixes.contains(p) {
                for (k, &w) in words.iter().enumerate() {
                    marker[w] = k as u32 + 1;
                }
            }
        }
    }
    let mut l = Fst::new();
    let s0 = l.add_state();
    l.set_start(s0);
    l.set_final(s0, Weight::one());
    for (w, p) in prons.iter().enumerate() {
        let mut s = s0;
        for (i, &u) in p.iter().enumerate() {
            let last = i + 1 == p.len();
            let dst = if last && marker[w] == 0 {
                s0
            } else {
                l.add_state()
            };
            let out = if i == 0 { word_label(w) } else { EPS };
            l.add_arc(s, Arc::new(ctc_label(u), out, Weight::one(), dst));
            s = dst;
        }
        if marker[w] > 0 {
            l.add_arc(s, Arc::new(AUX_BASE + marker[w], EPS, Weight::one(), s0));
        }
    }
    if disambig {
        l.add_arc(
            s0,
            Arc::new(BACKOFF_LABEL, BACKOFF_LABEL, Weight::one(), s0),
        );
    }
    Ok(l)
}

/// Raw n-gram counts of every order up to `order`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NgramCounts {
    order: usize,
    counts: BTreeMap<Vec<u32>, u64>,
}

impl NgramCounts {
    pub fn new(order: usize) -> Self {
        Self {
            order,
            counts: BTreeMap::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add(&mut self, ngram: &[u32], count: u64) {
        assert!(
            !ngram.is_empty() && ngram.len() <= self.order,
            "n-gram length out of range"
        );
        *self.counts.entry(ngram.to_vec()).or_default() += count;
    }

    pub fn get(&self, ngram: &[u32]) -> u64 {
        self.counts.get(ngram).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Counts every n-gram ending at a real token or [`EOS`] of each
    /// sentence padded with one [`BOS`].
    pub fn from_sentences<S: AsRef<[u32]>>(sentences: &[S], order: usize) -> Self {
        let mut c = Self::new(order);
        for s in sentences {
            let seq: Vec<u32> = std::iter::once(BOS)
                .chain(s.as_ref().iter().copied())
                .chain(std::iter::once(EOS))
                .collect();
            for i in 1..seq.len() {
                for k in 1..=order.min(i + 1) {
                    c.add(&seq[i + 1 - k..=i], 1);
                }
            }
        }
        c
    }
}

#[derive(Clone, Debug)]
struct History {
    total: u64,
    conts: BTreeMap<u32, u64>,
    discount: f64,
    alpha: f64,
}

/// Backoff n-gram model with absolute discounting. The unigram level is the
/// undiscounted relative frequency.
#[derive(Clone, Debug)]
pub struct NgramModel {
    order: usize,
    hists: BTreeMap<Vec<u32>, History>,
    has_eos: bool,
}

impl NgramModel {
    pub fn new(counts: &NgramCounts, discount: f64) -> Result<Self, WfstError> {
        if !(1..=3).contains(&counts.order) {
            return Err(WfstError::Grammar(format!(
                "order {} not in 1..=3",
                counts.order
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(WfstError::Grammar(format!(
                "discount {discount} not in [0, 1)"
            )));
        }
        let mut hists: BTreeMap<Vec<u32>, History> = BTreeMap::new();
        for (ng, &c) in &counts.counts {
            if c == 0 || ng.last() == Some(&BOS) {
                continue;
            }
            let (h, w) = ng.split_at(ng.len() - 1);
            let e = hists.entry(h.to_vec()).or_insert(History {
                total: 0,
                conts: BTreeMap::new(),
                discount: 0.0,
                alpha: 0.0,
            });
            e.total += c;
            *e.conts.entry(w[0]).or_default() += c;
        }
        if !hists.contains_key(&Vec::new()) {
            return Err(WfstError::Grammar("no unigram counts".into()));
        }
        let has_eos = hists[&Vec::new()].conts.contains_key(&EOS);
        let mut model = Self {
            order: counts.order,
            hists,
            has_eos,
        };
        // Shorter histories first so backoff probabilities are final.
        let mut keys: Vec<Vec<u32>> = model
            .hists
            .keys()
            .filter(|h| !h.is_empty())
            .cloned()
            .collect();
        keys.sort_by_key(|h| h.len());
        for h in keys {
            let info = &model.hists[&h];
            let lower: f64 = info.conts.keys().map(|&w| model.prob(&h[1..], w)).sum();
            let free = 1.0 - lower;
            let (d, alpha) = if discount > 0.0 && free > 1e-12 {
                let mass = discount * info.conts.len() as f64 / info.total as f64;
                (discount, mass / free)
            } else {
                (0.0, 0.0)
            };
            let e = model.hists.get_mut(&h).expect("key exists");
            e.discount = d;
            e.alpha = alpha;
        }
        Ok(model)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// P(w | history), backing off through shorter histories. Only the last
    /// `order − 1` history tokens matter.
    pub fn prob(&self, history: &[u32], w: u32) -> f64 {
        let keep = self.order - 1;
        let h = &history[history.len().saturating_sub(keep)..];
        self.prob_inner(h, w)
    }

    fn prob_inner(&self, h: &[u32], w: u32) -> f64 {
        match self.hists.get(h) {
            None => self.prob_inner(&h[1..], w),
            Some(info) => match info.conts.get(&w) {
                Some(&c) => (c as f64 - info.discount) / info.total as f64,
                None if h.is_empty() => 0.0,
                None => info.alpha * self.prob_inner(&h[1..], w),
            },
        }
    }

    /// −ln P of a sentence (with its end token when the counts carry one).
    pub fn sentence_weight(&self, words: &[u32]) -> f64 {
        let mut hist: Vec<u32> = if self.order > 1 {
            vec![BOS]
        } else {
            Vec::new()
        };
        let mut total = 0.0;
        let ends = if self.has_eos { Some(EOS) } else { None };
        for w in words.iter().copied().chain(ends) {
            total -= self.prob(&hist, w).ln();
            hist.push(w);
        }
        total
    }

    fn state_of(&self, ids: &HashMap<&[u32], StateId>, h: &[u32]) -> StateId {
        let keep = self.order - 1;
        let mut h = &h[h.len().saturating_sub(keep)..];
        loop {
            if let Some(&s) = ids.get(h) {
                return s;
            }
            h = &h[1..];
        }
    }

    /// Acceptor over [`word_label`]s. Backoff arcs carry `backoff_label` on
    /// the input side and ε on the output side.
    pub fn to_fst(&self, backoff_label: Label) -> Fst {
        let mut g = Fst::new();
        let ids: HashMap<&[u32], StateId> = self
            .hists
            .keys()
            .map(|h| (h.as_slice(), g.add_state()))
            .collect();
        let start: &[u32] = if self.order > 1 && ids.contains_key(&[BOS][..]) {
            &[BOS]
        } else {
            &[]
        };
        g.set_start(ids[start]);
        for (h, info) in &self.hists {
            let s = ids[h.as_slice()];
            for &w in info.conts.keys() {
                let p = self.prob_inner(h, w);
                if w == EOS {
                    g.set_final(s, Weight::from_prob(p));
                    continue;
                }
                let mut next = h.clone();
                next.push(w);
                let dst = self.state_of(&ids, &next);
                let l = word_label(w as usize);
                g.add_arc(s, Arc::new(l, l, Weight::from_prob(p), dst));
            }
            if !self.has_eos {
                g.set_final(s, Weight::one());
            }
            if !h.is_empty() && info.alpha > 0.0 {
                let dst = self.state_of(&ids, &h[1..]);
                g.add_arc(
                    s,
                    Arc::new(backoff_label, EPS, Weight::from_prob(info.alpha), dst),
                );
            }
        }
        g
    }
}

/// Backoff acceptor with ε backoff arcs.
pub fn build_grammar_fst(counts: &NgramCounts, discount: f64) -> Result<Fst, WfstError> {
    if counts.is_empty() {
        return Err(WfstError::Grammar("empty counts".into()));
    }
    Ok(NgramModel::new(counts, discount)?.to_fst(EPS))
}

/// `S = T ∘ min(det(L ∘ G))`, with auxiliary symbols erased after the
/// minimization. `l` must carry disambiguation symbols and `g` must use
/// [`BACKOFF_LABEL`] on its backoff arcs.
pub fn build_decoding_graph(t: &Fst, l: &Fst, g: &Fst) -> Result<Fst, WfstError> {
    let lg = compose(l, g);
    let mut lg = minimize(&determinize(&lg)?);
    remove_aux_labels(&mut lg, is_aux);
    Ok(compose(t, &lg))
}

/// Builds all three components from pronunciations and counts, then
/// assembles the decoding graph.
pub fn decoding_graph_from_parts(
    num_units: usize,
    prons: &[Vec<usize>],
    counts: &NgramCounts,
    discount: f64,
) -> Result<Fst, WfstError> {
    if counts.is_empty() {
        return Err(WfstError::Grammar("empty counts".into()));
    }
    let t = build_token_fst(num_units);
    let l = build_lexicon_fst(prons, true)?;
    let g = NgramModel::new(counts, discount)?.to_fst(BACKOFF_LABEL);
    build_decoding_graph(&t, &l, &g)
}
