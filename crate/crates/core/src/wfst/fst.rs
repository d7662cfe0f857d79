use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use super::{Weight, WfstError};

pub type Label = u32;
pub type StateId = usize;

/// Label reserved for ε on either tape.
pub const EPS: Label = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arc {
    pub ilabel: Label,
    pub olabel: Label,
    pub weight: Weight,
    pub nextstate: StateId,
}

impl Arc {
    pub fn new(ilabel: Label, olabel: Label, weight: Weight, nextstate: StateId) -> Self {
        Self {
            ilabel,
            olabel,
            weight,
            nextstate,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct State {
    arcs: Vec<Arc>,
    final_weight: Weight,
}

/// Mutable weighted transducer over the tropical semiring.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Fst {
    states: Vec<State>,
    start: Option<StateId>,
}

impl Fst {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_state(&mut self) -> StateId {
        self.states.push(State {
            arcs: Vec::new(),
            final_weight: Weight::zero(),
        });
        self.states.len() - 1
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.states.iter().map(|s| s.arcs.len()).sum()
    }

    pub fn start(&self) -> Option<StateId> {
        self.start
    }

    pub fn set_start(&mut self, s: StateId) {
        assert!(s < self.states.len(), "start state {s} does not exist");
        self.start = Some(s);
    }

    pub fn final_weight(&self, s: StateId) -> Weight {
        self.states[s].final_weight
    }

    pub fn is_final(&self, s: StateId) -> bool {
        !self.states[s].final_weight.is_zero()
    }

    pub fn set_final(&mut self, s: StateId, w: Weight) {
        self.states[s].final_weight = w;
    }

    pub fn add_arc(&mut self, s: StateId, arc: Arc) {
        assert!(
            s < self.states.len() && arc.nextstate < self.states.len(),
            "arc {s} -> {} references a missing state",
            arc.nextstate
        );
        self.states[s].arcs.push(arc);
    }

    pub fn arcs(&self, s: StateId) -> &[Arc] {
        &self.states[s].arcs
    }

    pub fn states(&self) -> std::ops::Range<StateId> {
        0..self.states.len()
    }

    /// True when no state has an input-ε arc or two arcs sharing an input label.
    pub fn is_input_deterministic(&self) -> bool {
        self.states.iter().all(|st| {
            let mut labels: Vec<Label> = st.arcs.iter().map(|a| a.ilabel).collect();
            labels.sort_unstable();
            labels.iter().all(|&l| l != EPS) && labels.windows(2).all(|w| w[0] != w[1])
        })
    }

    /// Linear acceptor (or transducer when `olabels` is given) for a label string.
    pub fn linear(ilabels: &[Label], olabels: Option<&[Label]>) -> Self {
        let mut f = Self::new();
        let mut s = f.add_state();
        f.set_start(s);
        for (i, &l) in ilabels.iter().enumerate() {
            let n = f.add_state();
            let o = olabels.map_or(l, |o| o[i]);
            f.add_arc(s, Arc::new(l, o, Weight::one(), n));
            s = n;
        }
        f.set_final(s, Weight::one());
        f
    }

    /// Relabels both tapes through `map`.
    pub fn relabel(
        &mut self,
        mut imap: impl FnMut(Label) -> Label,
        mut omap: impl FnMut(Label) -> Label,
    ) {
        for st in &mut self.states {
            for a in &mut st.arcs {
                a.ilabel = imap(a.ilabel);
                a.olabel = omap(a.olabel);
            }
        }
    }

    /// Swaps input and output labels.
    pub fn invert(&mut self) {
        for st in &mut self.states {
            for a in &mut st.arcs {
                std::mem::swap(&mut a.ilabel, &mut a.olabel);
            }
        }
    }

    pub fn sort_arcs_by_ilabel(&mut self) {
        for st in &mut self.states {
            st.arcs
                .sort_by(|a, b| a.ilabel.cmp(&b.ilabel).then(a.olabel.cmp(&b.olabel)));
        }
    }

    fn accessible(&self) -> Vec<bool> {
        let mut seen = vec![false; self.states.len()];
        let Some(s0) = self.start else { return seen };
        let mut queue = VecDeque::from([s0]);
        seen[s0] = true;
        while let Some(s) = queue.pop_front() {
            for a in &self.states[s].arcs {
                if !a.weight.is_zero() && !seen[a.nextstate] {
                    seen[a.nextstate] = true;
                    queue.push_back(a.nextstate);
                }
            }
        }
        seen
    }

    fn coaccessible(&self) -> Vec<bool> {
        let n = self.states.len();
        let mut rev: Vec<Vec<StateId>> = vec![Vec::new(); n];
        for (s, st) in self.states.iter().enumerate() {
            for a in &st.arcs {
                if !a.weight.is_zero() {
                    rev[a.nextstate].push(s);
                }
            }
        }
        let mut seen = vec![false; n];
        let mut queue: VecDeque<StateId> = VecDeque::new();
        for s in 0..n {
            if self.is_final(s) {
                seen[s] = true;
                queue.push_back(s);
            }
        }
        while let Some(s) = queue.pop_front() {
            for &p in &rev[s] {
                if !seen[p] {
                    seen[p] = true;
                    queue.push_back(p);
                }
            }
        }
        seen
    }

    /// Removes states that are not on some start-to-final path, renumbering
    /// survivors in their original order. Returns the old → new state map.
    pub fn connect(&mut self) -> Vec<Option<StateId>> {
        let acc = self.accessible();
        let coacc = self.coaccessible();
        let keep: Vec<bool> = acc.iter().zip(&coacc).map(|(a, c)| *a && *c).collect();
        let mut map = vec![None; self.states.len()];
        let mut next = 0;
        for (s, &k) in keep.iter().enumerate() {
            if k {
                map[s] = Some(next);
                next += 1;
            }
        }
        let old = std::mem::take(&mut self.states);
        for (s, st) in old.into_iter().enumerate() {
            if !keep[s] {
                continue;
            }
            let arcs = st
                .arcs
                .into_iter()
                .filter(|a| !a.weight.is_zero())
                .filter_map(|a| map[a.nextstate].map(|n| Arc { nextstate: n, ..a }))
                .collect();
            self.states.push(State {
                arcs,
                final_weight: st.final_weight,
            });
        }
        self.start = self.start.and_then(|s| map[s]);
        if self.start.is_none() {
            self.states.clear();
            return vec![None; map.len()];
        }
        map
    }

    /// Kahn topological order, or `None` if the machine has a cycle.
    pub fn topological_order(&self) -> Option<Vec<StateId>> {
        let n = self.states.len();
        let mut indeg = vec![0usize; n];
        for st in &self.states {
            for a in &st.arcs {
                indeg[a.nextstate] += 1;
            }
        }
        let mut queue: VecDeque<StateId> = (0..n).filter(|&s| indeg[s] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(s) = queue.pop_front() {
            order.push(s);
            for a in &self.states[s].arcs {
                indeg[a.nextstate] -= 1;
                if indeg[a.nextstate] == 0 {
                    queue.push_back(a.nextstate);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Shortest distance from every state to a final state (final weight
    /// included), by Bellman-Ford style relaxation. Handles cycles with
    /// non-negative total weight.
    pub fn distance_to_final(&self) -> Vec<Weight> {
        let n = self.states.len();
        let mut d: Vec<Weight> = (0..n).map(|s| self.final_weight(s)).collect();
        if let Some(order) = self.topological_order() {
            for &s in order.iter().rev() {
                let mut best = d[s];
                for a in &self.states[s].arcs {
                    best = best.plus(a.weight.times(d[a.nextstate]));
                }
                d[s] = best;
            }
            return d;
        }
        let mut rev: Vec<Vec<(StateId, Weight)>> = vec![Vec::new(); n];
        for (s, st) in self.states.iter().enumerate() {
            for a in &st.arcs {
                rev[a.nextstate].push((s, a.weight));
            }
        }
        let mut queue: VecDeque<StateId> = (0..n).filter(|&s| !d[s].is_zero()).collect();
        let mut queued = vec![false; n];
        for &s in &queue {
            queued[s] = true;
        }
        while let Some(s) = queue.pop_front() {
            queued[s] = false;
            for &(p, w) in &rev[s] {
                let cand = w.times(d[s]);
                if cand.value() < d[p].value() - 1e-12 {
                    d[p] = cand;
                    if !queued[p] {
                        queued[p] = true;
                        queue.push_back(p);
                    }
                }
            }
        }
        d
    }

    /// Lowest-weight accepting path as (input labels, output labels, weight),
    /// ε removed from both tapes. `None` if nothing is accepted.
    pub fn shortest_path(&self) -> Option<(Vec<Label>, Vec<Label>, Weight)> {
        let s0 = self.start?;
        let d = self.distance_to_final();
        if d[s0].is_zero() {
            return None;
        }
        let (mut ins, mut outs) = (Vec::new(), Vec::new());
        let mut s = s0;
        let mut steps = 0;
        loop {
            let target = d[s];
            if self.final_weight(s).approx_eq(target, 1e-9) {
                break;
            }
            let arc = self.states[s]
                .arcs
                .iter()
                .find(|a| a.weight.times(d[a.nextstate]).approx_eq(target, 1e-9))?;
            if arc.ilabel != EPS {
                ins.push(arc.ilabel);
            }
            if arc.olabel != EPS {
                outs.push(arc.olabel);
            }
            s = arc.nextstate;
            steps += 1;
            if steps > self.states.len() * 4 + 16 {
                return None;
            }
        }
        Some((ins, outs, d[s0]))
    }

    /// Serializes to the arc-per-line text format. The start state's lines
    /// come first so a reader can recover it.
    pub fn to_text(&self) -> String {
        self.to_text_with(|_, _| None)
    }

    pub(crate) fn to_text_with(&self, extra: impl Fn(StateId, usize) -> Option<String>) -> String {
        let mut out = String::new();
        let Some(s0) = self.start else { return out };
        let order = std::iter::once(s0).chain(self.states().filter(|&s| s != s0));
        for s in order {
            for (i, a) in self.states[s].arcs.iter().enumerate() {
                let _ = write!(
                    out,
                    "{s}\t{}\t{}\t{}\t{}",
                    a.nextstate, a.ilabel, a.olabel, a.weight
                );
                if let Some(x) = extra(s, i) {
                    let _ = write!(out, "\t{x}");
                }
                out.push('\n');
            }
            if self.is_final(s) {
                let _ = writeln!(out, "{s}\t{}", self.final_weight(s));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, WfstError> {
        Ok(Self::from_text_with(text, 5)?.0)
    }

    /// Parses lines of `arc_cols` (arcs) or 2 (finals) fields; trailing
    /// fields of arc lines beyond the fifth are returned per arc, with the
    /// arc's source state, in file order.
    pub(crate) fn from_text_with(
        text: &str,
        arc_cols: usize,
    ) -> Result<(Self, Vec<(StateId, Vec<String>)>), WfstError> {
        let mut f = Self::new();
        let mut extras: Vec<(StateId, Vec<String>)> = Vec::new();
        let bad = |line: usize, msg: &str| WfstError::Parse {
            line: line + 1,
            msg: msg.to_string(),
        };
        let ensure = |f: &mut Self, s: StateId| {
            while f.states.len() <= s {
                f.add_state();
            }
        };
        for (ln, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.is_empty() {
                continue;
            }
            let state = |i: usize| -> Result<StateId, WfstError> {
                cols[i].parse().map_err(|_| bad(ln, "bad state id"))
            };
            let weight = |i: usize| -> Result<Weight, WfstError> {
                let v: f64 = cols[i].parse().map_err(|_| bad(ln, "bad weight"))?;
                if v.is_nan() || v == f64::NEG_INFINITY {
                    return Err(bad(ln, "bad weight"));
                }
                Ok(Weight::new(v))
            };
            match cols.len() {
                1 | 2 => {
                    let s = state(0)?;
                    let w = if cols.len() == 2 {
                        weight(1)?
                    } else {
                        Weight::one()
                    };
                    ensure(&mut f, s);
                    if f.start.is_none() {
                        f.start = Some(s);
                    }
                    f.set_final(s, w);
                }
                n if n == arc_cols || (arc_cols == 5 && n == 4) => {
                    let (s, d) = (state(0)?, state(1)?);
                    let il: Label = cols[2].parse().map_err(|_| bad(ln, "bad input label"))?;
                    let ol: Label = cols[3].parse().map_err(|_| bad(ln, "bad output label"))?;
                    let w = if n >= 5 { weight(4)? } else { Weight::one() };
                    ensure(&mut f, s.max(d));
                    if f.start.is_none() {
                        f.start = Some(s);
                    }
                    f.add_arc(s, Arc::new(il, ol, w, d));
                    extras.push((s, cols[5.min(n)..].iter().map(|c| c.to_string()).collect()));
                }
                _ => return Err(bad(ln, "unexpected column count")),
            }
        }
        Ok((f, extras))
    }

    pub fn save(&self, path: &Path) -> Result<(), WfstError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WfstError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Bidirectional symbol ↔ label map, serialized as "symbol id" lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SymbolTable {
    symbols: Vec<(String, Label)>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, symbol: impl Into<String>, label: Label) {
        self.symbols.push((symbol.into(), label));
    }

    pub fn label(&self, symbol: &str) -> Option<Label> {
        self.symbols
            .iter()
            .find(|(s, _)| s == symbol)
            .map(|(_, l)| *l)
    }

    pub fn symbol(&self, label: Label) -> Option<&str> {
        self.symbols
            .iter()
            .find(|(_, l)| *l == label)
            .map(|(s, _)| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.symbols
            .iter()
            .map(|(s, l)| format!("{s} {l}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self, WfstError> {
        let mut t = Self::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (sym, id) =
                line.rsplit_once(char::is_whitespace)
                    .ok_or_else(|| WfstError::Parse {
                        line: ln + 1,
                        msg: "expected 'symbol id'".into(),
                    })?;
            let id = id.parse().map_err(|_| WfstError::Parse {
                line: ln + 1,
                msg: "bad label id".into(),
            })?;
            t.add(sym.trim_end(), id);
        }
        Ok(t)
    }
}
