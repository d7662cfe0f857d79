use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use super::fst::{Arc, Fst, Label, StateId, EPS};
use super::{Weight, WfstError};
use crate::ctc::PosteriorMatrix;

/// Beam search settings. `beam_width = None` disables histogram pruning and
/// `lattice_beam = None` keeps every surviving arc in the lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamOptions {
    pub beam_width: Option<usize>,
    pub acoustic_scale: f64,
    pub lattice_beam: Option<f64>,
}

impl Default for BeamOptions {
    fn default() -> Self {
        Self {
            beam_width: Some(64),
            acoustic_scale: 1.0,
            lattice_beam: Some(12.0),
        }
    }
}

impl BeamOptions {
    pub fn exact() -> Self {
        Self {
            beam_width: None,
            acoustic_scale: 1.0,
            lattice_beam: None,
        }
    }

    pub fn with_beam(beam_width: usize) -> Self {
        Self {
            beam_width: Some(beam_width),
            ..Self::default()
        }
    }
}

/// Acyclic machine of surviving hypotheses. Input labels are CTC labels
/// (index + 1, ε for graph-internal moves), outputs are graph output labels.
/// Every arc carries the frame span `[t0, t1)` it consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    fst: Fst,
    spans: Vec<Vec<(usize, usize)>>,
    frames: usize,
}

/// One accepting lattice path.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticePath {
    /// CTC indices, one per frame.
    pub ctc: Vec<usize>,
    /// Non-ε output labels.
    pub olabels: Vec<Label>,
    pub weight: Weight,
}

impl Lattice {
    pub fn fst(&self) -> &Fst {
        &self.fst
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn span(&self, s: StateId, arc: usize) -> (usize, usize) {
        self.spans[s][arc]
    }

    /// Wraps an acyclic machine; spans are derived from emitting arcs.
    pub fn from_fst(fst: Fst) -> Result<Self, WfstError> {
        let order = fst.topological_order().ok_or(WfstError::Cyclic)?;
        let mut frame = vec![usize::MAX; fst.num_states()];
        if let Some(s0) = fst.start() {
            frame[s0] = 0;
        }
        let mut spans: Vec<Vec<(usize, usize)>> = fst
            .states()
            .map(|s| vec![(0, 0); fst.arcs(s).len()])
            .collect();
        for &s in &order {
            if frame[s] == usize::MAX {
                continue;
            }
            for (i, a) in fst.arcs(s).iter().enumerate() {
                let t1 = frame[s] + usize::from(a.ilabel != EPS);
                spans[s][i] = (frame[s], t1);
                if frame[a.nextstate] == usize::MAX {
                    frame[a.nextstate] = t1;
                } else if frame[a.nextstate] != t1 {
                    return Err(WfstError::Parse {
                        line: 0,
                        msg: "state reached at two different frames".into(),
                    });
                }
            }
        }
        let frames = fst
            .states()
            .filter(|&s| fst.is_final(s))
            .map(|s| frame[s])
            .max()
            .unwrap_or(0);
        Ok(Self { fst, spans, frames })
    }

    /// Keeps arcs selected by `keep`, then trims, preserving spans.
    fn filtered(&self, keep: impl Fn(StateId, usize) -> bool) -> Self {
        let mut fst = Fst::new();
        for _ in self.fst.states() {
            fst.add_state();
        }
        let mut spans = vec![Vec::new(); self.fst.num_states()];
        for s in self.fst.states() {
            fst.set_final(s, self.fst.final_weight(s));
            for (i, a) in self.fst.arcs(s).iter().enumerate() {
                if keep(s, i) {
                    fst.add_arc(s, *a);
                    spans[s].push(self.spans[s][i]);
                }
            }
        }
        if let Some(s0) = self.fst.start() {
            fst.set_start(s0);
        }
        let pre = fst.clone();
        let map = fst.connect();
        let mut new_spans = vec![Vec::new(); fst.num_states()];
        for (old, m) in map.iter().enumerate() {
            if let Some(n) = m {
                new_spans[*n] = pre
                    .arcs(old)
                    .iter()
                    .zip(&spans[old])
                    .filter(|(a, _)| !a.weight.is_zero() && map[a.nextstate].is_some())
                    .map(|(_, sp)| *sp)
                    .collect();
            }
        }
        Self {
            fst,
            spans: new_spans,
            frames: self.frames,
        }
    }

    /// Forward (from start) and backward (to final) best weights.
    fn distances(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.fst.num_states();
        let order = self.fst.topological_order().expect("lattice is acyclic");
        let mut fwd = vec![f64::INFINITY; n];
        if let Some(s0) = self.fst.start() {
            fwd[s0] = 0.0;
        }
        for &s in &order {
            if fwd[s].is_infinite() {
                continue;
            }
            for a in self.fst.arcs(s) {
                let c = fwd[s] + a.weight.value();
                if c < fwd[a.nextstate] {
                    fwd[a.nextstate] = c;
                }
            }
        }
        let bwd: Vec<f64> = self
            .fst
            .distance_to_final()
            .iter()
            .map(|w| w.value())
            .collect();
        (fwd, bwd)
    }

    /// Drops arcs whose best complete path is more than `beam` worse than the
    /// lattice's best path.
    pub fn prune(&self, beam: f64) -> Self {
        let (fwd, bwd) = self.distances();
        let Some(s0) = self.fst.start() else {
            return self.clone();
        };
        let best = bwd[s0];
        self.filtered(|s, i| {
            let a = &self.fst.arcs(s)[i];
            fwd[s] + a.weight.value() + bwd[a.nextstate] <= best + beam
        })
    }

    pub fn best_path(&self) -> Option<LatticePath> {
        let s0 = self.fst.start()?;
        let order = self.fst.topological_order()?;
        let n = self.fst.num_states();
        let mut bwd = vec![f64::INFINITY; n];
        let mut choice: Vec<Option<usize>> = vec![None; n];
        for &s in order.iter().rev() {
            let mut best = self.fst.final_weight(s).value();
            for (i, a) in self.fst.arcs(s).iter().enumerate() {
                let c = a.weight.value() + bwd[a.nextstate];
                if c < best {
                    best = c;
                    choice[s] = Some(i);
                }
            }
            bwd[s] = best;
        }
        if bwd[s0].is_infinite() {
            return None;
        }
        let mut path = LatticePath {
            ctc: Vec::new(),
            olabels: Vec::new(),
            weight: Weight::new(bwd[s0]),
        };
        let mut s = s0;
        while let Some(i) = choice[s] {
            let a = &self.fst.arcs(s)[i];
            if a.ilabel != EPS {
                path.ctc.push(a.ilabel as usize - 1);
            }
            if a.olabel != EPS {
                path.olabels.push(a.olabel);
            }
            s = a.nextstate;
        }
        Some(path)
    }

    pub fn nbest(&self, n: usize) -> Vec<(Vec<Label>, Weight)> {
        nbest(&self.fst, n)
    }

    /// Arc lines carry a sixth `t0:t1` column.
    pub fn to_text(&self) -> String {
        self.fst.to_text_with(|s, i| {
            let (a, b) = self.spans[s][i];
            Some(format!("{a}:{b}"))
        })
    }

    pub fn from_text(text: &str) -> Result<Self, WfstError> {
        let (fst, extras) = Fst::from_text_with(text, 6)?;
        let mut spans: Vec<Vec<(usize, usize)>> = fst.states().map(|_| Vec::new()).collect();
        let mut frames = 0;
        for (s, cols) in extras {
            let span = cols
                .first()
                .and_then(|c| c.split_once(':'))
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| WfstError::Parse {
                    line: 0,
                    msg: "bad frame span".into(),
                })?;
            frames = frames.max(span.1);
            spans[s].push(span);
        }
        if fst.topological_order().is_none() {
            return Err(WfstError::Cyclic);
        }
        Ok(Self { fst, spans, frames })
    }

    pub fn save(&self, path: &Path) -> Result<(), WfstError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WfstError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

struct Node {
    state: StateId,
    cost: f64,
    expanded: bool,
}

struct RawArc {
    src: usize,
    dst: usize,
    ilabel: Label,
    olabel: Label,
    weight: f64,
    t0: usize,
}

/// Frame-synchronous Viterbi beam search through `graph`, whose input labels
/// are CTC labels (index + 1). The arc cost is the graph weight plus
/// `acoustic_scale · (−ln posterior)`.
pub fn beam_search_decode(
    post: &PosteriorMatrix,
    graph: &Fst,
    opts: &BeamOptions,
) -> Result<Lattice, WfstError> {
    SearchGraph::new(graph)?.decode(post, opts)
}

/// A decoding graph with the per-state tables the search needs, built once
/// and shared across utterances.
#[derive(Clone, Debug)]
pub struct SearchGraph<'a> {
    fst: &'a Fst,
    start: StateId,
    max_label: Label,
    /// Whether the state has an emitting arc.
    emits: Vec<bool>,
    /// Fewest frames needed to reach a final state using at least one frame.
    min_frames: Vec<usize>,
}

impl<'a> SearchGraph<'a> {
    pub fn new(fst: &'a Fst) -> Result<Self, WfstError> {
        let start = fst.start().ok_or(WfstError::EmptyLattice)?;
        let n = fst.num_states();
        let emits: Vec<bool> = fst
            .states()
            .map(|s| fst.arcs(s).iter().any(|a| a.ilabel != EPS))
            .collect();
        let max_label = fst
            .states()
            .flat_map(|s| fst.arcs(s).iter().map(|a| a.ilabel))
            .max()
            .unwrap_or(EPS);
        // 0-1 breadth-first search on reversed arcs.
        let mut rev: Vec<Vec<(StateId, usize)>> = vec![Vec::new(); n];
        for s in fst.states() {
            for a in fst.arcs(s) {
                rev[a.nextstate].push((s, usize::from(a.ilabel != EPS)));
            }
        }
        let mut min_frames = vec![usize::MAX; n];
        let mut deque = std::collections::VecDeque::new();
        for s in fst.states().filter(|&s| fst.is_final(s)) {
            min_frames[s] = 0;
            deque.push_back(s);
        }
        while let Some(s) = deque.pop_front() {
            for &(p, c) in &rev[s] {
                let d = min_frames[s] + c;
                if d < min_frames[p] {
                    min_frames[p] = d;
                    if c == 0 {
                        deque.push_front(p);
                    } else {
                        deque.push_back(p);
                    }
                }
            }
        }
        // Same with at least one emitting arc: seed through emitting arcs, then
        // spread backwards over ε arcs.
        let mut at_least_one = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        for s in fst.states() {
            for a in fst.arcs(s) {
                if a.ilabel != EPS && min_frames[a.nextstate] != usize::MAX {
                    at_least_one[s] = at_least_one[s].min(1 + min_frames[a.nextstate]);
                }
            }
            if at_least_one[s] != usize::MAX {
                heap.push(std::cmp::Reverse((at_least_one[s], s)));
            }
        }
        while let Some(std::cmp::Reverse((d, s))) = heap.pop() {
            if d > at_least_one[s] {
                continue;
            }
            for &(p, c) in &rev[s] {
                if c == 0 && d < at_least_one[p] {
                    at_least_one[p] = d;
                    heap.push(std::cmp::Reverse((d, p)));
                }
            }
        }
        Ok(Self {
            fst,
            start,
            max_label,
            emits,
            min_frames: at_least_one,
        })
    }

    pub fn fst(&self) -> &Fst {
        self.fst
    }

    pub fn decode(&self, post: &PosteriorMatrix, opts: &BeamOptions) -> Result<Lattice, WfstError> {
        if opts.beam_width == Some(0) {
            return Err(WfstError::Beam("beam width must be at least 1".into()));
        }
        if !(opts.acoustic_scale > 0.0 && opts.acoustic_scale.is_finite()) {
            return Err(WfstError::Beam("acoustic scale must be positive".into()));
        }
        let width = post.width();
        if self.max_label as usize > width {
            return Err(WfstError::LabelOutOfRange {
                label: self.max_label,
                width,
            });
        }
        search(self, post, opts)
    }
}

fn search(
    sg: &SearchGraph<'_>,
    post: &PosteriorMatrix,
    opts: &BeamOptions,
) -> Result<Lattice, WfstError> {
    let graph = sg.fst;
    let start = sg.start;
    let width = post.width();
    let frames = post.frames();
    let neg_log: Vec<f64> = post
        .data()
        .iter()
        .map(|&p| if p > 0.0 { -p.ln() } else { f64::INFINITY })
        .collect();

    let mut nodes: Vec<Node> = Vec::new();
    let mut arcs: Vec<RawArc> = Vec::new();
    let mut layer: HashMap<StateId, usize> = HashMap::new();
    let mut layer_nodes: Vec<usize> = Vec::new();
    nodes.push(Node {
        state: start,
        cost: 0.0,
        expanded: false,
    });
    layer.insert(start, 0);
    layer_nodes.push(0);

    for t in 0..=frames {
        epsilon_closure(
            graph,
            &mut nodes,
            &mut arcs,
            &mut layer,
            &mut layer_nodes,
            t,
        );
        // The last layer is ranked by complete-path cost. Pruned nodes stop
        // expanding but keep their ε arcs into survivors.
        let score = |n: &Node| {
            if t == frames {
                n.cost + graph.final_weight(n.state).value()
            } else {
                n.cost
            }
        };
        if t == frames {
            layer_nodes.retain(|&n| graph.is_final(nodes[n].state));
        } else {
            // Drop hypotheses that can no longer finish in the frames left.
            layer_nodes.retain(|&n| {
                sg.emits[nodes[n].state] && sg.min_frames[nodes[n].state] <= frames - t
            });
        }
        // Histogram pruning.
        if let Some(b) = opts.beam_width {
            if layer_nodes.len() > b {
                let mut ranked = layer_nodes.clone();
                ranked.sort_by(|&x, &y| {
                    score(&nodes[x])
                        .total_cmp(&score(&nodes[y]))
                        .then(nodes[x].state.cmp(&nodes[y].state))
                });
                ranked.truncate(b);
                layer_nodes = ranked;
            }
        }
        if layer_nodes.is_empty() {
            return Err(WfstError::EmptyLattice);
        }
        if t == frames {
            break;
        }
        let row = &neg_log[t * width..(t + 1) * width];
        let mut next: HashMap<StateId, usize> = HashMap::new();
        let mut next_nodes: Vec<usize> = Vec::new();
        layer_nodes.sort_unstable();
        for &n in &layer_nodes {
            let (q, cost) = (nodes[n].state, nodes[n].cost);
            for a in graph.arcs(q) {
                if a.ilabel == EPS || a.weight.is_zero() {
                    continue;
                }
                let am = row[a.ilabel as usize - 1];
                if am.is_infinite() {
                    continue;
                }
                let w = a.weight.value() + opts.acoustic_scale * am;
                let cand = cost + w;
                let dst = *next.entry(a.nextstate).or_insert_with(|| {
                    nodes.push(Node {
                        state: a.nextstate,
                        cost: f64::INFINITY,
                        expanded: false,
                    });
                    next_nodes.push(nodes.len() - 1);
                    nodes.len() - 1
                });
                if cand < nodes[dst].cost {
                    nodes[dst].cost = cand;
                }
                arcs.push(RawArc {
                    src: n,
                    dst,
                    ilabel: a.ilabel,
                    olabel: a.olabel,
                    weight: w,
                    t0: t,
                });
            }
        }
        layer = next;
        layer_nodes = next_nodes;
    }

    // Nodes of the last layer are the only ones that may be final.
    let mut fst = Fst::new();
    for _ in 0..nodes.len() {
        fst.add_state();
    }
    fst.set_start(0);
    let mut spans: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes.len()];
    for a in &arcs {
        fst.add_arc(
            a.src,
            Arc::new(a.ilabel, a.olabel, Weight::new(a.weight), a.dst),
        );
        spans[a.src].push((a.t0, a.t0 + usize::from(a.ilabel != EPS)));
    }
    for &n in &layer_nodes {
        fst.set_final(n, graph.final_weight(nodes[n].state));
    }
    if fst.topological_order().is_none() {
        return Err(WfstError::Cyclic);
    }
    let raw = Lattice { fst, spans, frames };
    let mut lat = raw.filtered(|_, _| true);
    if lat.fst.start().is_none() {
        return Err(WfstError::EmptyLattice);
    }
    if let Some(beam) = opts.lattice_beam {
        lat = lat.prune(beam);
    }
    Ok(lat)
}

fn epsilon_closure(
    graph: &Fst,
    nodes: &mut Vec<Node>,
    arcs: &mut Vec<RawArc>,
    layer: &mut HashMap<StateId, usize>,
    layer_nodes: &mut Vec<usize>,
    t: usize,
) {
    let mut work: Vec<usize> = layer_nodes.clone();
    work.sort_unstable_by(|a, b| b.cmp(a));
    while let Some(n) = work.pop() {
        let (q, cost, first) = (nodes[n].state, nodes[n].cost, !nodes[n].expanded);
        nodes[n].expanded = true;
        for a in graph.arcs(q) {
            if a.ilabel != EPS || a.weight.is_zero() {
                continue;
            }
            let cand = cost + a.weight.value();
            let dst = *layer.entry(a.nextstate).or_insert_with(|| {
                nodes.push(Node {
                    state: a.nextstate,
                    cost: f64::INFINITY,
                    expanded: false,
                });
                layer_nodes.push(nodes.len() - 1);
                nodes.len() - 1
            });
            if first {
                arcs.push(RawArc {
                    src: n,
                    dst,
                    ilabel: EPS,
                    olabel: a.olabel,
                    weight: a.weight.value(),
                    t0: t,
                });
            }
            if cand < nodes[dst].cost {
                nodes[dst].cost = cand;
                work.push(dst);
            }
        }
    }
}

#[derive(PartialEq)]
struct Entry {
    f: f64,
    g: f64,
    state: Option<StateId>,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on f, then deterministic tie-breaks.
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.node.cmp(&self.node))
            .then_with(|| other.state.cmp(&self.state))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The `n` lowest-weight distinct output strings (ε removed) of an acyclic
/// machine, lightest first.
///
/// A* over (state, output-prefix) pairs, with the exact distance to a final
/// state as heuristic; the first completion of a prefix is its best path.
pub fn nbest(fst: &Fst, n: usize) -> Vec<(Vec<Label>, Weight)> {
    let mut out = Vec::new();
    let Some(s0) = fst.start() else { return out };
    if n == 0 {
        return out;
    }
    let h: Vec<f64> = fst.distance_to_final().iter().map(|w| w.value()).collect();
    if h[s0].is_infinite() {
        return out;
    }
    // Output-prefix trie.
    let mut parent: Vec<(usize, Label)> = vec![(0, EPS)];
    let mut children: HashMap<(usize, Label), usize> = HashMap::new();
    let mut best_g: HashMap<(StateId, usize), f64> = HashMap::new();
    let mut done_nodes: std::collections::HashSet<usize> = std::collections::HashSet::new();
    let mut heap = BinaryHeap::new();
    heap.push(Entry {
        f: h[s0],
        g: 0.0,
        state: Some(s0),
        node: 0,
    });
    best_g.insert((s0, 0), 0.0);
    while let Some(Entry { g, state, node, .. }) = heap.pop() {
        let Some(q) = state else {
            if done_nodes.insert(node) {
                let mut labels = Vec::new();
                let mut k = node;
                while k != 0 {
                    labels.push(parent[k].1);
                    k = parent[k].0;
                }
                labels.reverse();
                out.push((labels, Weight::new(g)));
                if out.len() == n {
                    break;
                }
            }
            continue;
        };
        if best_g.get(&(q, node)).is_some_and(|&b| g > b) {
            continue;
        }
        let fw = fst.final_weight(q);
        if !fw.is_zero() && !done_nodes.contains(&node) {
            let gf = g + fw.value();
            heap.push(Entry {
                f: gf,
                g: gf,
                state: None,
                node,
            });
        }
        for a in fst.arcs(q) {
            if a.weight.is_zero() || h[a.nextstate].is_infinite() {
                continue;
            }
            let child = if a.olabel == EPS {
                node
            } else {
                *children.entry((node, a.olabel)).or_insert_with(|| {
                    parent.push((node, a.olabel));
                    parent.len() - 1
                })
            };
            let g2 = g + a.weight.value();
            let key = (a.nextstate, child);
            if best_g.get(&key).is_none_or(|&b| g2 < b) {
                best_g.insert(key, g2);
                heap.push(Entry {
                    f: g2 + h[a.nextstate],
                    g: g2,
                    state: Some(a.nextstate),
                    node: child,
                });
            }
        }
    }
    // Guard against round-off reordering of near-equal weights.
    out.sort_by(|a, b| a.1.value().total_cmp(&b.1.value()));
    out
}
