use std::collections::{BTreeMap, HashMap, VecDeque};

use super::fst::{Arc, Fst, Label, StateId, EPS};
use super::{Weight, WfstError};

/// Determinization gives up once it creates this many times the input's
/// state count.
pub const DETERMINIZE_STATE_FACTOR: usize = 100;

/// Composition `a ∘ b` with the sequence ε-filter: when `a` emits ε and `b`
/// consumes ε at the same point, `a` moves first and `b`'s ε-moves may not
/// be followed by an ε-output move of `a`, so each alignment is built once.
pub fn compose(a: &Fst, b: &Fst) -> Fst {
    let mut out = Fst::new();
    let (Some(sa), Some(sb)) = (a.start(), b.start()) else {
        return out;
    };

    // Arcs of `b` grouped by input label, per state.
    let b_index: Vec<HashMap<Label, Vec<usize>>> = b
        .states()
        .map(|s| {
            let mut m: HashMap<Label, Vec<usize>> = HashMap::new();
            for (i, arc) in b.arcs(s).iter().enumerate() {
                m.entry(arc.ilabel).or_default().push(i);
            }
            m
        })
        .collect();

    let mut ids: HashMap<(StateId, StateId, u8), StateId> = HashMap::new();
    let mut queue = VecDeque::new();
    let mut get = |out: &mut Fst, queue: &mut VecDeque<(StateId, StateId, u8)>, key| {
        *ids.entry(key).or_insert_with(|| {
            queue.push_back(key);
            out.add_state()
        })
    };
    let s0 = get(&mut out, &mut queue, (sa, sb, 0));
    out.set_start(s0);

    while let Some(key @ (qa, qb, filter)) = queue.pop_front() {
        let src = get(&mut out, &mut queue, key);
        out.set_final(src, a.final_weight(qa).times(b.final_weight(qb)));
        for arc_a in a.arcs(qa) {
            if arc_a.olabel == EPS {
                if filter == 0 {
                    let dst = get(&mut out, &mut queue, (arc_a.nextstate, qb, 0));
                    out.add_arc(src, Arc::new(arc_a.ilabel, EPS, arc_a.weight, dst));
                }
                continue;
            }
            if let Some(idx) = b_index[qb].get(&arc_a.olabel) {
                for &i in idx {
                    let arc_b = b.arcs(qb)[i];
                    let w = arc_a.weight.times(arc_b.weight);
                    let dst = get(&mut out, &mut queue, (arc_a.nextstate, arc_b.nextstate, 0));
                    out.add_arc(src, Arc::new(arc_a.ilabel, arc_b.olabel, w, dst));
                }
            }
        }
        if let Some(idx) = b_index[qb].get(&EPS) {
            for &i in idx {
                let arc_b = b.arcs(qb)[i];
                let dst = get(&mut out, &mut queue, (qa, arc_b.nextstate, 1));
                out.add_arc(src, Arc::new(EPS, arc_b.olabel, arc_b.weight, dst));
            }
        }
    }
    out.connect();
    out
}

type Subset = Vec<(StateId, Weight, Vec<Label>)>;
type SubsetKey = Vec<(StateId, i64, Vec<Label>)>;

fn subset_key(s: &Subset) -> SubsetKey {
    s.iter()
        .map(|(q, w, r)| (*q, w.quantize(), r.clone()))
        .collect()
}

/// Merges duplicate (state, residual string) entries keeping the lighter
/// weight and sorts into canonical order.
fn normalize(mut items: Subset) -> Subset {
    items.sort_by(|x, y| x.0.cmp(&y.0).then_with(|| x.2.cmp(&y.2)));
    let mut out: Subset = Vec::with_capacity(items.len());
    for it in items {
        match out.last_mut() {
            Some(last) if last.0 == it.0 && last.2 == it.2 => last.1 = last.1.plus(it.1),
            _ => out.push(it),
        }
    }
    out
}

/// Weighted determinization of a transducer without input-ε arcs.
///
/// Each subset element carries a residual weight and a residual output
/// string; at most one output label is emitted per arc. Residual output left
/// at a final subset is flushed through an ε-input chain.
pub fn determinize(f: &Fst) -> Result<Fst, WfstError> {
    let mut out = Fst::new();
    let mut f = f.clone();
    f.connect();
    let f = &f;
    let Some(s0) = f.start() else { return Ok(out) };
    for s in f.states() {
        if f.arcs(s).iter().any(|a| a.ilabel == EPS) {
            return Err(WfstError::InputEpsilon(s));
        }
    }
    let cap = DETERMINIZE_STATE_FACTOR * f.num_states().max(1);

    let mut ids: HashMap<SubsetKey, StateId> = HashMap::new();
    let mut subsets: Vec<Subset> = Vec::new();
    let start: Subset = vec![(s0, Weight::one(), Vec::new())];
    ids.insert(subset_key(&start), out.add_state());
    subsets.push(start);
    out.set_start(0);

    let mut next = 0;
    while next < subsets.len() {
        let src = next;
        let subset = subsets[src].clone();
        next += 1;

        // Final weight: lightest final element; its residual string is flushed.
        let mut best_final: Option<(Weight, &Vec<Label>)> = None;
        for (q, w, r) in &subset {
            let fw = w.times(f.final_weight(*q));
            if !fw.is_zero() && best_final.is_none_or(|(b, _)| fw.value() < b.value()) {
                best_final = Some((fw, r));
            }
        }
        if let Some((fw, residual)) = best_final {
            if residual.is_empty() {
                out.set_final(src, fw);
            } else {
                let mut s = src;
                for (i, &l) in residual.iter().enumerate() {
                    let n = out.add_state();
                    let w = if i == 0 { fw } else { Weight::one() };
                    out.add_arc(s, Arc::new(EPS, l, w, n));
                    s = n;
                }
                out.set_final(s, Weight::one());
            }
        }

        let mut by_label: BTreeMap<Label, Subset> = BTreeMap::new();
        for (q, w, r) in &subset {
            for arc in f.arcs(*q) {
                if arc.weight.is_zero() {
                    continue;
                }
                let mut s = r.clone();
                if arc.olabel != EPS {
                    s.push(arc.olabel);
                }
                by_label.entry(arc.ilabel).or_default().push((
                    arc.nextstate,
                    w.times(arc.weight),
                    s,
                ));
            }
        }
        for (ilabel, cands) in by_label {
            let wmin = cands.iter().fold(Weight::zero(), |acc, c| acc.plus(c.1));
            let first = &cands[0].2;
            let shares_first =
                !first.is_empty() && cands.iter().all(|c| c.2.first() == first.first());
            let emit = if shares_first { first[0] } else { EPS };
            let skip = usize::from(shares_first);
            let items: Subset = cands
                .into_iter()
                .map(|(q, w, s)| (q, Weight::new(w.value() - wmin.value()), s[skip..].to_vec()))
                .collect();
            let items = normalize(items);
            // In a trim functional transducer, one state reached by one input
            // string cannot owe two different outputs.
            if let Some(w) = items.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(WfstError::NonFunctional { state: w[0].0 });
            }
            let key = subset_key(&items);
            let dst = match ids.get(&key) {
                Some(&d) => d,
                None => {
                    if out.num_states() >= cap {
                        return Err(WfstError::DeterminizeCap {
                            cap,
                            input_states: f.num_states(),
                        });
                    }
                    let d = out.add_state();
                    ids.insert(key, d);
                    while subsets.len() < d {
                        // States added by flush chains have no subset.
                        subsets.push(Vec::new());
                    }
                    subsets.push(items);
                    d
                }
            };
            out.add_arc(src, Arc::new(ilabel, emit, wmin, dst));
        }
    }
    out.connect();
    Ok(out)
}

/// Moore partition refinement treating each arc's (input, output, weight)
/// triple as one letter. Merged states keep the arcs of their lowest member.
pub fn minimize(f: &Fst) -> Fst {
    let mut f = f.clone();
    f.connect();
    let n = f.num_states();
    if n == 0 {
        return f;
    }
    let mut class: Vec<usize> = vec![0; n];
    let mut num_classes = 0;
    loop {
        let mut sigs: HashMap<(usize, i64, Vec<(Label, Label, i64, usize)>), usize> =
            HashMap::new();
        let mut next: Vec<usize> = Vec::with_capacity(n);
        for s in 0..n {
            let mut arcs: Vec<(Label, Label, i64, usize)> = f
                .arcs(s)
                .iter()
                .map(|a| (a.ilabel, a.olabel, a.weight.quantize(), class[a.nextstate]))
                .collect();
            arcs.sort_unstable();
            arcs.dedup();
            let key = (class[s], f.final_weight(s).quantize(), arcs);
            let id = sigs.len();
            next.push(*sigs.entry(key).or_insert(id));
        }
        let count = sigs.len();
        class = next;
        if count == num_classes {
            break;
        }
        num_classes = count;
    }

    let mut out = Fst::new();
    for _ in 0..num_classes {
        out.add_state();
    }
    let mut done = vec![false; num_classes];
    for s in 0..n {
        let c = class[s];
        if done[c] {
            continue;
        }
        done[c] = true;
        out.set_final(c, f.final_weight(s));
        let mut seen = std::collections::HashSet::new();
        for a in f.arcs(s) {
            let key = (a.ilabel, a.olabel, a.weight.quantize(), class[a.nextstate]);
            if seen.insert(key) {
                out.add_arc(
                    c,
                    Arc::new(a.ilabel, a.olabel, a.weight, class[a.nextstate]),
                );
            }
        }
    }
    out.set_start(class[f.start().expect("connected machine has a start")]);
    out.connect();
    out
}

/// Replaces every label satisfying `is_aux` with ε on both tapes.
pub fn remove_aux_labels(f: &mut Fst, is_aux: impl Fn(Label) -> bool) {
    f.relabel(
        |l| if is_aux(l) { EPS } else { l },
        |l| if is_aux(l) { EPS } else { l },
    );
}
