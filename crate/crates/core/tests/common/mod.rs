//! Brute-force oracles shared by the WFST and acceptance targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ctcspell::ctc::{collapse, PosteriorMatrix};
use ctcspell::wfst::*;
use numerics::Rng;

pub type Language = BTreeMap<(Vec<Label>, Vec<Label>), f64>;

/// Every (input, output) string pair of an acyclic machine with its lightest
/// weight.
pub fn enumerate(f: &Fst) -> Language {
    fn walk(
        f: &Fst,
        s: StateId,
        i: &mut Vec<Label>,
        o: &mut Vec<Label>,
        w: f64,
        out: &mut Language,
    ) {
        if f.is_final(s) {
            let total = w + f.final_weight(s).value();
            let e = out.entry((i.clone(), o.clone())).or_insert(f64::INFINITY);
            *e = e.min(total);
        }
        for a in f.arcs(s) {
            let (pi, po) = (a.ilabel != EPS, a.olabel != EPS);
            if pi {
                i.push(a.ilabel);
            }
            if po {
                o.push(a.olabel);
            }
            walk(f, a.nextstate, i, o, w + a.weight.value(), out);
            if pi {
                i.pop();
            }
            if po {
                o.pop();
            }
        }
    }
    let mut out = Language::new();
    if let Some(s0) = f.start() {
        walk(f, s0, &mut Vec::new(), &mut Vec::new(), 0.0, &mut out);
    }
    out
}

pub fn same_language(a: &Language, b: &Language, tol: f64) -> bool {
    a.len() == b.len()
        && a.iter()
            .all(|(k, w)| b.get(k).is_some_and(|v| (v - w).abs() <= tol))
}

/// Random acyclic machine: arcs only go to higher-numbered states. Outputs
/// are a fixed function of inputs so the machine stays functional.
pub fn random_acyclic(rng: &mut Rng, states: usize, labels: u32, outmap: &[Label]) -> Fst {
    let mut f = Fst::new();
    for _ in 0..states {
        f.add_state();
    }
    f.set_start(0);
    for s in 0..states - 1 {
        let n = 1 + rng.below(3);
        for _ in 0..n {
            let d = s + 1 + rng.below(states - s - 1);
            let l = 1 + rng.below(labels as usize) as Label;
            f.add_arc(
                s,
                Arc::new(
                    l,
                    outmap[l as usize],
                    Weight::new(rng.uniform_range(0.0, 3.0)),
                    d,
                ),
            );
        }
    }
    f.set_final(states - 1, Weight::new(rng.uniform_range(0.0, 1.0)));
    if rng.bernoulli(0.5) {
        let s = rng.below(states - 1);
        f.set_final(s, Weight::new(rng.uniform_range(0.0, 2.0)));
    }
    f
}

pub struct Toy {
    pub prons: Vec<Vec<usize>>,
    pub counts: NgramCounts,
    pub units: usize,
}

pub fn toy() -> Toy {
    Toy {
        // Word 1 is a homophone of word 0; word 2 has two units.
        prons: vec![vec![0], vec![0], vec![1, 0]],
        counts: NgramCounts::from_sentences(
            &[vec![0u32, 2], vec![1, 1], vec![2, 0, 1], vec![0]],
            2,
        ),
        units: 2,
    }
}

pub fn random_posteriors(rng: &mut Rng, frames: usize, width: usize) -> PosteriorMatrix {
    let mut data = Vec::new();
    for _ in 0..frames {
        let row: Vec<f64> = (0..width).map(|_| rng.uniform_range(0.05, 1.0)).collect();
        let z: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / z));
    }
    PosteriorMatrix::new(frames, width, data).unwrap()
}

/// min over CTC paths π and word strings W with pron(W) = F(π) of
/// `scale · (−ln P(π)) + LM(W)`, LM being the lightest path through G.
pub fn joint_oracle(toy: &Toy, g: &Fst, post: &PosteriorMatrix, scale: f64) -> (Vec<u32>, f64) {
    let width = toy.units + 1;
    let frames = post.frames();
    let mut best = (Vec::new(), f64::INFINITY);
    let mut path = vec![0usize; frames];
    loop {
        let units = collapse(&path, toy.units);
        let am: f64 = path
            .iter()
            .enumerate()
            .map(|(t, &k)| -post.get(t, k).ln())
            .sum();
        for words in segmentations(&toy.prons, &units) {
            let labels: Vec<Label> = words.iter().map(|&w| word_label(w as usize)).collect();
            if let Some((_, _, lm)) = compose(&Fst::linear(&labels, None), g).shortest_path() {
                let total = scale * am + lm.value();
                if total < best.1 {
                    best = (words, total);
                }
            }
        }
        let mut i = 0;
        loop {
            if i == frames {
                return best;
            }
            path[i] += 1;
            if path[i] < width {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

pub fn segmentations(prons: &[Vec<usize>], units: &[usize]) -> Vec<Vec<u32>> {
    if units.is_empty() {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (w, p) in prons.iter().enumerate() {
        if units.starts_with(p) {
            for mut rest in segmentations(prons, &units[p.len()..]) {
                rest.insert(0, w as u32);
                out.push(rest);
            }
        }
    }
    out
}

pub fn words_of(labels: &[Label]) -> Vec<u32> {
    labels.iter().map(|&l| l - 1).collect()
}
