//! Synthetic language, vocabulary folding, pair expansion and scoring.

use std::collections::BTreeSet;

use ctcspell::corpus::experiment::{build_graph, decode_utterances, greedy_transcripts, synthesize, train_acoustic_model};
use ctcspell::corpus::{
    build_char_vocab, expand_dataset, parse_sources, report, score, synth_language, DecodedUtterance, ExperimentConfig,
    LanguageConfig, ScoredRun, Source,
};
use ctcspell::ctc::{PosteriorMatrix, ThresholdConfig, Vocab};
use ctcspell::metrics::ErrorCounts;
use ctcspell::wfst::{BeamOptions, SearchGraph};
use numerics::Rng;

fn language(seed: u64, n_sentences: usize) -> (ctcspell::corpus::Lexicon, Vec<String>) {
    synth_language(seed, &LanguageConfig { n_sentences, ..Default::default() }).unwrap()
}

/// Average ranks (ties share the mean rank).
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn character_frequencies_follow_zipf_ranks() {
    let (lex, text) = language(11, 10_000);
    let mut counts = vec![0.0; lex.len()];
    for s in &text {
        for c in s.chars() {
            counts[lex.index(c).unwrap()] += 1.0;
        }
    }
    // Character index is the Zipf rank; frequency should fall with it.
    let weights: Vec<f64> = (0..lex.len()).map(|i| 1.0 / (i + 1) as f64).collect();
    let rho = pearson(&ranks(&weights), &ranks(&counts));
    assert!(rho > 0.9, "spearman {rho}");
}

#[test]
fn homophones_exist_and_classes_partition_characters() {
    let cfg = LanguageConfig { n_chars: 50, n_classes: 20, n_sentences: 50, ..Default::default() };
    let (lex, _) = synth_language(2, &cfg).unwrap();
    assert_eq!(lex.len(), 50);
    let members: Vec<Vec<char>> = (0..lex.num_classes()).map(|k| lex.homophones(k)).collect();
    assert!(members.iter().any(|m| m.len() >= 2));
    let total: usize = members.iter().map(Vec::len).sum();
    assert_eq!(total, lex.len());
    for (k, m) in members.iter().enumerate() {
        for &c in m {
            assert_eq!(lex.class_of(c), Some(k));
        }
    }
}

#[test]
fn language_is_seeded() {
    assert_eq!(language(5, 300), language(5, 300));
    assert_ne!(language(5, 300).1, language(6, 300).1);
    for s in language(5, 300).1 {
        let n = s.chars().count();
        assert!((5..=12).contains(&n));
    }
}

#[test]
fn degenerate_language_sizes_are_rejected() {
    for cfg in [
        LanguageConfig { n_chars: 3, n_classes: 4, ..Default::default() },
        LanguageConfig { n_classes: 1, ..Default::default() },
        LanguageConfig { min_len: 0, ..Default::default() },
        LanguageConfig { topics: 0, ..Default::default() },
    ] {
        assert!(synth_language(0, &cfg).is_err());
    }
}

#[test]
fn coverage_grows_with_vocabulary_size() {
    let (lex, text) = language(3, 2000);
    let mut last = 0.0;
    for k in 1..=lex.len() {
        let v = build_char_vocab(&text, &lex, k).unwrap();
        assert!(v.coverage() >= last, "K={k}");
        last = v.coverage();
        for &u in v.units() {
            assert_eq!(v.fold(u), u);
            assert!(!v.fold_map().contains_key(&u));
        }
        for (&from, &to) in v.fold_map() {
            assert!(v.units().contains(&to));
            if v.warnings().is_empty() {
                assert_eq!(lex.class_of(from), lex.class_of(to));
            }
        }
    }
    let all = build_char_vocab(&text, &lex, lex.len()).unwrap();
    assert!(all.fold_map().is_empty());
    assert_eq!(all.coverage(), 1.0);
    assert!(build_char_vocab(&text, &lex, lex.len() + 1).is_err());
}

#[test]
fn oov_characters_fold_to_the_most_frequent_homophone() {
    let (lex, text) = language(4, 2000);
    let v = build_char_vocab(&text, &lex, 30).unwrap();
    for (&from, &to) in v.fold_map() {
        let class = lex.class_of(from).unwrap();
        let best = v.units().iter().copied().filter(|&u| lex.class_of(u) == Some(class)).max_by_key(|&u| {
            let n = text.iter().flat_map(|s| s.chars()).filter(|&c| c == u).count();
            // Ties go to the earlier unit.
            (n, std::cmp::Reverse(v.units().iter().position(|&x| x == u)))
        });
        assert_eq!(Some(to), best.or(v.units().first().copied()));
    }
}

/// Small decoded corpus over three units, with posteriors and lattices.
fn decoded(n: usize, seed: u64) -> (Vocab, Vec<DecodedUtterance>) {
    let units = Vocab::new(["a", "b", "c"]).unwrap();
    let mut rng = Rng::seed(seed);
    let refs: Vec<String> = (0..n)
        .map(|i| {
            let len = 2 + i % 3;
            (0..len).map(|_| ["a", "b", "c"][rng.below(3)]).collect::<String>()
        })
        .collect();
    let graph = build_graph(&units, &refs, 2, 0.5).unwrap();
    let search = SearchGraph::new(&graph).unwrap();
    let out = refs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let frames = 2 * r.len() + 2;
            let rows: Vec<Vec<f64>> = (0..frames)
                .map(|_| {
                    let w: Vec<f64> = (0..4).map(|_| rng.uniform_range(0.05, 1.0)).collect();
                    let z: f64 = w.iter().sum();
                    w.iter().map(|x| x / z).collect()
                })
                .collect();
            let post = PosteriorMatrix::from_rows(&rows).unwrap();
            let lattice = search.decode(&post, &BeamOptions::exact()).unwrap();
            DecodedUtterance {
                id: format!("u{i:03}"),
                reference: r.clone(),
                posterior: Some(post),
                lattice: Some(lattice),
            }
        })
        .collect();
    (units, out)
}

#[test]
fn greedy_recipe_gives_one_pair_per_utterance() {
    let (units, d) = decoded(30, 1);
    let refs: BTreeSet<&str> = d.iter().map(|u| u.reference.as_str()).collect();
    let distinct: Vec<DecodedUtterance> =
        refs.iter().map(|r| d.iter().find(|u| u.reference == *r).unwrap().clone()).collect();
    let c = expand_dataset(&distinct, &units, &[Source::Greedy], 64).unwrap();
    assert_eq!(c.pairs.len(), distinct.len());
    assert_eq!(c.tag_counts["greedy"], distinct.len());
    assert!(c.pairs.iter().all(|p| p.tag == "greedy" && !p.reference.is_empty()));
}

#[test]
fn nbest_pairs_are_bounded_by_lattice_size() {
    let (units, d) = decoded(30, 2);
    let refs: BTreeSet<&str> = d.iter().map(|u| u.reference.as_str()).collect();
    let distinct: Vec<DecodedUtterance> =
        refs.iter().map(|r| d.iter().find(|u| u.reference == *r).unwrap().clone()).collect();
    let n = distinct.len();
    let c = expand_dataset(&distinct, &units, &[Source::Nbest(5)], 64).unwrap();
    assert!(c.pairs.len() >= n && c.pairs.len() <= 5 * n, "{} pairs for {n}", c.pairs.len());
}

#[test]
fn larger_recipes_never_lose_pairs() {
    let (units, d) = decoded(25, 3);
    let recipes = [
        "threshold(1.0,1.0)",
        "threshold(1.0,1.0), threshold(0.5,0.1)",
        "threshold(1.0,1.0), threshold(0.5,0.1), nbest(3)",
        "threshold(1.0,1.0), threshold(0.5,0.1), nbest(3), greedy, nbest(5)",
    ];
    let mut prev: BTreeSet<(String, String)> = BTreeSet::new();
    for r in recipes {
        let c = expand_dataset(&d, &units, &parse_sources(r).unwrap(), 64).unwrap();
        let set: BTreeSet<(String, String)> = c.pairs.iter().map(|p| (p.hyp.clone(), p.reference.clone())).collect();
        assert_eq!(set.len(), c.pairs.len(), "duplicates in {r}");
        assert!(prev.is_subset(&set), "{r}");
        assert_eq!(c.tag_counts.values().sum::<usize>(), c.pairs.len());
        prev = set;
    }
    // The (1.0, 1.0) threshold source is the greedy hypothesis.
    let t = expand_dataset(&d, &units, &[Source::Threshold(ThresholdConfig::new(1.0, 1.0).unwrap())], 64).unwrap();
    let g = expand_dataset(&d, &units, &[Source::Greedy], 64).unwrap();
    let hyps = |c: &ctcspell::corpus::PairedCorpus| c.pairs.iter().map(|p| p.hyp.clone()).collect::<Vec<_>>();
    assert_eq!(hyps(&t), hyps(&g));
}

/// Textbook Levenshtein distance.
fn distance(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

#[test]
fn cer_matches_a_reference_dynamic_program() {
    let mut rng = Rng::seed(7);
    let alphabet = ['a', 'b', 'c', 'd'];
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    let (mut dist, mut len) = (0, 0);
    for i in 0..1000 {
        let r: Vec<char> = (0..1 + rng.below(8)).map(|_| alphabet[rng.below(4)]).collect();
        let h: Vec<char> = (0..rng.below(9)).map(|_| alphabet[rng.below(4)]).collect();
        let d = distance(&h, &r);
        let one = score(&[("x".into(), r.iter().collect())], &[("x".into(), h.iter().collect())]).unwrap();
        assert_eq!(one.totals.errors(), d, "{h:?} vs {r:?}");
        dist += d;
        len += r.len();
        refs.push((format!("u{i}"), r.iter().collect::<String>()));
        hyps.push((format!("u{i}"), h.iter().collect::<String>()));
    }
    let rep = score(&refs, &hyps).unwrap();
    assert!((rep.cer() - dist as f64 / len as f64).abs() < 1e-12);
    let sum: ErrorCounts = rep.utterances.iter().map(|u| u.counts).sum();
    assert_eq!(sum, rep.totals);
}

#[test]
fn scoring_examples_and_tie_break() {
    let r = |h: &str, r: &str| score(&[("a".into(), r.into())], &[("a".into(), h.into())]).unwrap().totals;
    let t = r("axc", "abc");
    assert_eq!((t.sub, t.ins, t.del), (1, 0, 0));
    assert!((t.cer() - 1.0 / 3.0).abs() < 1e-12);
    let t = r("ab", "abc");
    assert_eq!((t.sub, t.ins, t.del), (0, 0, 1));
    // One substitution, never an insertion plus a deletion.
    let t = r("x", "y");
    assert_eq!((t.sub, t.ins, t.del), (1, 0, 0));
    assert!(score(&[("a".into(), "x".into())], &[("b".into(), "x".into())]).is_err());
}

#[test]
fn report_orders_sets_and_computes_relative_gains() {
    let run = |system: &str, set: &str, sub: usize, n: usize| ScoredRun {
        system: system.into(),
        testset: set.into(),
        counts: ErrorCounts { sub, ins: 0, del: 0, ref_len: n },
    };
    let runs = [run("base", "a", 442, 10_000), run("sp", "a", 341, 10_000), run("base", "b", 728, 10_000), run("sp", "b", 421, 10_000)];
    let t = report(&runs, Some("base")).unwrap();
    assert_eq!(t.rows[0].testset, "b");
    assert_eq!(format!("{:.1}", t.rows[1].relative.unwrap()), "42.2");
    assert_eq!(format!("{:.1}", t.rows[3].relative.unwrap()), "22.9");
    assert!(t.to_text().contains("rel%"));
}

#[test]
fn greedy_errors_are_mostly_homophone_substitutions() {
    let mut cfg = ExperimentConfig::desk();
    cfg.language.n_sentences = 3000;
    cfg.train_utts = 1500;
    cfg.test_utts = 150;
    let data = synthesize(&cfg).unwrap();
    let (model, _) = train_acoustic_model(&cfg, &data, None).unwrap();
    let units = data.vocab.ctc_vocab();
    let dec = decode_utterances(&model, None, &data.test, &cfg.beam_options()).unwrap();
    let hyps = greedy_transcripts(&dec, &units).unwrap();
    let refs: Vec<(String, String)> = data.test.iter().map(|u| (u.id.clone(), u.reference.clone())).collect();
    let t = score(&refs, &hyps).unwrap().totals;
    assert!(t.errors() > 0);
    let share = t.sub as f64 / t.errors() as f64;
    assert!(share > 0.6, "substitutions {share:.3} of {t:?}");
}
