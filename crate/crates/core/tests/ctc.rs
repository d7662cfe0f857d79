//! CTC loss, greedy search and threshold expansion against brute-force oracles.

use ctcspell::ctc::{
    collapse, ctc_loss, ctc_loss_with_grad, enumerate_paths, forward_backward, greedy_search, threshold_expand, PosteriorMatrix,
    ThresholdConfig,
};
use numerics::Rng;

fn random_post(rng: &mut Rng, frames: usize, width: usize) -> PosteriorMatrix {
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| {
            let w: Vec<f64> = (0..width).map(|_| rng.uniform_range(0.01, 1.0)).collect();
            let z: f64 = w.iter().sum();
            w.iter().map(|x| x / z).collect()
        })
        .collect();
    PosteriorMatrix::from_rows(&rows).unwrap()
}

/// Frames needed to emit `target` (one per token plus a blank between repeats).
fn feasible(target: &[usize], frames: usize) -> bool {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count() <= frames
}

#[test]
fn loss_matches_path_enumeration() {
    let mut rng = Rng::seed(1);
    let mut checked = 0;
    while checked < 200 {
        let frames = 1 + rng.below(6);
        let tokens = 1 + rng.below(3);
        let post = random_post(&mut rng, frames, tokens + 1);
        let len = rng.below(frames + 1);
        let target: Vec<usize> = (0..len).map(|_| rng.below(tokens)).collect();
        if !feasible(&target, frames) {
            assert!(ctc_loss(&post, &target).is_err());
            assert_eq!(enumerate_paths(&post, &target).unwrap(), 0.0);
            continue;
        }
        let brute = enumerate_paths(&post, &target).unwrap();
        let exact = (-ctc_loss(&post, &target).unwrap()).exp();
        assert!((brute - exact).abs() < 1e-9, "{brute} vs {exact}");
        checked += 1;
    }
}

#[test]
fn probability_over_all_labelings_sums_to_one() {
    let mut rng = Rng::seed(2);
    for _ in 0..20 {
        let (frames, tokens) = (1 + rng.below(4), 1 + rng.below(2));
        let post = random_post(&mut rng, frames, tokens + 1);
        // Every path collapses to one labeling of length <= frames.
        let mut total = 0.0;
        let mut stack = vec![Vec::new()];
        while let Some(y) = stack.pop() {
            total += enumerate_paths(&post, &y).unwrap();
            if y.len() < frames {
                for k in 0..tokens {
                    let mut z = y.clone();
                    z.push(k);
                    stack.push(z);
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = Rng::seed(3);
    let h = 1e-5;
    for _ in 0..20 {
        let post = random_post(&mut rng, 5, 4);
        let target = [0, 2, 2];
        let (_, grad) = ctc_loss_with_grad(&post, &target).unwrap();
        // Posterior entries are treated as free variables, so perturb the
        // log-probabilities the recursion actually consumes.
        let lp = post.log_probs();
        let nll = |lp: &[f64]| forward_backward(lp, 5, 4, &target).unwrap().nll;
        for i in 0..lp.len() {
            let (mut up, mut down) = (lp.clone(), lp.clone());
            up[i] += h;
            down[i] -= h;
            // d nll / d p = (d nll / d ln p) / p
            let numeric = (nll(&up) - nll(&down)) / (2.0 * h) / post.data()[i];
            let err = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-8);
            assert!(err < 1e-4, "entry {i}: {numeric} vs {}", grad[i]);
        }
    }
}

#[test]
fn greedy_path_beats_sampled_paths() {
    let mut rng = Rng::seed(4);
    for _ in 0..20 {
        let post = random_post(&mut rng, 6, 4);
        let (path, tokens) = greedy_search(&post);
        assert_eq!(tokens, collapse(&path, post.blank()));
        let best = post.path_probability(&path);
        for _ in 0..100 {
            let other: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
            assert!(post.path_probability(&other) <= best);
        }
    }
}

#[test]
fn collapse_is_idempotent_on_collapsed_sequences() {
    let mut rng = Rng::seed(5);
    for _ in 0..100 {
        let path: Vec<usize> = (0..10).map(|_| rng.below(4)).collect();
        let once = collapse(&path, 3);
        assert!(once.iter().all(|&k| k != 3));
        let mut dedup = once.clone();
        dedup.dedup();
        assert_eq!(collapse(&dedup, 3), dedup);
    }
}

#[test]
fn d1_thresholds_reproduce_greedy() {
    let mut rng = Rng::seed(6);
    let d1 = ThresholdConfig::new(1.0, 1.0).unwrap();
    for _ in 0..100 {
        let frames = 1 + rng.below(12);
        let post = random_post(&mut rng, frames, 5);
        let hyps = threshold_expand(&post, &d1, 16);
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].tokens, greedy_search(&post).1);
    }
}

#[test]
fn expansion_shrinks_as_lower_threshold_rises() {
    let mut rng = Rng::seed(7);
    for _ in 0..50 {
        let post = random_post(&mut rng, 8, 3);
        let greedy = greedy_search(&post).1;
        let mut last = usize::MAX;
        for lower in [0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9] {
            let cfg = ThresholdConfig::new(0.95, lower).unwrap();
            let hyps = threshold_expand(&post, &cfg, usize::MAX);
            assert_eq!(hyps[0].tokens, greedy);
            assert!(hyps.len() <= last, "lower {lower}: {} > {last}", hyps.len());
            assert!(hyps.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
            last = hyps.len();
        }
    }
}

#[test]
fn threshold_expansion_respects_max_paths() {
    let mut rng = Rng::seed(8);
    let post = random_post(&mut rng, 12, 3);
    let cfg = ThresholdConfig::new(1.0, 0.01).unwrap();
    for k in [1, 2, 5, 16] {
        assert!(threshold_expand(&post, &cfg, k).len() <= k);
    }
}

#[test]
fn posterior_file_round_trip() {
    let mut rng = Rng::seed(9);
    let post = random_post(&mut rng, 7, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.pstm");
    post.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"PSTM1");
    assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 7);
    assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 4);
    assert_eq!(PosteriorMatrix::load(&path).unwrap(), post);
}
