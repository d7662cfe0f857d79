//! Synthetic acoustic channel and frame stacking.

use numerics::{Rng, Tensor};

use super::language::{mix, Lexicon};
use super::{CorpusError, Result};

/// Salt for the class prototypes, which depend on nothing but the class id.
const PROTOTYPE_SALT: u64 = 0xC1A55;

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub dim: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    /// Inclusive range of frames per character.
    pub burst: (usize, usize),
    /// Inclusive range of leading and trailing silence frames.
    pub silence: (usize, usize),
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            noise: 0.5,
            burst: (6, 9),
            silence: (3, 6),
        }
    }
}

fn prototype(tag: u64, dim: usize) -> Vec<f64> {
    let mut rng = Rng::seed(mix(PROTOTYPE_SALT, &[tag]));
    (0..dim).map(|_| rng.normal()).collect()
}

/// Frames for `reference`: silence, then one burst per character, then
/// silence. A burst opens with an onset frame and then holds the prototype
/// of the character's pronunciation class, so homophones differ only by
/// noise.
pub fn synth_features(
    lexicon: &Lexicon,
    reference: &str,
    seed: u64,
    cfg: &ChannelConfig,
) -> Result<Tensor> {
    if reference.is_empty() {
        return Err(CorpusError::Config("empty reference".into()));
    }
    let ((b0, b1), (s0, s1)) = (cfg.burst, cfg.silence);
    if cfg.dim == 0 || b0 == 0 || b0 > b1 || s0 > s1 || !(cfg.noise >= 0.0 && cfg.noise.is_finite())
    {
        return Err(CorpusError::Config("invalid channel configuration".into()));
    }
    let d = cfg.dim;
    let silence = prototype(0, d);
    let onset = prototype(1, d);
    let mut rng = Rng::seed(seed);
    let mut frames: Vec<f64> = Vec::new();
    let mut push = |base: &[f64], rng: &mut Rng| {
        frames.extend(base.iter().map(|&v| v + cfg.noise * rng.normal()));
    };
    for _ in 0..s0 + rng.below(s1 - s0 + 1) {
        push(&silence, &mut rng);
    }
    for c in reference.chars() {
        let class = lexicon
            .class_of(c)
            .ok_or_else(|| CorpusError::Vocab(format!("character {c} not in lexicon")))?;
        let proto = prototype(class as u64 + 2, d);
        let blend: Vec<f64> = proto
            .iter()
            .zip(&onset)
            .map(|(p, o)| 0.5 * (p + o))
            .collect();
        let len = b0 + rng.below(b1 - b0 + 1);
        push(&blend, &mut rng);
        for _ in 1..len {
            push(&proto, &mut rng);
        }
    }
    for _ in 0..s0 + rng.below(s1 - s0 + 1) {
        push(&silence, &mut rng);
    }
    let t = frames.len() / d;
    Ok(Tensor::matrix(t, d, frames)?)
}

/// Splices `left + 1 + right` neighbouring frames (edges repeat) and keeps
/// every `downsample`-th output, starting at frame 0.
pub fn stack_frames(
    features: &Tensor,
    left: usize,
    right: usize,
    downsample: usize,
) -> Result<Tensor> {
    let (t, d) = features.dims2();
    if t == 0 || downsample == 0 {
        return Err(CorpusError::Config(
            "need at least one frame and a positive downsampling rate".into(),
        ));
    }
    let width = (left + 1 + right) * d;
    let out_t = t.div_ceil(downsample);
    let mut out = Vec::with_capacity(out_t * width);
    for o in 0..out_t {
        let center = (o * downsample) as isize;
        for off in -(left as isize)..=right as isize {
            let src = (center + off).clamp(0, t as isize - 1) as usize;
            out.extend_from_slice(features.row(src));
        }
    }
    Ok(Tensor::matrix(out_t, width, out)?)
}
