//! CTC mathematics and greedy-side decoding.
//!
//! Labels are column indices of a [`PosteriorMatrix`]: `0..|Ω|` are tokens and
//! the last column is the blank.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use numerics::log_add;
use thiserror::Error;

pub const BLANK_MARKER: &str = "<b>";
pub const POSTERIOR_MAGIC: &[u8; 5] = b"PSTM1";
pub const DEFAULT_MAX_PATHS: usize = 16;

const ROW_SUM_TOL: f64 = 1e-9;
const ENUM_MAX_FRAMES: usize = 8;
const ENUM_MAX_TOKENS: usize = 4;
/// Upper bound on retained-token paths examined by [`threshold_expand`].
const EXPAND_MAX_POPS: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("posterior matrix: {0}")]
    Posterior(String),
    #[error("target of length {len} needs {needed} frames, only {frames} available")]
    Infeasible {
        len: usize,
        needed: usize,
        frames: usize,
    },
    #[error("token id {0} outside the vocabulary")]
    BadToken(usize),
    #[error("enumeration limited to T <= {ENUM_MAX_FRAMES} and |vocab| <= {ENUM_MAX_TOKENS}, got T={frames}, |vocab|={tokens}")]
    TooLarge { frames: usize, tokens: usize },
    #[error("thresholds must satisfy 0 < lower <= upper <= 1, got upper={upper} lower={lower}")]
    Thresholds { upper: f64, lower: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CtcError> = std::result::Result<T, E>;

/// Token inventory Ω. The blank is implicit and always takes the index
/// just past the last token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t == BLANK_MARKER || t.is_empty() || t.contains(char::is_whitespace) {
                return Err(CtcError::Vocab(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(CtcError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// |Ω|
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank_id(&self) -> usize {
        self.tokens.len()
    }

    /// |Ω| + 1
    pub fn width(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[&str]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| CtcError::Vocab(format!("unknown token {t:?}")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&i| self.token(i).ok_or(CtcError::BadToken(i)))
            .collect()
    }

    /// One token per line in label order, blank last as `<b>`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s.push_str(BLANK_MARKER);
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        match lines.iter().position(|l| *l == BLANK_MARKER) {
            Some(p) if p + 1 == lines.len() => Self::new(lines[..p].iter().copied()),
            Some(_) => Err(CtcError::Vocab("blank marker must be the last line".into())),
            None => Err(CtcError::Vocab("missing blank marker line".into())),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Per-frame distributions over Ω ∪ {blank}, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    frames: usize,
    width: usize,
    data: Vec<f64>,
}

impl PosteriorMatrix {
    pub fn new(frames: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || width < 2 {
            return Err(CtcError::Posterior(format!(
                "need at least one frame and two columns, got {frames}x{width}"
            )));
        }
        if data.len() != frames * width {
            return Err(CtcError::Posterior(format!(
                "{frames}x{width} needs {} values, got {}",
                frames * width,
                data.len()
            )));
        }
        for (t, row) in data.chunks(width).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(CtcError::Posterior(format!(
                    "frame {t} has an entry outside [0, 1]"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(CtcError::Posterior(format!("frame {t} sums to {s}")));
            }
        }
        Ok(Self {
            frames,
            width,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(CtcError::Posterior("ragged rows".into()));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// |Ω| + 1
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn blank(&self) -> usize {
        self.width - 1
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.width..(t + 1) * self.width]
    }

    pub fn get(&self, t: usize, label: usize) -> f64 {
        self.data[t * self.width + label]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.data.iter().map(|p| p.ln()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 8 * self.data.len());
        out.extend_from_slice(POSTERIOR_MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..5] != POSTERIOR_MAGIC {
            return Err(CtcError::Posterior("bad magic or header".into()));
        }
        let frames = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let body = &bytes[13..];
        if body.len() != frames * width * 8 {
            return Err(CtcError::Posterior(format!(
                "expected {} data bytes, got {}",
                frames * width * 8,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(frames, width, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Product of the chosen entries along `path`.
    pub fn path_probability(&self, path: &[usize]) -> f64 {
        path.iter()
            .enumerate()
            .map(|(t, &k)| self.get(t, k))
            .product()
    }
}

/// The mapping F: merge consecutive repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Minimum number of frames a path collapsing to `target` needs.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(target: &[usize], width: usize, frames: usize) -> Result<()> {
    if let Some(&bad) = target.iter().find(|&&k| k + 1 >= width) {
        return Err(CtcError::BadToken(bad));
    }
    let needed = min_frames(target);
    if needed > frames {
        return Err(CtcError::Infeasible {
            len: target.len(),
            needed,
            frames,
        });
    }
    Ok(())
}

/// Negative log-likelihood and per-frame label occupancies γₜ(k).
#[derive(Clone, Debug)]
pub struct CtcAlignment {
    pub nll: f64,
    /// `frames × width`; `γₜ(k)` is the posterior probability that frame `t`
    /// emits label `k` given the target. Equals `-∂nll/∂ln pₜ(k)`.
    pub occupancy: Vec<f64>,
}

/// Log-space α/β recursions over `log_probs` (`frames × width`, blank last).
pub fn forward_backward(
    log_probs: &[f64],
    frames: usize,
    width: usize,
    target: &[usize],
) -> Result<CtcAlignment> {
    check_target(target, width, frames)?;
    let blank = width - 1;
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&k| [k, blank]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs[t * width + k];
    // Skipping over a blank is allowed unless it separates equal labels.
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut b = ninf;
            for next in [s, s + 1, s + 2] {
                if next >= s_len || (next == s + 2 && !can_skip(next)) {
                    continue;
                }
                let nb = beta[(t + 1) * s_len + next];
                if nb != ninf {
                    b = log_add(b, nb + lp(t + 1, ext[next]));
                }
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut log_z = alpha[last + s_len - 1];
    if s_len > 1 {
        log_z = log_add(log_z, alpha[last + s_len - 2]);
    }
    let mut occupancy = vec![0.0; frames * width];
    if log_z > ninf {
        for t in 0..frames {
            for s in 0..s_len {
                let v = alpha[t * s_len + s] + beta[t * s_len + s];
                if v > ninf {
                    occupancy[t * width + ext[s]] += (v - log_z).exp();
                }
            }
        }
    }
    Ok(CtcAlignment {
        nll: -log_z,
        occupancy,
    })
}

/// `−ln Σ_{π ∈ Φ(y)} Πₜ pₜ(πₜ)`; `+∞` when every path has probability zero.
pub fn ctc_loss(post: &PosteriorMatrix, target: &[usize]) -> Result<f64> {
    Ok(forward_backward(&post.log_probs(), post.frames, post.width, target)?.nll)
}

/// Loss and its gradient with respect to the posterior entries.
pub fn ctc_loss_with_grad(post: &PosteriorMatrix, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let a = forward_backward(&post.log_probs(), post.frames, post.width, target)?;
    let grad = a
        .occupancy
        .iter()
        .zip(&post.data)
        .map(|(&g, &p)| if g == 0.0 { 0.0 } else { -g / p })
        .collect();
    Ok((a.nll, grad))
}

/// Brute-force `Σ_{π : F(π) = target} Πₜ pₜ(πₜ)` over all `width^T` paths.
pub fn enumerate_paths(post: &PosteriorMatrix, target: &[usize]) -> Result<f64> {
    if post.frames > ENUM_MAX_FRAMES || post.width - 1 > ENUM_MAX_TOKENS {
        return Err(CtcError::TooLarge {
            frames: post.frames,
            tokens: post.width - 1,
        });
    }
    let mut total = 0.0;
    let mut path = vec![0usize; post.frames];
    loop {
        if collapse(&path, post.blank()) == target {
            total += post.path_probability(&path);
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == path.len() {
                return Ok(total);
            }
            path[i] += 1;
            if path[i] < post.width {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Frame-wise argmax path (ties → lowest label index) and its collapse.
pub fn greedy_search(post: &PosteriorMatrix) -> (Vec<usize>, Vec<usize>) {
    let path: Vec<usize> = (0..post.frames).map(|t| argmax(post.row(t))).collect();
    let tokens = collapse(&path, post.blank());
    (path, tokens)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = k;
        }
    }
    best
}

/// Thresholds `(upper_th, lower_th)` for retaining a frame's second-best label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdConfig {
    upper: f64,
    lower: f64,
}

impl ThresholdConfig {
    pub fn new(upper: f64, lower: f64) -> Result<Self> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if !ok(upper) || !ok(lower) || lower > upper {
            return Err(CtcError::Thresholds { upper, lower });
        }
        Ok(Self { upper, lower })
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    /// Whether a frame with top-two probabilities `p1 ≥ p2` keeps both.
    pub fn retains_second(&self, p1: f64, p2: f64) -> bool {
        self.lower < p1 && p1 < self.upper && p2 > self.lower
    }
}

/// A collapsed hypothesis with the log-probability of its best path.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

#[derive(PartialEq)]
struct Subset {
    cost: f64,
    picks: Vec<usize>,
}

impl Eq for Subset {}

impl Ord for Subset {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then lexicographic picks
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.picks.cmp(&self.picks))
    }
}

impl PartialOrd for Subset {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Threshold-based path retention.
///
/// Every frame keeps its top label; the second label is also kept when
/// `lower < p₁ < upper` and `p₂ > lower` (the blank is eligible). Paths
/// through the retained labels are visited in order of decreasing
/// probability and collapsed; the first `max_paths` distinct token sequences
/// are returned, best first. The greedy hypothesis always comes first.
pub fn threshold_expand(
    post: &PosteriorMatrix,
    cfg: &ThresholdConfig,
    max_paths: usize,
) -> Vec<Hypothesis> {
    let max_paths = max_paths.max(1);
    let (greedy, _) = greedy_search(post);
    let base_lp: f64 = greedy
        .iter()
        .enumerate()
        .map(|(t, &k)| post.get(t, k).ln())
        .sum();

    // (penalty, frame, alternative label) for frames that keep two labels
    let mut alts: Vec<(f64, usize, usize)> = Vec::new();
    for t in 0..post.frames {
        let row = post.row(t);
        let top = greedy[t];
        let second = (0..row.len())
            .filter(|&k| k != top)
            .fold(None, |best: Option<usize>, k| match best {
                Some(b) if row[b] >= row[k] => Some(b),
                _ => Some(k),
            });
        if let Some(second) = second {
            if cfg.retains_second(row[top], row[second]) {
                alts.push((row[top].ln() - row[second].ln(), t, second));
            }
        }
    }
    alts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut out: Vec<Hypothesis> = Vec::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut heap = BinaryHeap::new();
    heap.push(Subset {
        cost: 0.0,
        picks: Vec::new(),
    });
    let mut pops = 0;
    let mut path = greedy.clone();
    while let Some(Subset { cost, picks }) = heap.pop() {
        pops += 1;
        path.copy_from_slice(&greedy);
        for &i in &picks {
            path[alts[i].1] = alts[i].2;
        }
        let tokens = collapse(&path, post.blank());
        if seen.insert(tokens.clone()) {
            out.push(Hypothesis {
                tokens,
                log_prob: base_lp - cost,
            });
            if out.len() == max_paths {
                break;
            }
        }
        if pops >= EXPAND_MAX_POPS {
            break;
        }
        // Successors enumerate every subset of `alts` exactly once, in
        // nondecreasing total penalty.
        let next = picks.last().map_or(0, |&i| i + 1);
        if next < alts.len() {
            let mut grow = picks.clone();
            grow.push(next);
            heap.push(Subset {
                cost: cost + alts[next].0,
                picks: grow,
            });
            if let Some(&last) = picks.last() {
                let mut shift = picks;
                *shift.last_mut().unwrap() = next;
                heap.push(Subset {
                    cost: cost - alts[last].0 + alts[next].0,
                    picks: shift,
                });
            }
        }
    }
    out
}
