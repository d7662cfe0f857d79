//! Transformer encoder-decoder spelling corrector.
//!
//! Pre-norm layers (`x + Sublayer(LayerNorm(x))`), separate source and target
//! embeddings scaled by `√d_model` plus sinusoidal positions, and a final
//! layer norm on both stacks. Batches are packed row-wise; attention keeps
//! every sequence to itself and decoder self-attention is causal.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use numerics::optim::{clip_grad_norm, Adam, Sgd};
use numerics::{Bound, NumericsError, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use thiserror::Error;

use crate::metrics::{corpus_cer, ErrorCounts};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Error)]
pub enum SpellerError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of {len} tokens (with framing) exceeds max length {max}")]
    TooLong { len: usize, max: usize },
    #[error("corpus needs at least two pairs so a validation split exists")]
    EmptyCorpus,
    #[error("step {step} is past the end of the schedule ({total} steps)")]
    Schedule { step: usize, total: usize },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SpellerError> = std::result::Result<T, E>;

/// Token inventory with the four framing symbols at ids 0..4.
#[derive(Clone, Debug, PartialEq)]
pub struct SpellerVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl SpellerVocab {
    /// Sorted union of every token in `seqs`, after the specials.
    pub fn from_corpus<'a, S, T>(seqs: S) -> Self
    where
        S: IntoIterator<Item = &'a [T]>,
        T: AsRef<str> + 'a,
    {
        let mut set = std::collections::BTreeSet::new();
        for s in seqs {
            for t in s {
                set.insert(t.as_ref().to_string());
            }
        }
        Self::from_tokens(set.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(tokens)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == SPECIALS.len()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<T: AsRef<str>>(&self, tokens: &[T]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Tokens for `ids`, dropping framing symbols other than `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i >= UNK)
            .filter_map(|&i| self.tokens.get(i).cloned())
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.tokens[SPECIALS.len()..]
            .iter()
            .map(|t| format!("{t}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if SPECIALS.contains(&t.as_str()) || !seen.insert(t) {
                return Err(SpellerError::Vocab(format!(
                    "duplicate or reserved token {t:?}"
                )));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl TransformerConfig {
    /// N=2, d_model=64, d_ff=256, h=4, d_k=d_v=16.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            d_k: 16,
            d_v: 16,
            dropout: 0.1,
            max_len: 64,
        }
    }

    /// Smaller published configuration: N=3, d_model=512, d_ff=2048, h=4,
    /// with the per-head split d_k = d_v = d_model / h.
    pub fn small() -> Self {
        Self {
            layers: 3,
            d_model: 512,
            d_ff: 2048,
            heads: 4,
            d_k: 128,
            d_v: 128,
            dropout: 0.1,
            max_len: 128,
        }
    }

    /// Larger published configuration: N=6, h=8, otherwise as the small one.
    pub fn big() -> Self {
        Self {
            layers: 6,
            heads: 8,
            d_k: 64,
            d_v: 64,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.d_model,
            self.d_ff,
            self.heads,
            self.d_k,
            self.d_v,
            self.max_len,
        ];
        if dims.contains(&0) {
            return Err(SpellerError::Config(
                "all dimensions must be positive".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(SpellerError::Config(format!(
                "d_model {} not divisible by h {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SpellerError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters for a vocabulary of `vocab` symbols.
    pub fn param_count(&self, vocab: usize) -> usize {
        let (d, h) = (self.d_model, self.heads);
        let attn = 2 * (d * h * self.d_k + h * self.d_k)
            + d * h * self.d_v
            + h * self.d_v
            + h * self.d_v * d
            + d;
        let ffn = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let ln = 2 * d;
        let enc = attn + ffn + 2 * ln;
        let dec = 2 * attn + ffn + 3 * ln;
        2 * vocab * d + self.layers * (enc + dec) + 2 * ln + d * vocab + vocab
    }

    fn to_tensor(self) -> Tensor {
        let v = [
            self.layers,
            self.d_model,
            self.d_ff,
            self.heads,
            self.d_k,
            self.d_v,
            self.max_len,
        ];
        let mut data: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        data.push(self.dropout);
        Tensor::vector(data).expect("finite")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 8 {
            return Err(SpellerError::Config("malformed model.config tensor".into()));
        }
        let u = |i: usize| d[i] as usize;
        let c = Self {
            layers: u(0),
            d_model: u(1),
            d_ff: u(2),
            heads: u(3),
            d_k: u(4),
            d_v: u(5),
            max_len: u(6),
            dropout: d[7],
        };
        c.validate()?;
        Ok(c)
    }
}

/// Cosine annealing restarted at every pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdrSchedule {
    pub passes: usize,
    pub steps_per_pass: usize,
    pub eta_max: f64,
    pub eta_min: f64,
}

impl SgdrSchedule {
    pub fn new(passes: usize, steps_per_pass: usize, eta_max: f64, eta_min: f64) -> Result<Self> {
        if passes == 0 || steps_per_pass == 0 {
            return Err(SpellerError::Config(
                "passes and steps per pass must be positive".into(),
            ));
        }
        if !(0.0 <= eta_min && eta_min <= eta_max && eta_max.is_finite()) {
            return Err(SpellerError::Config("need 0 <= eta_min <= eta_max".into()));
        }
        Ok(Self {
            passes,
            steps_per_pass,
            eta_max,
            eta_min,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.passes * self.steps_per_pass
    }

    /// Rate `t` steps into a pass, `0 ≤ t ≤ steps_per_pass`.
    pub fn lr_in_pass(&self, t: f64) -> f64 {
        let x = std::f64::consts::PI * t / self.steps_per_pass as f64;
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + x.cos())
    }

    /// Rate at a global step; the step one past the last update evaluates
    /// the end of the final pass.
    pub fn lr(&self, step: usize) -> Result<f64> {
        let total = self.total_steps();
        if step > total {
            return Err(SpellerError::Schedule { step, total });
        }
        if step == total {
            return Ok(self.eta_min);
        }
        Ok(self.lr_in_pass((step % self.steps_per_pass) as f64))
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ffn: Ffn,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct SpellerModel {
    config: TransformerConfig,
    vocab: SpellerVocab,
    params: ParamStore,
    src_embed: ParamId,
    tgt_embed: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    out: Linear,
    positions: Tensor,
}

/// Result of a greedy correction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Correction {
    pub tokens: Vec<usize>,
    /// Set when the length limit stopped decoding before `</s>`.
    pub truncated: bool,
}

/// Teacher-forced outputs for one pair.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Row `i` is the distribution for target position `i` (last row: `</s>`).
    pub probs: Tensor,
    /// Mean cross-entropy over target positions.
    pub loss: f64,
}

fn sinusoids(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::matrix(max_len, d, data).expect("finite")
}

/// Builds parameters in a fixed order so checkpoints and initialization are
/// reproducible.
struct Builder<'a> {
    params: ParamStore,
    rng: Option<&'a mut Rng>,
}

impl Builder<'_> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize, std: Option<f64>) -> ParamId {
        let t = match self.rng.as_deref_mut() {
            None => Tensor::zeros(&[rows, cols]),
            Some(rng) => {
                let data = match std {
                    Some(s) => (0..rows * cols).map(|_| rng.normal() * s).collect(),
                    None => {
                        let limit = (6.0 / (rows + cols) as f64).sqrt();
                        (0..rows * cols)
                            .map(|_| rng.uniform_range(-limit, limit))
                            .collect()
                    }
                };
                Tensor::matrix(rows, cols, data).expect("finite")
            }
        };
        self.params.add(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.matrix(format!("{name}.w"), fan_in, fan_out, None);
        let b = self
            .params
            .add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let g = self.params.add(format!("{name}.g"), Tensor::ones(&[d]));
        let b = self.params.add(format!("{name}.b"), Tensor::zeros(&[d]));
        Norm { g, b }
    }

    fn attn(&mut self, name: &str, c: &TransformerConfig) -> Attn {
        let (d, h) = (c.d_model, c.heads);
        Attn {
            q: self.linear(&format!("{name}.q"), d, h * c.d_k),
            k: self.linear(&format!("{name}.k"), d, h * c.d_k),
            v: self.linear(&format!("{name}.v"), d, h * c.d_v),
            o: self.linear(&format!("{name}.o"), h * c.d_v, d),
        }
    }

    fn ffn(&mut self, name: &str, c: &TransformerConfig) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.ff1"), c.d_model, c.d_ff),
            down: self.linear(&format!("{name}.ff2"), c.d_ff, c.d_model),
        }
    }
}

/// Per-forward state: the tape, bound parameters and the dropout stream.
struct Ctx<'a> {
    tape: &'a Tape,
    bound: &'a Bound,
    rng: Option<&'a mut Rng>,
    rate: f64,
}

impl Ctx<'_> {
    fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => Ok(self.tape.dropout(x, self.rate, rng)?),
            _ => Ok(x),
        }
    }

    fn linear(&self, x: Var, l: Linear) -> Result<Var> {
        Ok(self.tape.linear(x, self.p(l.w), self.p(l.b))?)
    }

    fn norm(&self, x: Var, n: Norm) -> Result<Var> {
        Ok(self.tape.layer_norm(x, self.p(n.g), self.p(n.b))?)
    }
}

impl SpellerModel {
    pub fn new(config: TransformerConfig, vocab: SpellerVocab, rng: &mut Rng) -> Result<Self> {
        Self::build(config, vocab, Some(rng))
    }

    fn build(
        config: TransformerConfig,
        vocab: SpellerVocab,
        rng: Option<&mut Rng>,
    ) -> Result<Self> {
        config.validate()?;
        let (d, v) = (config.d_model, vocab.len());
        let mut b = Builder {
            params: ParamStore::new(),
            rng,
        };
        let emb_std = Some(1.0 / (d as f64).sqrt());
        let src_embed = b.matrix("src_embed".into(), v, d, emb_std);
        let tgt_embed = b.matrix("tgt_embed".into(), v, d, emb_std);
        let enc = (0..config.layers)
            .map(|i| EncLayer {
                ln1: b.norm(&format!("enc.{i}.ln1"), d),
                attn: b.attn(&format!("enc.{i}.attn"), &config),
                ln2: b.norm(&format!("enc.{i}.ln2"), d),
                ffn: b.ffn(&format!("enc.{i}"), &config),
            })
            .collect();
        let enc_ln = b.norm("enc.ln", d);
        let dec = (0..config.layers)
            .map(|i| DecLayer {
                ln1: b.norm(&format!("dec.{i}.ln1"), d),
                self_attn: b.attn(&format!("dec.{i}.self"), &config),
                ln2: b.norm(&format!("dec.{i}.ln2"), d),
                cross: b.attn(&format!("dec.{i}.cross"), &config),
                ln3: b.norm(&format!("dec.{i}.ln3"), d),
                ffn: b.ffn(&format!("dec.{i}"), &config),
            })
            .collect();
        let dec_ln = b.norm("dec.ln", d);
        let out = b.linear("out", d, v);
        Ok(Self {
            positions: sinusoids(config.max_len, d),
            config,
            vocab,
            params: b.params,
            src_embed,
            tgt_embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn vocab(&self) -> &SpellerVocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Writes the checkpoint to `path` and the vocabulary next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = ParamStore::new();
        store.add("model.config", self.config.to_tensor());
        for (name, t) in self.params.iter() {
            store.add(name, t.clone());
        }
        store.save(path)?;
        std::fs::write(vocab_path(path), self.vocab.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = ParamStore::load(path)?;
        let vocab = SpellerVocab::from_text(&std::fs::read_to_string(vocab_path(path))?)?;
        let cfg = store
            .by_name("model.config")
            .ok_or_else(|| SpellerError::Config("checkpoint lacks model.config".into()))?;
        let mut model = Self::build(TransformerConfig::from_tensor(cfg)?, vocab, None)?;
        model.params.load_values_from(&store)?;
        Ok(model)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(SpellerError::TooLong {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    fn embed(&self, ctx: &mut Ctx<'_>, table: ParamId, seqs: &[&[usize]]) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let d = self.config.d_model;
        let mut pe = Vec::with_capacity(ids.len() * d);
        for s in seqs {
            for pos in 0..s.len() {
                pe.extend_from_slice(self.positions.row(pos));
            }
        }
        let t = ctx.tape;
        let e = t.scale(t.embedding(ctx.p(table), &ids)?, (d as f64).sqrt())?;
        let x = t.add(e, t.leaf(Tensor::matrix(ids.len(), d, pe)?))?;
        ctx.dropout(x)
    }

    /// Packed attention: query sequence `s` (`q_lens[s]` rows) sees only key
    /// sequence `s`, and only its own prefix when `causal`.
    fn attention(
        &self,
        ctx: &Ctx<'_>,
        a: &Attn,
        xq: Var,
        xkv: Var,
        q_lens: &[usize],
        k_lens: &[usize],
        causal: bool,
    ) -> Result<Var> {
        let (q, k, v) = (
            ctx.linear(xq, a.q)?,
            ctx.linear(xkv, a.k)?,
            ctx.linear(xkv, a.v)?,
        );
        let heads =
            ctx.tape
                .segment_attention(q, k, v, self.config.heads, q_lens, k_lens, causal)?;
        ctx.linear(heads, a.o)
    }

    fn ffn(&self, ctx: &Ctx<'_>, f: &Ffn, x: Var) -> Result<Var> {
        let hidden = ctx.tape.relu(ctx.linear(x, f.up)?)?;
        ctx.linear(hidden, f.down)
    }

    fn residual(&self, ctx: &mut Ctx<'_>, x: Var, sub: Var) -> Result<Var> {
        let sub = ctx.dropout(sub)?;
        Ok(ctx.tape.add(x, sub)?)
    }

    /// Encoder output rows for packed `srcs`, with the sequence lengths.
    fn encode(&self, ctx: &mut Ctx<'_>, srcs: &[&[usize]]) -> Result<(Var, Vec<usize>)> {
        let seg: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
        let mut x = self.embed(ctx, self.src_embed, srcs)?;
        for l in &self.enc {
            let n = ctx.norm(x, l.ln1)?;
            let a = self.attention(ctx, &l.attn, n, n, &seg, &seg, false)?;
            x = self.residual(ctx, x, a)?;
            let n = ctx.norm(x, l.ln2)?;
            let f = self.ffn(ctx, &l.ffn, n)?;
            x = self.residual(ctx, x, f)?;
        }
        Ok((ctx.norm(x, self.enc_ln)?, seg))
    }

    /// Output logits for packed decoder inputs `tgts`.
    fn decode(
        &self,
        ctx: &mut Ctx<'_>,
        memory: Var,
        mem_seg: &[usize],
        tgts: &[&[usize]],
    ) -> Result<Var> {
        let seg: Vec<usize> = tgts.iter().map(|s| s.len()).collect();
        let mut y = self.embed(ctx, self.tgt_embed, tgts)?;
        for l in &self.dec {
            let n = ctx.norm(y, l.ln1)?;
            let a = self.attention(ctx, &l.self_attn, n, n, &seg, &seg, true)?;
            y = self.residual(ctx, y, a)?;
            let n = ctx.norm(y, l.ln2)?;
            let c = self.attention(ctx, &l.cross, n, memory, &seg, mem_seg, false)?;
            y = self.residual(ctx, y, c)?;
            let n = ctx.norm(y, l.ln3)?;
            let f = self.ffn(ctx, &l.ffn, n)?;
            y = self.residual(ctx, y, f)?;
        }
        let y = ctx.norm(y, self.dec_ln)?;
        ctx.linear(y, self.out)
    }

    /// Mean teacher-forced cross-entropy of a packed batch, recorded on `tape`.
    fn batch_loss(
        &self,
        tape: &Tape,
        bound: &Bound,
        rng: Option<&mut Rng>,
        batch: &[Framed],
    ) -> Result<Var> {
        let mut ctx = Ctx {
            tape,
            bound,
            rng,
            rate: self.config.dropout,
        };
        let srcs: Vec<&[usize]> = batch.iter().map(|f| f.src.as_slice()).collect();
        let tgts: Vec<&[usize]> = batch.iter().map(|f| f.tgt_in.as_slice()).collect();
        let (memory, mem_seg) = self.encode(&mut ctx, &srcs)?;
        let logits = self.decode(&mut ctx, memory, &mem_seg, &tgts)?;
        let targets: Vec<Option<usize>> = batch
            .iter()
            .flat_map(|f| f.tgt_out.iter().map(|&t| Some(t)))
            .collect();
        Ok(tape.cross_entropy(logits, &targets)?)
    }

    fn frame(&self, src: &[usize], tgt: &[usize]) -> Result<Framed> {
        let f = Framed {
            src: src.iter().copied().chain([EOS]).collect(),
            tgt_in: [BOS].into_iter().chain(tgt.iter().copied()).collect(),
            tgt_out: tgt.iter().copied().chain([EOS]).collect(),
        };
        self.check_len(f.src.len())?;
        self.check_len(f.tgt_in.len())?;
        Ok(f)
    }

    /// Teacher-forced distributions and loss for one pair, without dropout.
    pub fn forward(&self, src: &[usize], tgt: &[usize]) -> Result<ForwardOutput> {
        let framed = self.frame(src, tgt)?;
        let tape = Tape::new();
        let bound = Bound::new(&tape, &self.params);
        let mut ctx = Ctx {
            tape: &tape,
            bound: &bound,
            rng: None,
            rate: 0.0,
        };
        let (memory, seg) = self.encode(&mut ctx, &[&framed.src])?;
        let logits = self.decode(&mut ctx, memory, &seg, &[&framed.tgt_in])?;
        let probs = tape.value(tape.softmax(logits)?).as_ref().clone();
        let targets: Vec<Option<usize>> = framed.tgt_out.iter().map(|&t| Some(t)).collect();
        let loss = tape.value(tape.cross_entropy(logits, &targets)?).item();
        Ok(ForwardOutput { probs, loss })
    }

    /// Mean loss of a packed batch and its gradient for every parameter, in
    /// store order, without dropout.
    pub fn loss_and_grads(&self, pairs: &[SpellerPair]) -> Result<(f64, Vec<Tensor>)> {
        let batch = pairs
            .iter()
            .map(|p| self.frame(&p.src, &p.tgt))
            .collect::<Result<Vec<_>>>()?;
        let tape = Tape::new();
        let bound = Bound::new(&tape, &self.params);
        let loss = self.batch_loss(&tape, &bound, None, &batch)?;
        let mut grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), bound.grads(&mut grads)?))
    }

    /// Greedy decoding from `<s>` until `</s>` or the length limit.
    pub fn correct(&self, hyp: &[usize]) -> Result<Correction> {
        let src: Vec<usize> = hyp.iter().copied().chain([EOS]).collect();
        self.check_len(src.len())?;
        let tape = Tape::new();
        let bound = Bound::new(&tape, &self.params);
        let mut ctx = Ctx {
            tape: &tape,
            bound: &bound,
            rng: None,
            rate: 0.0,
        };
        let (memory, seg) = self.encode(&mut ctx, &[&src])?;
        let memory = tape.value(memory).as_ref().clone();
        let mut prefix = vec![BOS];
        while prefix.len() <= self.config.max_len {
            if prefix.len() == self.config.max_len {
                return Ok(Correction {
                    tokens: prefix[1..].to_vec(),
                    truncated: true,
                });
            }
            // A fresh tape per step keeps memory flat.
            let tape = Tape::new();
            let bound = Bound::new(&tape, &self.params);
            let mut ctx = Ctx {
                tape: &tape,
                bound: &bound,
                rng: None,
                rate: 0.0,
            };
            let mem = tape.leaf(memory.clone());
            let logits = self.decode(&mut ctx, mem, &seg, &[&prefix])?;
            let logits = tape.value(logits);
            let last = logits.row(logits.rows() - 1);
            // Framing symbols other than </s> are never emitted.
            let mut best = EOS;
            for (i, &v) in last.iter().enumerate().skip(EOS) {
                if v > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                return Ok(Correction {
                    tokens: prefix[1..].to_vec(),
                    truncated: false,
                });
            }
            prefix.push(best);
        }
        unreachable!("loop returns once the prefix reaches max_len")
    }

    /// [`correct`](Self::correct) on token strings.
    pub fn correct_tokens<T: AsRef<str>>(&self, hyp: &[T]) -> Result<(Vec<String>, bool)> {
        let c = self.correct(&self.vocab.encode(hyp))?;
        Ok((self.vocab.decode(&c.tokens), c.truncated))
    }
}

fn vocab_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".vocab");
    ckpt.with_file_name(name)
}

#[derive(Clone, Debug)]
struct Framed {
    src: Vec<usize>,
    tgt_in: Vec<usize>,
    tgt_out: Vec<usize>,
}

/// One (hypothesis, reference) training pair as vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpellerPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpellerOptimizer {
    Sgd { momentum: f64 },
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpellerTrainOptions {
    pub schedule: SgdrSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: SpellerOptimizer,
    pub clip_norm: f64,
    pub valid_fraction: f64,
    /// Validation pairs decoded per pass (all when `None`).
    pub max_valid: Option<usize>,
}

impl SpellerTrainOptions {
    pub fn new(schedule: SgdrSchedule, seed: u64) -> Self {
        Self {
            schedule,
            batch_size: 16,
            seed,
            optimizer: SpellerOptimizer::Adam,
            clip_norm: 1.0,
            valid_fraction: 0.05,
            max_valid: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpellerReport {
    pub train_pairs: usize,
    pub valid_pairs: usize,
    /// Pairs dropped for exceeding the length limit.
    pub skipped: usize,
    /// CER of the uncorrected validation hypotheses.
    pub input_cer: f64,
    pub pass_loss: Vec<f64>,
    pub pass_cer: Vec<f64>,
    pub pass_errors: Vec<ErrorCounts>,
}

/// Seeded split into (train, validation) index lists.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::seed(seed ^ 0x5eed_5a17).shuffle(&mut idx);
    let nv = ((n as f64 * fraction).ceil() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    let mut valid = idx[..nv].to_vec();
    let mut train = idx[nv..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    (train, valid)
}

fn validation_cer(model: &SpellerModel, valid: &[&SpellerPair]) -> Result<ErrorCounts> {
    let mut outs = Vec::with_capacity(valid.len());
    for p in valid {
        outs.push(model.correct(&p.src)?.tokens);
    }
    Ok(corpus_cer(
        outs.iter()
            .zip(valid)
            .map(|(o, p)| (o.as_slice(), p.tgt.as_slice())),
    ))
}

/// Trains for `passes × steps_per_pass` updates with the SGDR rate, reporting
/// validation CER and writing `pass{k}.ckpt` into `checkpoint_dir` after
/// each pass.
pub fn train_speller(
    model: &mut SpellerModel,
    pairs: &[SpellerPair],
    opts: &SpellerTrainOptions,
    checkpoint_dir: Option<&Path>,
) -> Result<SpellerReport> {
    if pairs.len() < 2 {
        return Err(SpellerError::EmptyCorpus);
    }
    let (train_idx, valid_idx) = split_indices(pairs.len(), opts.valid_fraction, opts.seed);
    let mut skipped = 0;
    let mut train: Vec<Framed> = Vec::with_capacity(train_idx.len());
    for &i in &train_idx {
        match model.frame(&pairs[i].src, &pairs[i].tgt) {
            Ok(f) => train.push(f),
            Err(SpellerError::TooLong { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if train.is_empty() {
        return Err(SpellerError::EmptyCorpus);
    }
    let max = model.config.max_len;
    let valid: Vec<&SpellerPair> = valid_idx
        .iter()
        .map(|&i| &pairs[i])
        .filter(|p| p.src.len() < max && p.tgt.len() < max)
        .take(opts.max_valid.unwrap_or(usize::MAX))
        .collect();
    let input_cer = corpus_cer(valid.iter().map(|p| (p.src.as_slice(), p.tgt.as_slice()))).cer();

    let mut rng = Rng::seed(opts.seed);
    let mut dropout_rng = rng.fork();
    let mut order: Vec<usize> = (0..train.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0;
    let mut sgd = match opts.optimizer {
        SpellerOptimizer::Sgd { momentum } => Some(Sgd::new(momentum)),
        SpellerOptimizer::Adam => None,
    };
    let mut adam = Adam::default();
    let sched = opts.schedule;
    let mut report = SpellerReport {
        train_pairs: train.len(),
        valid_pairs: valid.len(),
        skipped,
        input_cer,
        pass_loss: Vec::new(),
        pass_cer: Vec::new(),
        pass_errors: Vec::new(),
    };
    let bs = opts.batch_size.max(1);
    for pass in 0..sched.passes {
        let mut loss_sum = 0.0;
        for t in 0..sched.steps_per_pass {
            let mut batch = Vec::with_capacity(bs);
            for _ in 0..bs.min(train.len()) {
                if cursor == order.len() {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                batch.push(train[order[cursor]].clone());
                cursor += 1;
            }
            let tape = Tape::new();
            let bound = Bound::new(&tape, &model.params);
            let loss = model.batch_loss(&tape, &bound, Some(&mut dropout_rng), &batch)?;
            loss_sum += tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            let mut grads = bound.grads(&mut grads)?;
            clip_grad_norm(&mut grads, opts.clip_norm);
            let lr = sched.lr(pass * sched.steps_per_pass + t)?;
            match sgd.as_mut() {
                Some(s) => s.step(&mut model.params, &grads, lr),
                None => adam.step(&mut model.params, &grads, lr),
            }
        }
        let errs = validation_cer(model, &valid)?;
        report
            .pass_loss
            .push(loss_sum / sched.steps_per_pass as f64);
        report.pass_cer.push(errs.cer());
        report.pass_errors.push(errs);
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            model.save(&dir.join(format!("pass{}.ckpt", pass + 1)))?;
        }
    }
    Ok(report)
}
