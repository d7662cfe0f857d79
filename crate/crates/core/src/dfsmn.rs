//! DFSMN acoustic model with a CTC output head.
//!
//! Each component is a ReLU hidden layer, a linear projection `pₜ` and a
//! memory block
//!
//! ```text
//! mₜ = mₜ⁻¹ + pₜ + Σ_{i=0..N₁} aᵢ ⊙ p_{t−s₁·i} + Σ_{j=1..N₂} cⱼ ⊙ p_{t+s₂·j}
//! ```
//!
//! where the skip term `mₜ⁻¹` (previous component's memory) is dropped for
//! the first component and taps outside the utterance contribute zero. Two
//! fully-connected ReLU layers and a linear layer produce the logits over
//! Ω ∪ {blank}.

use std::path::Path;

use numerics::optim::{clip_grad_norm, Sgd};
use numerics::{Bound, NumericsError, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use thiserror::Error;

use crate::ctc::{self, forward_backward, min_frames, CtcError, PosteriorMatrix};

#[derive(Debug, Error)]
pub enum AmError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("features have {got} columns, model expects {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("no trainable utterances: every reference exceeds its frame count")]
    NothingTrainable,
}

pub type Result<T, E = AmError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DfsmnLayerConfig {
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub look_back: usize,
    pub look_ahead: usize,
    pub stride_back: usize,
    pub stride_ahead: usize,
}

impl Default for DfsmnLayerConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            proj_dim: 64,
            look_back: 2,
            look_ahead: 2,
            stride_back: 1,
            stride_ahead: 1,
        }
    }
}

impl DfsmnLayerConfig {
    /// `N₁ + 1` look-back taps followed by `N₂` lookahead taps.
    pub fn num_taps(&self) -> usize {
        self.look_back + 1 + self.look_ahead
    }

    /// Frame offset of each tap row.
    pub fn offsets(&self) -> Vec<isize> {
        let back = (0..=self.look_back).map(|i| -((self.stride_back * i) as isize));
        let ahead = (1..=self.look_ahead).map(|j| (self.stride_ahead * j) as isize);
        back.chain(ahead).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.proj_dim == 0 {
            return Err(AmError::Config("layer widths must be positive".into()));
        }
        if self.stride_back == 0 || self.stride_ahead == 0 {
            return Err(AmError::Config("strides must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DfsmnConfig {
    pub input_dim: usize,
    pub layers: Vec<DfsmnLayerConfig>,
    pub relu_dims: [usize; 2],
    /// |Ω| + 1
    pub output_dim: usize,
}

impl DfsmnConfig {
    /// Four components of hidden 128 / projection 64 with `N₁ = N₂ = 2`.
    pub fn desk(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            layers: vec![DfsmnLayerConfig::default(); 4],
            relu_dims: [128, 128],
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim < 2 || self.relu_dims.contains(&0) {
            return Err(AmError::Config(
                "dimensions must be positive, output >= 2".into(),
            ));
        }
        if self.layers.is_empty() {
            return Err(AmError::Config(
                "at least one DFSMN component required".into(),
            ));
        }
        for l in &self.layers {
            l.validate()?;
        }
        // Skip connections add memories elementwise.
        if self
            .layers
            .windows(2)
            .any(|w| w[0].proj_dim != w[1].proj_dim)
        {
            return Err(AmError::Config(
                "all components need the same projection width".into(),
            ));
        }
        Ok(())
    }

    fn to_tensor(&self) -> Tensor {
        let mut v = vec![
            self.input_dim,
            self.output_dim,
            self.relu_dims[0],
            self.relu_dims[1],
            self.layers.len(),
        ];
        for l in &self.layers {
            v.extend([
                l.hidden_dim,
                l.proj_dim,
                l.look_back,
                l.look_ahead,
                l.stride_back,
                l.stride_ahead,
            ]);
        }
        Tensor::vector(v.into_iter().map(|x| x as f64).collect()).expect("finite")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let v: Vec<usize> = t.data().iter().map(|&x| x as usize).collect();
        let bad = || AmError::Config("malformed model.config tensor".into());
        if v.len() < 5 || v.len() != 5 + 6 * v[4] {
            return Err(bad());
        }
        let layers = v[5..]
            .chunks(6)
            .map(|c| DfsmnLayerConfig {
                hidden_dim: c[0],
                proj_dim: c[1],
                look_back: c[2],
                look_ahead: c[3],
                stride_back: c[4],
                stride_ahead: c[5],
            })
            .collect();
        Ok(Self {
            input_dim: v[0],
            output_dim: v[1],
            relu_dims: [v[2], v[3]],
            layers,
        })
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    w_hidden: ParamId,
    b_hidden: ParamId,
    w_proj: ParamId,
    taps: ParamId,
}

/// DFSMN acoustic model. Parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DfsmnModel {
    config: DfsmnConfig,
    params: ParamStore,
    layers: Vec<LayerParams>,
    fc: [(ParamId, ParamId); 2],
    out: (ParamId, ParamId),
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-limit, limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("finite")
}

impl DfsmnModel {
    /// Glorot-initialized weights, zero biases, small memory taps.
    pub fn new(config: DfsmnConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(config, |shape, kind| match kind {
            Init::Weight => glorot(rng, shape[0], shape[1]),
            Init::Taps => {
                let n = shape[0] * shape[1];
                Tensor::new(shape.to_vec(), (0..n).map(|_| 0.1 * rng.normal()).collect())
                    .expect("finite")
            }
            Init::Bias => Tensor::zeros(shape),
        })
    }

    /// All parameters zero.
    pub fn zeros(config: DfsmnConfig) -> Result<Self> {
        Self::build(config, |shape, _| Tensor::zeros(shape))
    }

    fn build(config: DfsmnConfig, mut init: impl FnMut(&[usize], Init) -> Tensor) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut in_dim = config.input_dim;
        for (i, l) in config.layers.iter().enumerate() {
            let w_hidden = params.add(
                format!("dfsmn.{i}.hidden.w"),
                init(&[in_dim, l.hidden_dim], Init::Weight),
            );
            let b_hidden = params.add(
                format!("dfsmn.{i}.hidden.b"),
                init(&[l.hidden_dim], Init::Bias),
            );
            let w_proj = params.add(
                format!("dfsmn.{i}.proj.w"),
                init(&[l.hidden_dim, l.proj_dim], Init::Weight),
            );
            let taps = params.add(
                format!("dfsmn.{i}.memory.taps"),
                init(&[l.num_taps(), l.proj_dim], Init::Taps),
            );
            layers.push(LayerParams {
                w_hidden,
                b_hidden,
                w_proj,
                taps,
            });
            in_dim = l.proj_dim;
        }
        let mut fc = Vec::with_capacity(2);
        for (i, &d) in config.relu_dims.iter().enumerate() {
            let w = params.add(format!("fc.{i}.w"), init(&[in_dim, d], Init::Weight));
            let b = params.add(format!("fc.{i}.b"), init(&[d], Init::Bias));
            fc.push((w, b));
            in_dim = d;
        }
        let out = (
            params.add("out.w", init(&[in_dim, config.output_dim], Init::Weight)),
            params.add("out.b", init(&[config.output_dim], Init::Bias)),
        );
        Ok(Self {
            config,
            params,
            layers,
            fc: [fc[0], fc[1]],
            out,
        })
    }

    pub fn config(&self) -> &DfsmnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Memory taps `[a₀..a_{N₁}, c₁..c_{N₂}]` of component `layer`.
    pub fn taps(&self, layer: usize) -> &Tensor {
        self.params.get(self.layers[layer].taps)
    }

    /// Logits `T × (|Ω|+1)` recorded on `tape`.
    pub fn logits(&self, tape: &Tape, bound: &Bound, features: Var) -> Result<Var> {
        let cols = tape.value(features).cols();
        if cols != self.config.input_dim {
            return Err(AmError::FeatureDim {
                got: cols,
                expected: self.config.input_dim,
            });
        }
        let mut x = features;
        let mut prev_mem: Option<Var> = None;
        for (cfg, lp) in self.config.layers.iter().zip(&self.layers) {
            let h = tape.relu(tape.linear(x, bound.var(lp.w_hidden), bound.var(lp.b_hidden))?)?;
            let p = tape.matmul(h, bound.var(lp.w_proj))?;
            let m = memory_block(tape, p, prev_mem, bound.var(lp.taps), cfg)?;
            prev_mem = Some(m);
            x = m;
        }
        for &(w, b) in &self.fc {
            x = tape.relu(tape.linear(x, bound.var(w), bound.var(b))?)?;
        }
        Ok(tape.linear(x, bound.var(self.out.0), bound.var(self.out.1))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_store().save(path)?)
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("model.config", self.config.to_tensor());
        for (name, t) in self.params.iter() {
            store.add(name, t.clone());
        }
        store
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&ParamStore::load(path)?)
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let cfg = store
            .by_name("model.config")
            .ok_or_else(|| AmError::Config("checkpoint lacks model.config".into()))?;
        let mut model = Self::zeros(DfsmnConfig::from_tensor(cfg)?)?;
        model.params.load_values_from(store)?;
        Ok(model)
    }
}

enum Init {
    Weight,
    Bias,
    Taps,
}

/// `m = prev + p + FIR(p)` on the tape.
pub fn memory_block(
    tape: &Tape,
    p: Var,
    prev_mem: Option<Var>,
    taps: Var,
    cfg: &DfsmnLayerConfig,
) -> Result<Var> {
    let filtered = tape.fir(p, taps, &cfg.offsets())?;
    let mut m = tape.add(p, filtered)?;
    if let Some(prev) = prev_mem {
        m = tape.add(prev, m)?;
    }
    Ok(m)
}

/// One memory block evaluated on plain tensors.
///
/// `taps` has `N₁ + 1 + N₂` rows: `a₀..a_{N₁}` then `c₁..c_{N₂}`.
pub fn dfsmn_layer_forward(
    p: &Tensor,
    prev_mem: Option<&Tensor>,
    cfg: &DfsmnLayerConfig,
    taps: &Tensor,
) -> Result<Tensor> {
    if let Some(prev) = prev_mem {
        if prev.shape() != p.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "dfsmn_layer_forward",
                left: p.shape().to_vec(),
                right: prev.shape().to_vec(),
            }
            .into());
        }
    }
    let tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let prev = prev_mem.map(|t| tape.leaf(t.clone()));
    let tv = tape.leaf(taps.clone());
    let m = memory_block(&tape, pv, prev, tv, cfg)?;
    Ok((*tape.value(m)).clone())
}

/// Frame posteriors for one utterance.
pub fn am_forward(model: &DfsmnModel, features: &Tensor) -> Result<PosteriorMatrix> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, &model.params);
    let x = tape.leaf(features.clone());
    let logits = model.logits(&tape, &bound, x)?;
    let probs = tape.softmax(logits)?;
    let v = tape.value(probs);
    Ok(PosteriorMatrix::new(v.rows(), v.cols(), v.data().to_vec())?)
}

/// CTC loss of one utterance recorded on the tape (gradient flows into the logits).
pub fn ctc_loss_on_tape(tape: &Tape, logits: Var, target: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let v = tape.value(lp);
    let a = forward_backward(v.data(), v.rows(), v.cols(), target)?;
    let grad = Tensor::new(v.shape().to_vec(), a.occupancy.iter().map(|g| -g).collect())?;
    Ok(tape.custom_scalar(lp, a.nll, grad)?)
}

/// A training utterance: stacked features and reference token ids.
#[derive(Clone, Debug)]
pub struct AmExample {
    pub id: String,
    pub features: Tensor,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct AmTrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for AmTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            lr_decay: 1.0,
            batch_size: 8,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AmTrainReport {
    /// Mean per-utterance CTC loss of the untrained model.
    pub initial_loss: f64,
    /// Running mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss after the last epoch.
    pub final_loss: f64,
    /// Utterances whose reference needs more frames than they have.
    pub skipped: Vec<String>,
}

fn feasible(e: &AmExample) -> bool {
    min_frames(&e.target) <= e.features.rows()
}

/// Mean CTC loss of `model` over the feasible utterances.
pub fn mean_loss(model: &DfsmnModel, corpus: &[&AmExample]) -> Result<f64> {
    let mut total = 0.0;
    for e in corpus {
        let post = am_forward(model, &e.features)?;
        total += ctc::ctc_loss(&post, &e.target)?;
    }
    Ok(total / corpus.len() as f64)
}

/// Mini-batch SGD on the CTC loss with global-norm gradient clipping.
pub fn train_am(
    model: &mut DfsmnModel,
    corpus: &[AmExample],
    opts: &AmTrainOptions,
    checkpoint: Option<&Path>,
) -> Result<AmTrainReport> {
    if corpus.is_empty() {
        return Err(AmError::EmptyCorpus);
    }
    let (usable, skipped): (Vec<&AmExample>, Vec<&AmExample>) =
        corpus.iter().partition(|e| feasible(e));
    if usable.is_empty() {
        return Err(AmError::NothingTrainable);
    }
    let mut rng = Rng::seed(opts.seed);
    let initial_loss = mean_loss(model, &usable)?;
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut sgd = Sgd::new(0.0);
    let mut lr = opts.learning_rate;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        rng.shuffle(&mut order);
        let mut epoch_total = 0.0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            let tape = Tape::new();
            let bound = Bound::new(&tape, &model.params);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let e = usable[i];
                let x = tape.leaf(e.features.clone());
                let logits = model.logits(&tape, &bound, x)?;
                losses.push(ctc_loss_on_tape(&tape, logits, &e.target)?);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l)?;
            }
            epoch_total += tape.value(total).item();
            let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
            let mut grads = tape.backward(loss)?;
            let mut grads = bound.grads(&mut grads)?;
            clip_grad_norm(&mut grads, opts.clip_norm);
            sgd.step(&mut model.params, &grads, lr);
        }
        epoch_losses.push(epoch_total / usable.len() as f64);
        lr *= opts.lr_decay;
    }
    let final_loss = mean_loss(model, &usable)?;
    if let Some(path) = checkpoint {
        model.save(path)?;
    }
    Ok(AmTrainReport {
        initial_loss,
        epoch_losses,
        final_loss,
        skipped: skipped.iter().map(|e| e.id.clone()).collect(),
    })
}
