//! Minimal dense-tensor and reverse-mode autodiff core.
//!
//! Everything is `f64`. Values are immutable once recorded on a [`Tape`];
//! parameters live in a [`ParamStore`] and are copied onto a fresh tape for
//! every forward pass.

mod checkpoint;
mod error;
pub mod gradcheck;
pub mod optim;
mod rng;
mod tape;
mod tensor;

pub use checkpoint::{ParamId, ParamStore, MAGIC as CHECKPOINT_MAGIC};
pub use error::{NumericsError, Result};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{
    dot, gemm, gemm_nt, gemm_tn, log_add, log_sum_exp, softmax, softmax_rows, Tensor,
};

/// Parameters of a [`ParamStore`] bound to leaves of one [`Tape`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new(tape: &Tape, params: &ParamStore) -> Self {
        Self {
            vars: params
                .values()
                .iter()
                .map(|t| tape.leaf(t.clone()))
                .collect(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in parameter order.
    pub fn grads(&self, grads: &mut Gradients) -> Result<Vec<Tensor>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
