use crate::checkpoint::ParamStore;
use crate::tensor::Tensor;

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// SGD with optional classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        if self.momentum == 0.0 {
            for (p, g) in params.values_mut().iter_mut().zip(grads) {
                p.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(w, d)| *w -= lr * d);
            }
            return;
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
        }
        for ((p, g), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
        {
            for ((w, d), m) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *m = self.momentum * *m + d;
                *w -= lr * *m;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        if self.m.is_empty() {
            self.m = params
                .values()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &d), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}
