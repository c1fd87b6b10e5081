//! SGD with momentum, Adam, cosine annealing and gradient-norm clipping.
//!
//! Optimizer state is a list of buffers matched to parameters by position, so
//! callers must pass parameters in the same order on every step. Parameters
//! without a gradient are skipped but keep their slot.

use std::f64::consts::PI;

use pdarts_tensor::Tensor;

/// Learning rate at `epoch` of `epochs`: cosine from `base` down to `floor`,
/// reaching `floor` exactly at the last epoch.
pub fn cosine_lr(base: f64, floor: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (PI * t).cos())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled = g.iter().map(|v| v * s).collect();
                p.set_grad(Some(scaled));
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) {
        if self.buffers.len() < params.len() {
            self.buffers.resize(params.len(), None);
        }
        for (p, buf) in params.iter_mut().zip(&mut self.buffers) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let data = p.data_mut();
            let d: Vec<f64> = g.iter().zip(data.iter()).map(|(g, w)| g + self.weight_decay * w).collect();
            let b = match buf {
                Some(b) => {
                    for (b, d) in b.iter_mut().zip(&d) {
                        *b = self.momentum * *b + d;
                    }
                    b
                }
                None => buf.insert(d),
            };
            for (w, b) in data.iter_mut().zip(b.iter()) {
                *w -= lr * b;
            }
        }
    }
}

/// First moment, second moment and step count of one parameter tensor.
type Moments = (Vec<f64>, Vec<f64>, u64);

#[derive(Debug, Clone)]
pub struct Adam {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        Adam {
            betas,
            eps: 1e-8,
            weight_decay,
            moments: Vec::new(),
        }
    }

    /// One step; weight decay is added to the gradient (L2 style).
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) {
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let (b1, b2) = self.betas;
        for (p, state) in params.iter_mut().zip(&mut self.moments) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v, t) = state.get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()], 0));
            *t += 1;
            let c1 = 1.0 - b1.powi(*t as i32);
            let c2 = 1.0 - b2.powi(*t as i32);
            let data = p.data_mut();
            for i in 0..g.len() {
                let d = g[i] + self.weight_decay * data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * d;
                v[i] = b2 * v[i] + (1.0 - b2) * d * d;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
