use crate::error::{Error, Result};
use crate::trainer::backprop::Gradients;
use crate::trainer::model::{CodebookMode, ModelParams};

/// Step decay: `initial · decay^⌊epoch / period⌋` (epochs counted from 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            decay: 0.5,
            period: 35,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = epoch / self.period.max(1);
        self.initial * self.decay.powi(steps as i32)
    }
}

/// Momentum SGD state: one velocity buffer per learnable tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub velocities: Vec<Vec<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    /// When false the encoder is left untouched (e.g. an identity encoder).
    pub update_encoder: bool,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, momentum: f64, weight_decay: f64, lr: f64) -> Self {
        let mut probe = params.clone();
        let velocities = probe.tensors_mut().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            velocities,
            momentum,
            weight_decay,
            lr,
            update_encoder: true,
        }
    }
}

/// `v ← μ·v + g + wd·θ`, `θ ← θ − lr·v`.
///
/// Weight decay applies to the encoder and the assignment transforms only; classifier
/// columns are re-normalized on every forward pass and codewords (l2q) are left undecayed.
/// Codebooks are only touched in l2q mode.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    let m_books = params.transforms.len();
    let update_encoder = state.update_encoder;
    let l2q = params.mode == CodebookMode::L2q;
    if l2q != grads.codebooks.is_some() {
        return Err(Error::Dimension("codebook gradients do not match the model mode".into()));
    }
    let mut tensors = params.tensors_mut();
    let grad_tensors = grads.tensors();
    if tensors.len() != grad_tensors.len() || tensors.len() != state.velocities.len() {
        return Err(Error::Dimension("gradient layout differs from parameters".into()));
    }
    for (idx, ((theta, g), v)) in tensors
        .iter_mut()
        .zip(&grad_tensors)
        .zip(state.velocities.iter_mut())
        .enumerate()
    {
        if theta.len() != g.len() || theta.len() != v.len() {
            return Err(Error::Dimension(format!("tensor {idx} shape mismatch")));
        }
        if idx == 0 && !update_encoder {
            continue;
        }
        let decay = if idx <= m_books { state.weight_decay } else { 0.0 };
        for ((t, &gi), vi) in theta.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = state.momentum * *vi + gi + decay * *t;
            *t -= state.lr * *vi;
        }
    }
    Ok(())
}
