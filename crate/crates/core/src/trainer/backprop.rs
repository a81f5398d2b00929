//! Forward pass of the objective and its hand-derived gradients.
//!
//! Per sample and subspace the graph is
//!
//! ```text
//! e ──encoder──> x ──Fᵀ──> g ──softmax──> p ──C──> s
//!                │                         │        │
//!                └─ x/‖x‖ ─> cos_x          │        └─ s/‖s‖ ─> cos_s
//!                                           └─ entropy
//! ```
//!
//! and the loss is `½(l_x + l_s) + λ·l_ent`, each term averaged over the `N·M`
//! (sample, subspace) pairs. The backward pass differentiates exactly this
//! expression, including both ℓ2 normalizations.

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::linalg::{dot, normalize, normalize_backward, Matrix};
use crate::metric_loss::{entropy, margin_softmax, total_loss, Hyperparams, LossBreakdown, LossParts};
use crate::quantizer::{assignment_logits, assignment_probabilities, soft_quantize};
use crate::trainer::model::{CodebookMode, ModelParams};

/// Intermediates of one (sample, subspace) pair.
#[derive(Clone, Debug)]
pub struct SubspaceCache {
    pub x: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub x_norm: f64,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub s: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub s_norm: f64,
    pub cos_x: Vec<f64>,
    pub cos_s: Vec<f64>,
    /// Softmax over the margin-adjusted logits of each branch.
    pub margin_probs_x: Vec<f64>,
    pub margin_probs_s: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// `[i][m]`
    pub samples: Vec<Vec<SubspaceCache>>,
    /// Unit-column classifier per subspace with the original column norms.
    pub unit_weights: Vec<(Matrix, Vec<f64>)>,
    pub hp: Hyperparams,
    pub include_lx: bool,
}

impl ForwardCache {
    /// Predicted class per sample: argmax of the summed soft-quantization cosines.
    pub fn predictions(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|subs| {
                let c = subs[0].cos_s.len();
                let mut score = vec![0.0; c];
                for sub in subs {
                    for (acc, v) in score.iter_mut().zip(&sub.cos_s) {
                        *acc += v;
                    }
                }
                crate::quantizer::hard_assign(&score)
            })
            .collect()
    }

    pub fn correct(&self) -> usize {
        self.predictions()
            .iter()
            .zip(&self.labels)
            .filter(|(p, y)| p == y)
            .count()
    }
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub encoder: Matrix,
    pub transforms: Vec<Matrix>,
    pub classifier: Vec<Matrix>,
    /// Only present in l2q mode.
    pub codebooks: Option<Vec<Matrix>>,
}

impl Gradients {
    /// Flat views in the same order as `ModelParams::tensors_mut`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.encoder.as_slice()];
        out.extend(self.transforms.iter().map(Matrix::as_slice));
        out.extend(self.classifier.iter().map(Matrix::as_slice));
        if let Some(books) = &self.codebooks {
            out.extend(books.iter().map(Matrix::as_slice));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.encoder.as_mut_slice()];
        out.extend(self.transforms.iter_mut().map(Matrix::as_mut_slice));
        out.extend(self.classifier.iter_mut().map(Matrix::as_mut_slice));
        if let Some(books) = &mut self.codebooks {
            out.extend(books.iter_mut().map(Matrix::as_mut_slice));
        }
        out
    }

    /// Human-readable names matching [`Gradients::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["encoder".to_string()];
        out.extend((0..self.transforms.len()).map(|m| format!("transform[{m}]")));
        out.extend((0..self.classifier.len()).map(|m| format!("classifier[{m}]")));
        if let Some(books) = &self.codebooks {
            out.extend((0..books.len()).map(|m| format!("codebook[{m}]")));
        }
        out
    }
}

/// Evaluates the objective on a batch and keeps everything the backward pass needs.
pub fn forward(
    params: &ModelParams,
    inputs: &[&[f64]],
    labels: &[usize],
    hp: &Hyperparams,
    include_lx: bool,
) -> Result<(LossBreakdown, ForwardCache)> {
    hp.validate()?;
    params.check_shapes()?;
    if inputs.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} inputs with {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let classes = params.classes();
    let spec = *params.spec();
    let unit_weights = (0..spec.m_books)
        .map(|m| params.classifier.normalized(m))
        .collect::<Result<Vec<_>>>()?;

    let (mut sum_x, mut sum_s, mut sum_ent) = (0.0, 0.0, 0.0);
    let mut samples = Vec::with_capacity(inputs.len());
    for (&e, &y) in inputs.iter().zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let features = params.embed(e)?;
        let mut subs = Vec::with_capacity(spec.m_books);
        for (m, x) in features.chunks_exact(spec.sub_dim).enumerate() {
            let (w_hat, _) = &unit_weights[m];
            let sub = subspace_forward(x, &params.transforms[m], params.codebooks.book(m), w_hat, y, hp)?;
            sum_x += sub.0;
            sum_s += sub.1;
            sum_ent += entropy(&sub.2.probs);
            subs.push(sub.2);
        }
        samples.push(subs);
    }
    let pairs = (inputs.len() * spec.m_books) as f64;
    let parts = LossParts {
        l_x: sum_x / pairs,
        l_s: sum_s / pairs,
        l_ent: sum_ent / pairs,
    };
    let breakdown = total_loss(parts, hp.entropy_weight, include_lx);
    let cache = ForwardCache {
        inputs: inputs.iter().map(|e| e.to_vec()).collect(),
        labels: labels.to_vec(),
        samples,
        unit_weights,
        hp: *hp,
        include_lx,
    };
    Ok((breakdown, cache))
}

fn subspace_forward(
    x: &[f64],
    transform: &Matrix,
    codebook: &Codebook,
    w_hat: &Matrix,
    label: usize,
    hp: &Hyperparams,
) -> Result<(f64, f64, SubspaceCache)> {
    let (x_hat, x_norm) = normalize(x)?;
    let logits = assignment_logits(x, transform)?;
    let probs = assignment_probabilities(&logits);
    let s = soft_quantize(&probs, codebook)?;
    let (s_hat, s_norm) = normalize(&s)?;
    let cos_x = w_hat.tr_mul_vec(&x_hat)?;
    let cos_s = w_hat.tr_mul_vec(&s_hat)?;
    let (loss_x, margin_probs_x) = margin_softmax(&cos_x, label, hp.scale_r, hp.margin_u)?;
    let (loss_s, margin_probs_s) = margin_softmax(&cos_s, label, hp.scale_r, hp.margin_u)?;
    Ok((
        loss_x,
        loss_s,
        SubspaceCache {
            x: x.to_vec(),
            x_hat,
            x_norm,
            logits,
            probs,
            s,
            s_hat,
            s_norm,
            cos_x,
            cos_s,
            margin_probs_x,
            margin_probs_s,
        },
    ))
}

/// `Jᵀ·upstream` for the softmax Jacobian `J_kj = p_k([k = j] − p_j)`.
pub fn softmax_jacobian_apply(p: &[f64], upstream: &[f64]) -> Vec<f64> {
    let mean = dot(p, upstream);
    p.iter().zip(upstream).map(|(pk, uk)| pk * (uk - mean)).collect()
}

/// `∂s/∂g_k = p_k (C_k − s)` for every `k`.
pub fn grad_soft_quantization(p: &[f64], codebook: &Codebook, s: &[f64]) -> Vec<Vec<f64>> {
    p.iter()
        .enumerate()
        .map(|(k, &pk)| {
            codebook
                .codeword(k)
                .iter()
                .zip(s)
                .map(|(c, sv)| pk * (c - sv))
                .collect()
        })
        .collect()
}

/// Gradient of the per-sample entropy `−Σ p log p` w.r.t. the logits:
/// `p_k (Σ_j p_j log p_j − log p_k)`.
pub fn grad_entropy(p: &[f64]) -> Vec<f64> {
    let plogp: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    p.iter()
        .map(|&pk| if pk > 0.0 { pk * (plogp - pk.ln()) } else { 0.0 })
        .collect()
}

/// Gradients of the scalar returned by [`forward`] w.r.t. every learnable tensor.
pub fn backward(params: &ModelParams, cache: &ForwardCache) -> Result<Gradients> {
    params.check_shapes()?;
    let spec = *params.spec();
    if cache.unit_weights.len() != spec.m_books
        || cache.samples.iter().any(|s| s.len() != spec.m_books)
    {
        return Err(Error::Dimension("forward cache does not match the model".into()));
    }
    let (d, k, c) = (spec.sub_dim, spec.k_words, params.classes());
    let hp = cache.hp;
    let pairs = (cache.samples.len() * spec.m_books) as f64;
    let weight_x = if cache.include_lx { 0.5 / pairs } else { 0.0 };
    let weight_s = 0.5 / pairs;
    let weight_ent = hp.entropy_weight / pairs;
    let l2q = params.mode == CodebookMode::L2q;

    let mut grads = Gradients {
        encoder: Matrix::zeros(params.input_dim(), params.feature_dim()),
        transforms: vec![Matrix::zeros(d, k); spec.m_books],
        classifier: vec![Matrix::zeros(d, c); spec.m_books],
        codebooks: l2q.then(|| vec![Matrix::zeros(d, k); spec.m_books]),
    };
    // Gradient w.r.t. the unit classifier columns; projected onto the raw columns at the end.
    let mut grad_w_hat = vec![Matrix::zeros(d, c); spec.m_books];

    for ((input, &label), subs) in cache.inputs.iter().zip(&cache.labels).zip(&cache.samples) {
        let mut grad_features = vec![0.0; spec.feature_dim()];
        for (m, sub) in subs.iter().enumerate() {
            let (w_hat, _) = &cache.unit_weights[m];
            let dcos_x = margin_grad(&sub.margin_probs_x, label, hp.scale_r * weight_x);
            let dcos_s = margin_grad(&sub.margin_probs_s, label, hp.scale_r * weight_s);

            let mut dx_hat = vec![0.0; d];
            let mut ds_hat = vec![0.0; d];
            let gw = &mut grad_w_hat[m];
            for class in 0..c {
                let w_col = w_hat.col(class);
                let (ax, as_) = (dcos_x[class], dcos_s[class]);
                for i in 0..d {
                    dx_hat[i] += ax * w_col[i];
                    ds_hat[i] += as_ * w_col[i];
                }
                let g_col = gw.col_mut(class);
                for i in 0..d {
                    g_col[i] += ax * sub.x_hat[i] + as_ * sub.s_hat[i];
                }
            }

            let ds = normalize_backward(&sub.s_hat, sub.s_norm, &ds_hat);
            let codebook = params.codebooks.book(m);
            let dsdg = grad_soft_quantization(&sub.probs, codebook, &sub.s);
            let dent = grad_entropy(&sub.probs);
            let dg: Vec<f64> = (0..k)
                .map(|kk| dot(&ds, &dsdg[kk]) + weight_ent * dent[kk])
                .collect();

            // x receives the direct classification path and the g = Fᵀx path.
            let mut dx = normalize_backward(&sub.x_hat, sub.x_norm, &dx_hat);
            let transform = &params.transforms[m];
            let gf = &mut grads.transforms[m];
            for (kk, &dgk) in dg.iter().enumerate() {
                let f_col = transform.col(kk);
                let g_col = gf.col_mut(kk);
                for i in 0..d {
                    g_col[i] += dgk * sub.x[i];
                    dx[i] += dgk * f_col[i];
                }
            }
            if let Some(books) = grads.codebooks.as_mut() {
                for (kk, &pk) in sub.probs.iter().enumerate() {
                    for (g, dsi) in books[m].col_mut(kk).iter_mut().zip(&ds) {
                        *g += pk * dsi;
                    }
                }
            }
            grad_features[m * d..(m + 1) * d].copy_from_slice(&dx);
        }
        for (j, &gj) in grad_features.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            for (g, e) in grads.encoder.col_mut(j).iter_mut().zip(input) {
                *g += gj * e;
            }
        }
    }

    for m in 0..spec.m_books {
        let (w_hat, norms) = &cache.unit_weights[m];
        for class in 0..c {
            let projected = normalize_backward(w_hat.col(class), norms[class], grad_w_hat[m].col(class));
            grads.classifier[m].col_mut(class).copy_from_slice(&projected);
        }
    }
    Ok(grads)
}

/// `∂(scale · loss)/∂cos_c`, with `scale` already containing `r` and the averaging weight.
fn margin_grad(margin_probs: &[f64], label: usize, scale: f64) -> Vec<f64> {
    margin_probs
        .iter()
        .enumerate()
        .map(|(c, &q)| scale * (q - if c == label { 1.0 } else { 0.0 }))
        .collect()
}
