//! Forward quantization primitives for a single sub-vector.
//!
//! A sub-vector `x` is mapped to assignment logits `g = Fᵀx` by a bias-free linear
//! transform, to probabilities `p = softmax(g)`, and then either to the soft
//! quantization `s = Σ_k p_k C_k` or to the hard code `argmax_k p_k`.

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};

/// `g_k = ⟨x, F[:, k]⟩`.
pub fn assignment_logits(x: &[f64], transform: &Matrix) -> Result<Vec<f64>> {
    transform.tr_mul_vec(x)
}

/// Max-shifted softmax.
pub fn assignment_probabilities(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `s = Σ_k p_k · C_k`.
pub fn soft_quantize(p: &[f64], codebook: &Codebook) -> Result<Vec<f64>> {
    if p.len() != codebook.k_words() {
        return Err(Error::Dimension(format!(
            "{} probabilities for {} codewords",
            p.len(),
            codebook.k_words()
        )));
    }
    codebook.matrix().mul_vec(p)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn hard_assign(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = k;
        }
    }
    best
}

/// `‖s − C_{k*}‖₂`: how far the soft quantization is from the codeword the item is encoded with.
pub fn quantization_gap(p: &[f64], codebook: &Codebook) -> Result<f64> {
    let s = soft_quantize(p, codebook)?;
    let hard = codebook.codeword(hard_assign(p));
    let diff: Vec<f64> = s.iter().zip(hard).map(|(a, b)| a - b).collect();
    Ok(norm(&diff))
}
