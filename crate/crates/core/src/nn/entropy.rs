use alloc::vec::Vec;

use super::matrix::DenseMatrix;
use crate::math;

/// Row entropies `H = -sum p ln p` of a batch of distributions, and
/// `dH/dz` for the softmax logits `z` that produced them.
///
/// Zero-probability entries contribute nothing (the `p ln p -> 0` limit),
/// to both the value and the gradient.
pub fn entropy_of_policy(action_probs: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let mut entropies = Vec::with_capacity(action_probs.rows());
    let mut grad = DenseMatrix::zeros(action_probs.rows(), action_probs.cols());
    for b in 0..action_probs.rows() {
        let p = action_probs.row(b);
        let h: f64 = p
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| -v * math::ln(v))
            .sum();
        for (k, g) in grad.row_mut(b).iter_mut().enumerate() {
            // dH/dz_k = -p_k (ln p_k + H)
            *g = if p[k] > 0.0 { -p[k] * (math::ln(p[k]) + h) } else { 0.0 };
        }
        entropies.push(h);
    }
    (entropies, grad)
}
