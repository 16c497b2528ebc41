//! Sequence embeddings from last-layer hidden states.

use crate::error::{CuratorError, Result};

/// Pooling weights `i / Σ_{j=1}^{L} j` for positions `i = 1..=L`.
pub fn position_weights(len: usize) -> Vec<f64> {
    let total = (len * (len + 1) / 2) as f64;
    (1..=len).map(|i| i as f64 / total).collect()
}

/// Position-weighted mean of `hidden` (`len × dim` row-major); later tokens
/// get more mass. Not normalized.
pub fn pool_positional(hidden: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || hidden.is_empty() {
        return Err(CuratorError::EmptySequence { doc: None });
    }
    if hidden.len() % dim != 0 {
        return Err(CuratorError::LengthMismatch {
            expected: (hidden.len() / dim + 1) * dim,
            got: hidden.len(),
        });
    }
    let weights = position_weights(hidden.len() / dim);
    let mut out = vec![0.0; dim];
    for (row, w) in hidden.chunks_exact(dim).zip(&weights) {
        out.iter_mut().zip(row).for_each(|(o, h)| *o += w * h);
    }
    Ok(out)
}

/// `v / max(‖v‖₂, eps)`.
pub fn l2_normalize(v: &[f64], eps: f64) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm.max(eps);
    v.iter().map(|x| x / denom).collect()
}

/// Pool then normalize: the sequence embedding used for similarity scores.
pub fn embed_hidden(hidden: &[f64], dim: usize, eps: f64) -> Result<Vec<f64>> {
    Ok(l2_normalize(&pool_positional(hidden, dim)?, eps))
}
