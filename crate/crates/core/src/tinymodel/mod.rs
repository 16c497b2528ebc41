//! A desk-scale decoder-only transformer with hand-written backpropagation.
//!
//! Architecture: learned token and positional embeddings, `n_layers` pre-norm
//! blocks (LayerNorm → causal multi-head attention → residual, LayerNorm →
//! GELU MLP of width `4·d_model` → residual), a final LayerNorm and an untied
//! unembedding with bias. The "hidden states" exposed for pooling are the
//! final LayerNorm outputs, i.e. exactly what the unembedding consumes.
//!
//! Parameters live in one flat `f64` vector. Tensor order, which is also the
//! checkpoint order, is:
//!
//! ```text
//! tok_emb [vocab × d]   pos_emb [max_seq_len × d]
//! per layer:
//!   ln1.gain [d]  ln1.bias [d]
//!   attn.w_qkv [d × 3d]  attn.b_qkv [3d]  attn.w_out [d × d]  attn.b_out [d]
//!   ln2.gain [d]  ln2.bias [d]
//!   mlp.w_fc [d × 4d]  mlp.b_fc [4d]  mlp.w_proj [4d × d]  mlp.b_proj [d]
//! ln_f.gain [d]  ln_f.bias [d]
//! unembed.w [d × vocab]  unembed.b [vocab]
//! ```
//!
//! Matrices are row-major `in × out`, applied as `x · W`.

mod checkpoint;
mod embed;
mod engine;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CuratorError, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use embed::{embed_hidden, l2_normalize, pool_positional, position_weights};
pub use engine::{sample_loss, weighted_grad, BatchPass, ForwardResult, LossNormalization, Sample};

/// Byte-level vocabulary size.
pub const VOCAB: usize = 256;

/// Standard deviation of the Gaussian used for weight matrices and embeddings.
pub const INIT_STD: f64 = 0.02;

const LN_EPS: f64 = 1e-5;

fn default_vocab() -> usize {
    VOCAB
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(2, 64, 4, 64)
    }
}

impl ModelConfig {
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            n_heads,
            vocab: VOCAB,
            max_seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| Err(CuratorError::config(format!("model.{path}"), msg));
        if self.n_layers == 0 {
            return bad("n_layers", "must be at least 1");
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model", "must be a positive multiple of n_heads");
        }
        if self.vocab != VOCAB {
            return bad("vocab", "the byte-level tokenizer fixes vocab at 256");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len", "must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Exact parameter count N.
    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_u: usize,
    pub b_u: usize,
    pub total: usize,
    tensors: Vec<(String, usize, usize)>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ff = cfg.d_ff();
        let mut tensors = Vec::new();
        let mut cursor = 0usize;
        let mut take = |name: String, size: usize| {
            let at = cursor;
            tensors.push((name, at, size));
            cursor += size;
            at
        };
        let tok_emb = take("tok_emb".into(), cfg.vocab * d);
        let pos_emb = take("pos_emb".into(), cfg.max_seq_len * d);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerLayout {
                ln1_g: take(format!("layer{l}.ln1.gain"), d),
                ln1_b: take(format!("layer{l}.ln1.bias"), d),
                w_qkv: take(format!("layer{l}.attn.w_qkv"), d * 3 * d),
                b_qkv: take(format!("layer{l}.attn.b_qkv"), 3 * d),
                w_o: take(format!("layer{l}.attn.w_out"), d * d),
                b_o: take(format!("layer{l}.attn.b_out"), d),
                ln2_g: take(format!("layer{l}.ln2.gain"), d),
                ln2_b: take(format!("layer{l}.ln2.bias"), d),
                w_fc: take(format!("layer{l}.mlp.w_fc"), d * ff),
                b_fc: take(format!("layer{l}.mlp.b_fc"), ff),
                w_proj: take(format!("layer{l}.mlp.w_proj"), ff * d),
                b_proj: take(format!("layer{l}.mlp.b_proj"), d),
            })
            .collect();
        let lnf_g = take("ln_f.gain".into(), d);
        let lnf_b = take("ln_f.bias".into(), d);
        let w_u = take("unembed.w".into(), d * cfg.vocab);
        let b_u = take("unembed.b".into(), cfg.vocab);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_u,
            b_u,
            total: cursor,
            tensors,
        }
    }

    /// `(name, offset, len)` for every tensor in storage order.
    pub fn tensors(&self) -> &[(String, usize, usize)] {
        &self.tensors
    }
}

/// Names and sizes of the parameter tensors in storage order.
pub fn tensor_manifest(cfg: &ModelConfig) -> Vec<(String, usize)> {
    Layout::new(cfg)
        .tensors()
        .iter()
        .map(|(name, _, len)| (name.clone(), *len))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub step: u64,
    pub seed: u64,
}

impl ModelState {
    /// Gaussian(0, 0.02) for embeddings and weight matrices, with the two
    /// residual output projections scaled by `1/sqrt(2·n_layers)`; zeros for
    /// biases; LayerNorm gains 1. Draws follow tensor storage order from a
    /// ChaCha8 stream seeded with `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let layout = Layout::new(config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        for (name, at, len) in layout.tensors() {
            let slot = &mut params[*at..*at + len];
            if name.ends_with(".gain") {
                slot.fill(1.0);
            } else if name.ends_with("w_out") || name.ends_with("w_proj") {
                slot.iter_mut()
                    .for_each(|p| *p = normal.sample(&mut rng) * resid_scale);
            } else if name.contains(".b_") || name.ends_with(".bias") || name == "unembed.b" {
                // zeros
            } else {
                slot.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
            }
        }
        ModelState {
            config: *config,
            params,
            step: 0,
            seed,
        }
    }

    /// Zeroes the unembedding so every next-token distribution is uniform.
    pub fn zero_unembedding(&mut self) {
        let layout = Layout::new(&self.config);
        self.params[layout.w_u..layout.total].fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(CuratorError::EmptySequence { doc: None });
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(CuratorError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(CuratorError::TokenOutOfVocab {
                token: bad,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Parameter count written out tensor by tensor for the documented
    /// architecture, independent of `Layout`.
    fn count_by_hand(l: usize, d: usize, v: usize, s: usize) -> usize {
        let embeddings = v * d + s * d;
        let attn = (d * 3 * d + 3 * d) + (d * d + d);
        let mlp = (d * 4 * d + 4 * d) + (4 * d * d + d);
        let norms = 2 * (2 * d);
        let block = attn + mlp + norms;
        let head = 2 * d + d * v + v;
        embeddings + l * block + head
    }

    #[test]
    fn param_count_matches_hand_count() {
        let cfg = ModelConfig::new(2, 64, 4, 64);
        assert_eq!(count_by_hand(2, 64, 256, 64), 137_216);
        assert_eq!(cfg.param_count(), 137_216);
        let m = ModelState::init(&cfg, 0);
        assert_eq!(m.params.len(), 137_216);
        let small = ModelConfig::new(1, 8, 2, 6);
        assert_eq!(small.param_count(), count_by_hand(1, 8, 256, 6));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::new(1, 16, 2, 8);
        let a = ModelState::init(&cfg, 11);
        let b = ModelState::init(&cfg, 11);
        assert_eq!(a.params, b.params);
        let c = ModelState::init(&cfg, 12);
        assert!(a.params.iter().zip(&c.params).any(|(x, y)| x != y));
    }

    #[test]
    fn init_scheme() {
        let cfg = ModelConfig::new(1, 8, 2, 4);
        let m = ModelState::init(&cfg, 1);
        let lay = Layout::new(&cfg);
        let l0 = &lay.layers[0];
        assert!(m.params[l0.ln1_g..l0.ln1_g + 8].iter().all(|&x| x == 1.0));
        assert!(m.params[l0.b_qkv..l0.b_qkv + 24].iter().all(|&x| x == 0.0));
        assert!(m.params[lay.b_u..lay.total].iter().all(|&x| x == 0.0));
        assert!(m.params.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(2, 64, 4, 64).validate().is_ok());
        assert!(ModelConfig::new(2, 65, 4, 64).validate().is_err());
        assert!(ModelConfig::new(2, 64, 4, 1).validate().is_err());
        let mut c = ModelConfig::default();
        c.vocab = 512;
        assert!(c.validate().is_err());
    }
}
