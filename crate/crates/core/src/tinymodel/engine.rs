//! Batched forward pass and exact backward pass.
//!
//! Sequences in a batch are stacked row-wise so every linear layer is one
//! GEMM over all tokens; attention runs per sequence and per head. All
//! arithmetic is `f64`. Work is split across sequences only where each
//! sequence writes disjoint rows, and every reduction over rows runs in row
//! order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::{Layout, ModelState, LN_EPS};
use crate::error::{CuratorError, Result};

/// `c = a · b + beta · c` on row-major buffers. `ta`/`tb` read the stored
/// matrix transposed: with `ta`, `a` is stored `k × m`; with `tb`, `b` is
/// stored `n × k`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address only elements inside the asserted
    // buffer lengths, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
    }
}

fn accumulate_colsum(dst: &mut [f64], dy: &[f64]) {
    for row in dy.chunks_exact(dst.len()) {
        dst.iter_mut().zip(row).for_each(|(d, y)| *d += y);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// The inner tanh of the GELU approximation, via `exp` (several times
/// cheaper than `f64::tanh`; saturates cleanly at ±1).
fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu(x: f64, t: f64) -> f64 {
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Splits `buf` into consecutive mutable chunks of the given lengths.
fn split_lengths<'a>(mut buf: &'a mut [f64], lens: impl Iterator<Item = usize>) -> Vec<&'a mut [f64]> {
    let mut out = Vec::new();
    for len in lens {
        let (head, tail) = std::mem::take(&mut buf).split_at_mut(len);
        out.push(head);
        buf = tail;
    }
    out
}

struct LayerNormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    out: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> LayerNormCache {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    LayerNormCache { xhat, rstd, out }
}

/// Accumulates parameter gradients into `dgain`/`dbias` and adds the input
/// gradient into `dx`.
fn layer_norm_backward(
    cache: &LayerNormCache,
    dy: &[f64],
    d: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let rows = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

struct LayerCache {
    ln1: LayerNormCache,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    ln2: LayerNormCache,
    fc: Vec<f64>,
    fc_tanh: Vec<f64>,
    act: Vec<f64>,
}

/// How per-sample weights enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// `Σ w_i ℓ_i`, the step-by-step training rule.
    #[default]
    Raw,
    /// `(1/Z) Σ w_i ℓ_i` with `Z = Σ w_i` (zero gradient when `Z = 0`).
    WeightSum,
}

impl LossNormalization {
    /// Per-sample loss coefficients for the given weights.
    pub fn coefficients(self, weights: &[f64]) -> Vec<f64> {
        match self {
            LossNormalization::Raw => weights.to_vec(),
            LossNormalization::WeightSum => {
                let z: f64 = weights.iter().sum();
                if z > 0.0 {
                    weights.iter().map(|w| w / z).collect()
                } else {
                    vec![0.0; weights.len()]
                }
            }
        }
    }
}

/// Activations of one batched forward pass, kept for the backward pass.
pub struct BatchPass<'m> {
    model: &'m ModelState,
    layout: Layout,
    tokens: Vec<u32>,
    starts: Vec<usize>,
    lens: Vec<usize>,
    prob_starts: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    logits: Vec<f64>,
}

impl ModelState {
    /// Forward pass over a batch of input sequences.
    pub fn forward_batch(&self, inputs: &[&[u32]]) -> Result<BatchPass<'_>> {
        for seq in inputs {
            self.check_tokens(seq)?;
        }
        let cfg = &self.config;
        let (d, h, dh, ff, v) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff(), cfg.vocab);
        let layout = self.layout();
        let p = &self.params;

        let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        let mut starts = Vec::with_capacity(lens.len());
        let mut prob_starts = Vec::with_capacity(lens.len());
        let (mut rows, mut probs_len) = (0usize, 0usize);
        for &l in &lens {
            starts.push(rows);
            prob_starts.push(probs_len);
            rows += l;
            probs_len += h * l * l;
        }
        let tokens: Vec<u32> = inputs.iter().flat_map(|s| s.iter().copied()).collect();

        let mut x = vec![0.0; rows * d];
        for (seq, &start) in inputs.iter().zip(&starts) {
            for (pos, &tok) in seq.iter().enumerate() {
                let r = start + pos;
                let te = &p[layout.tok_emb + tok as usize * d..][..d];
                let pe = &p[layout.pos_emb + pos * d..][..d];
                for j in 0..d {
                    x[r * d + j] = te[j] + pe[j];
                }
            }
        }

        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for ll in &layout.layers {
            let ln1 = layer_norm(&x, d, &p[ll.ln1_g..][..d], &p[ll.ln1_b..][..d]);
            let mut qkv = vec![0.0; rows * 3 * d];
            gemm(rows, d, 3 * d, &ln1.out, false, &p[ll.w_qkv..][..3 * d * d], false, &mut qkv, 0.0);
            add_bias(&mut qkv, &p[ll.b_qkv..][..3 * d]);

            let mut probs = vec![0.0; probs_len];
            let mut att = vec![0.0; rows * d];
            {
                let prob_chunks = split_lengths(&mut probs, lens.iter().map(|&l| h * l * l));
                let att_chunks = split_lengths(&mut att, lens.iter().map(|&l| l * d));
                prob_chunks
                    .into_par_iter()
                    .zip(att_chunks)
                    .zip(starts.par_iter().zip(lens.par_iter()))
                    .for_each(|((pr, at), (&start, &l))| {
                        let q = &qkv[start * 3 * d..(start + l) * 3 * d];
                        attention_forward(q, l, d, h, dh, scale, pr, at);
                    });
            }

            let mut y = vec![0.0; rows * d];
            gemm(rows, d, d, &att, false, &p[ll.w_o..][..d * d], false, &mut y, 0.0);
            add_bias(&mut y, &p[ll.b_o..][..d]);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);

            let ln2 = layer_norm(&x, d, &p[ll.ln2_g..][..d], &p[ll.ln2_b..][..d]);
            let mut fc = vec![0.0; rows * ff];
            gemm(rows, d, ff, &ln2.out, false, &p[ll.w_fc..][..d * ff], false, &mut fc, 0.0);
            add_bias(&mut fc, &p[ll.b_fc..][..ff]);
            let fc_tanh: Vec<f64> = fc.iter().map(|&z| gelu_tanh(z)).collect();
            let act: Vec<f64> = fc.iter().zip(&fc_tanh).map(|(&z, &t)| gelu(z, t)).collect();
            let mut z = vec![0.0; rows * d];
            gemm(rows, ff, d, &act, false, &p[ll.w_proj..][..ff * d], false, &mut z, 0.0);
            add_bias(&mut z, &p[ll.b_proj..][..d]);
            x.iter_mut().zip(&z).for_each(|(a, b)| *a += b);

            layers.push(LayerCache {
                ln1,
                qkv,
                probs,
                att,
                ln2,
                fc,
                fc_tanh,
                act,
            });
        }

        let lnf = layer_norm(&x, d, &p[layout.lnf_g..][..d], &p[layout.lnf_b..][..d]);
        let mut logits = vec![0.0; rows * v];
        gemm(rows, d, v, &lnf.out, false, &p[layout.w_u..][..d * v], false, &mut logits, 0.0);
        add_bias(&mut logits, &p[layout.b_u..][..v]);

        Ok(BatchPass {
            model: self,
            layout,
            tokens,
            starts,
            lens,
            prob_starts,
            layers,
            lnf,
            logits,
        })
    }

    /// Forward pass over a single sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardResult> {
        let pass = self.forward_batch(&[tokens])?;
        Ok(pass.result(0))
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(qkv: &[f64], l: usize, d: usize, h: usize, dh: usize, scale: f64, probs: &mut [f64], att: &mut [f64]) {
    let stride = 3 * d;
    for head in 0..h {
        let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
        let pr = &mut probs[head * l * l..(head + 1) * l * l];
        for i in 0..l {
            let qi = &qkv[i * stride + qo..][..dh];
            let row = &mut pr[i * l..(i + 1) * l];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &qkv[j * stride + ko..][..dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                row[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for s in row[..=i].iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = 1.0 / sum;
            row[..=i].iter_mut().for_each(|s| *s *= inv);
            let out = &mut att[i * d + qo..][..dh];
            for j in 0..=i {
                let pij = row[j];
                let vj = &qkv[j * stride + vo..][..dh];
                out.iter_mut().zip(vj).for_each(|(o, vv)| *o += pij * vv);
            }
        }
    }
}

/// Adds the gradient w.r.t. this sequence's `qkv` rows into `dqkv`.
#[allow(clippy::too_many_arguments)]
fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    datt: &[f64],
    l: usize,
    d: usize,
    h: usize,
    dh: usize,
    scale: f64,
    dqkv: &mut [f64],
) {
    let stride = 3 * d;
    let mut dp = vec![0.0; l];
    let mut dq = vec![0.0; dh];
    for head in 0..h {
        let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
        let pr = &probs[head * l * l..(head + 1) * l * l];
        for i in 0..l {
            let doi = &datt[i * d + qo..][..dh];
            let row = &pr[i * l..(i + 1) * l];
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &qkv[j * stride + vo..][..dh];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                dot += row[j] * dp[j];
                let dvj = &mut dqkv[j * stride + vo..][..dh];
                dvj.iter_mut().zip(doi).for_each(|(g, o)| *g += row[j] * o);
            }
            let qi = &qkv[i * stride + qo..][..dh];
            dq.iter_mut().for_each(|g| *g = 0.0);
            for j in 0..=i {
                let ds = row[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &qkv[j * stride + ko..][..dh];
                dq.iter_mut().zip(kj).for_each(|(g, k)| *g += ds * k);
                let dkj = &mut dqkv[j * stride + ko..][..dh];
                dkj.iter_mut().zip(qi).for_each(|(g, q)| *g += ds * q);
            }
            let dqi = &mut dqkv[i * stride + qo..][..dh];
            dqi.iter_mut().zip(&dq).for_each(|(g, q)| *g += q);
        }
    }
}

impl<'m> BatchPass<'m> {
    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    pub fn seq_len(&self, i: usize) -> usize {
        self.lens[i]
    }

    /// Total tokens processed by this pass.
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Last-layer hidden states of sequence `i`, `len × d_model` row-major.
    pub fn hidden(&self, i: usize) -> &[f64] {
        let d = self.model.config.d_model;
        &self.lnf.out[self.starts[i] * d..(self.starts[i] + self.lens[i]) * d]
    }

    pub fn logits(&self, i: usize) -> &[f64] {
        let v = self.model.config.vocab;
        &self.logits[self.starts[i] * v..(self.starts[i] + self.lens[i]) * v]
    }

    pub fn result(&self, i: usize) -> ForwardResult {
        ForwardResult {
            logits: self.logits(i).to_vec(),
            hidden: self.hidden(i).to_vec(),
            len: self.lens[i],
            d_model: self.model.config.d_model,
            vocab: self.model.config.vocab,
        }
    }

    /// Mean next-token NLL per sequence.
    pub fn sample_losses(&self, targets: &[&[u32]]) -> Result<Vec<f64>> {
        self.check_targets(targets)?;
        Ok((0..self.len())
            .map(|i| {
                let nll = token_nll(self.logits(i), targets[i], self.model.config.vocab);
                nll.iter().sum::<f64>() / nll.len() as f64
            })
            .collect())
    }

    fn check_targets(&self, targets: &[&[u32]]) -> Result<()> {
        if targets.len() != self.len() {
            return Err(CuratorError::LengthMismatch {
                expected: self.len(),
                got: targets.len(),
            });
        }
        for (t, &l) in targets.iter().zip(&self.lens) {
            if t.len() != l {
                return Err(CuratorError::LengthMismatch {
                    expected: l,
                    got: t.len(),
                });
            }
            if let Some(&bad) = t.iter().find(|&&x| x as usize >= self.model.config.vocab) {
                return Err(CuratorError::TokenOutOfVocab {
                    token: bad,
                    vocab: self.model.config.vocab,
                });
            }
        }
        Ok(())
    }

    /// Gradient of `Σ_i coef_i · ℓ_i` where `ℓ_i` is the mean next-token
    /// NLL of sequence `i`.
    pub fn backward(&self, targets: &[&[u32]], coefs: &[f64]) -> Result<Vec<f64>> {
        self.check_targets(targets)?;
        if coefs.len() != self.len() {
            return Err(CuratorError::LengthMismatch {
                expected: self.len(),
                got: coefs.len(),
            });
        }
        let cfg = &self.model.config;
        let (d, h, dh, ff, v) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff(), cfg.vocab);
        let rows = self.tokens.len();
        let lay = &self.layout;
        let p = &self.model.params;
        let mut grad = vec![0.0; p.len()];

        // dlogits = coef/len · (softmax − onehot)
        let mut dlogits = vec![0.0; rows * v];
        for i in 0..self.len() {
            let scale = coefs[i] / self.lens[i] as f64;
            for (pos, &t) in targets[i].iter().enumerate() {
                let r = self.starts[i] + pos;
                let lrow = &self.logits[r * v..(r + 1) * v];
                let drow = &mut dlogits[r * v..(r + 1) * v];
                let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (g, &z) in drow.iter_mut().zip(lrow) {
                    *g = (z - max).exp();
                    sum += *g;
                }
                let k = scale / sum;
                drow.iter_mut().for_each(|g| *g *= k);
                drow[t as usize] -= scale;
            }
        }

        gemm(d, rows, v, &self.lnf.out, true, &dlogits, false, &mut grad[lay.w_u..lay.w_u + d * v], 1.0);
        accumulate_colsum(&mut grad[lay.b_u..lay.b_u + v], &dlogits);
        let mut dh_final = vec![0.0; rows * d];
        gemm(rows, v, d, &dlogits, false, &p[lay.w_u..][..d * v], true, &mut dh_final, 0.0);
        drop(dlogits);

        let mut dx = vec![0.0; rows * d];
        {
            let (g_lo, g_hi) = grad.split_at_mut(lay.lnf_b);
            layer_norm_backward(
                &self.lnf,
                &dh_final,
                d,
                &p[lay.lnf_g..][..d],
                &mut g_lo[lay.lnf_g..lay.lnf_g + d],
                &mut g_hi[..d],
                &mut dx,
            );
        }

        let scale = 1.0 / (dh as f64).sqrt();
        for (ll, cache) in lay.layers.iter().zip(&self.layers).rev() {
            // MLP branch
            gemm(ff, rows, d, &cache.act, true, &dx, false, &mut grad[ll.w_proj..ll.w_proj + ff * d], 1.0);
            accumulate_colsum(&mut grad[ll.b_proj..ll.b_proj + d], &dx);
            let mut dact = vec![0.0; rows * ff];
            gemm(rows, d, ff, &dx, false, &p[ll.w_proj..][..ff * d], true, &mut dact, 0.0);
            dact.iter_mut()
                .zip(cache.fc.iter().zip(&cache.fc_tanh))
                .for_each(|(g, (&z, &t))| *g *= gelu_grad(z, t));
            gemm(d, rows, ff, &cache.ln2.out, true, &dact, false, &mut grad[ll.w_fc..ll.w_fc + d * ff], 1.0);
            accumulate_colsum(&mut grad[ll.b_fc..ll.b_fc + ff], &dact);
            let mut dln2 = vec![0.0; rows * d];
            gemm(rows, ff, d, &dact, false, &p[ll.w_fc..][..d * ff], true, &mut dln2, 0.0);
            drop(dact);
            {
                let (g_lo, g_hi) = grad.split_at_mut(ll.ln2_b);
                layer_norm_backward(
                    &cache.ln2,
                    &dln2,
                    d,
                    &p[ll.ln2_g..][..d],
                    &mut g_lo[ll.ln2_g..ll.ln2_g + d],
                    &mut g_hi[..d],
                    &mut dx,
                );
            }

            // attention branch
            gemm(d, rows, d, &cache.att, true, &dx, false, &mut grad[ll.w_o..ll.w_o + d * d], 1.0);
            accumulate_colsum(&mut grad[ll.b_o..ll.b_o + d], &dx);
            let mut datt = vec![0.0; rows * d];
            gemm(rows, d, d, &dx, false, &p[ll.w_o..][..d * d], true, &mut datt, 0.0);
            let mut dqkv = vec![0.0; rows * 3 * d];
            {
                let chunks = split_lengths(&mut dqkv, self.lens.iter().map(|&l| l * 3 * d));
                chunks
                    .into_par_iter()
                    .enumerate()
                    .for_each(|(i, dq)| {
                        let (start, l) = (self.starts[i], self.lens[i]);
                        let ps = self.prob_starts[i];
                        attention_backward(
                            &cache.qkv[start * 3 * d..(start + l) * 3 * d],
                            &cache.probs[ps..ps + h * l * l],
                            &datt[start * d..(start + l) * d],
                            l,
                            d,
                            h,
                            dh,
                            scale,
                            dq,
                        );
                    });
            }
            drop(datt);
            gemm(d, rows, 3 * d, &cache.ln1.out, true, &dqkv, false, &mut grad[ll.w_qkv..ll.w_qkv + 3 * d * d], 1.0);
            accumulate_colsum(&mut grad[ll.b_qkv..ll.b_qkv + 3 * d], &dqkv);
            let mut dln1 = vec![0.0; rows * d];
            gemm(rows, 3 * d, d, &dqkv, false, &p[ll.w_qkv..][..3 * d * d], true, &mut dln1, 0.0);
            {
                let (g_lo, g_hi) = grad.split_at_mut(ll.ln1_b);
                layer_norm_backward(
                    &cache.ln1,
                    &dln1,
                    d,
                    &p[ll.ln1_g..][..d],
                    &mut g_lo[ll.ln1_g..ll.ln1_g + d],
                    &mut g_hi[..d],
                    &mut dx,
                );
            }
        }

        for i in 0..self.len() {
            for pos in 0..self.lens[i] {
                let r = self.starts[i] + pos;
                let tok = self.tokens[r] as usize;
                let dxr = &dx[r * d..(r + 1) * d];
                grad[lay.tok_emb + tok * d..][..d]
                    .iter_mut()
                    .zip(dxr)
                    .for_each(|(g, x)| *g += x);
                grad[lay.pos_emb + pos * d..][..d]
                    .iter_mut()
                    .zip(dxr)
                    .for_each(|(g, x)| *g += x);
            }
        }
        Ok(grad)
    }
}

/// Next-token NLL at each position of a `len × vocab` logit block.
fn token_nll(logits: &[f64], targets: &[u32], vocab: usize) -> Vec<f64> {
    logits
        .chunks_exact(vocab)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            // clamp the -0.0/rounding case where the target holds all the mass
            (lse - row[t as usize]).max(0.0)
        })
        .collect()
}

/// Output of a single-sequence forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// `len × vocab` next-token scores.
    pub logits: Vec<f64>,
    /// `len × d_model` last-layer hidden states.
    pub hidden: Vec<f64>,
    pub len: usize,
    pub d_model: usize,
    pub vocab: usize,
}

impl ForwardResult {
    pub fn hidden_row(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn per_token_nll(&self, targets: &[u32]) -> Result<Vec<f64>> {
        if targets.len() != self.len {
            return Err(CuratorError::LengthMismatch {
                expected: self.len,
                got: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(CuratorError::TokenOutOfVocab {
                token: bad,
                vocab: self.vocab,
            });
        }
        Ok(token_nll(&self.logits, targets, self.vocab))
    }
}

/// Mean next-token cross-entropy of one sequence.
pub fn sample_loss(result: &ForwardResult, targets: &[u32]) -> Result<f64> {
    let nll = result.per_token_nll(targets)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// One training sample: next-token inputs and targets plus an id for error
/// reporting.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub id: &'a str,
    pub inputs: &'a [u32],
    pub targets: &'a [u32],
}

/// `Σ_i w_i ∇θ ℓ_i` (or its `1/Z` form) over a batch, checking every loss
/// and the gradient for non-finite values.
pub fn weighted_grad(
    model: &ModelState,
    batch: &[Sample<'_>],
    weights: &[f64],
    normalization: LossNormalization,
) -> Result<Vec<f64>> {
    if weights.len() != batch.len() {
        return Err(CuratorError::LengthMismatch {
            expected: batch.len(),
            got: weights.len(),
        });
    }
    if let Some(pos) = weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(CuratorError::InvalidArgument(format!(
            "weight {} for sample {:?} must be finite and non-negative",
            weights[pos], batch[pos].id
        )));
    }
    if batch.is_empty() {
        return Ok(vec![0.0; model.params.len()]);
    }
    let inputs: Vec<&[u32]> = batch.iter().map(|s| s.inputs).collect();
    let targets: Vec<&[u32]> = batch.iter().map(|s| s.targets).collect();
    let pass = model.forward_batch(&inputs)?;
    let losses = pass.sample_losses(&targets)?;
    if let Some(pos) = losses.iter().position(|l| !l.is_finite()) {
        return Err(CuratorError::NonFinite {
            sample: batch[pos].id.to_string(),
            what: "loss",
        });
    }
    let grad = pass.backward(&targets, &normalization.coefficients(weights))?;
    if grad.iter().any(|g| !g.is_finite()) {
        let culprit = weights
            .iter()
            .zip(batch)
            .filter(|(w, _)| **w > 0.0)
            .map(|(_, s)| s.id)
            .next()
            .unwrap_or(batch[0].id);
        return Err(CuratorError::NonFinite {
            sample: culprit.to_string(),
            what: "gradient",
        });
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinymodel::ModelConfig;

    fn small() -> ModelState {
        ModelState::init(&ModelConfig::new(2, 16, 4, 12), 5)
    }

    #[test]
    fn causality() {
        let m = small();
        let a = m.forward(&[1, 2, 3, 4, 5]).unwrap();
        let b = m.forward(&[1, 2, 3, 9, 200]).unwrap();
        let v = 256;
        assert_eq!(a.logits[..3 * v], b.logits[..3 * v]);
        assert_eq!(a.hidden[..3 * 16], b.hidden[..3 * 16]);
        assert_ne!(a.logits[3 * v..], b.logits[3 * v..]);
    }

    #[test]
    fn single_token_and_errors() {
        let m = small();
        let r = m.forward(&[7]).unwrap();
        assert_eq!(r.hidden.len(), 16);
        assert!(matches!(m.forward(&[0; 13]), Err(CuratorError::SequenceTooLong { .. })));
        assert!(matches!(m.forward(&[256]), Err(CuratorError::TokenOutOfVocab { .. })));
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn zero_unembedding_is_uniform() {
        let mut m = small();
        m.zero_unembedding();
        let r = m.forward(&[3, 1, 4, 1, 5]).unwrap();
        let nll = r.per_token_nll(&[1, 4, 1, 5, 9]).unwrap();
        for x in nll {
            assert!((x - 256f64.ln()).abs() < 1e-12);
        }
        assert!((sample_loss(&r, &[1, 4, 1, 5, 9]).unwrap() - 5.545_177_444_479_562).abs() < 1e-12);
    }

    #[test]
    fn loss_zero_when_target_certain_and_shift_invariant() {
        let mut r = small().forward(&[1, 2]).unwrap();
        let targets = [2u32, 3];
        let base = sample_loss(&r, &targets).unwrap();
        for row in r.logits.chunks_exact_mut(256) {
            row.iter_mut().for_each(|z| *z += 17.5);
        }
        assert!((sample_loss(&r, &targets).unwrap() - base).abs() < 1e-12);
        for (row, &t) in r.logits.chunks_exact_mut(256).zip(&targets) {
            row.fill(-1e4);
            row[t as usize] = 1e4;
        }
        assert_eq!(sample_loss(&r, &targets).unwrap(), 0.0);
        assert!(sample_loss(&r, &[1]).is_err());
    }

    #[test]
    fn batch_matches_single_sequences() {
        let m = small();
        let seqs: [&[u32]; 3] = [&[1, 2, 3], &[9], &[4, 4, 4, 4, 4, 4]];
        let pass = m.forward_batch(&seqs).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let single = m.forward(s).unwrap();
            for (a, b) in pass.hidden(i).iter().zip(&single.hidden) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let m = small();
        let s = Sample { id: "a", inputs: &[1, 2, 3], targets: &[2, 3, 4] };
        let g = weighted_grad(&m, &[s, s], &[0.0, 0.0], LossNormalization::Raw).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        let g = weighted_grad(&m, &[s], &[0.0], LossNormalization::WeightSum).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn half_weight_halves_gradient() {
        let m = small();
        let s = Sample { id: "a", inputs: &[5, 6, 7, 8], targets: &[6, 7, 8, 9] };
        let full = weighted_grad(&m, &[s], &[1.0], LossNormalization::Raw).unwrap();
        let half = weighted_grad(&m, &[s], &[0.5], LossNormalization::Raw).unwrap();
        assert!(full.iter().zip(&half).all(|(f, h)| *h == 0.5 * f));
        assert!(full.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn rejects_negative_weight_and_mismatch() {
        let m = small();
        let s = Sample { id: "neg", inputs: &[1], targets: &[2] };
        assert!(weighted_grad(&m, &[s], &[-1.0], LossNormalization::Raw).is_err());
        assert!(weighted_grad(&m, &[s], &[1.0, 1.0], LossNormalization::Raw).is_err());
    }

    #[test]
    fn weight_sum_normalization() {
        let m = small();
        let a = Sample { id: "a", inputs: &[1, 2], targets: &[2, 3] };
        let b = Sample { id: "b", inputs: &[7, 8, 9], targets: &[8, 9, 10] };
        let raw = weighted_grad(&m, &[a, b], &[1.0, 3.0], LossNormalization::Raw).unwrap();
        let norm = weighted_grad(&m, &[a, b], &[1.0, 3.0], LossNormalization::WeightSum).unwrap();
        for (r, n) in raw.iter().zip(&norm) {
            assert!((r / 4.0 - n).abs() <= 1e-12 * r.abs().max(1e-12));
        }
    }
}
