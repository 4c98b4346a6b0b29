//! A small decoder-only language model with a fully manual backward pass.
//!
//! Architecture: token embedding plus learned absolute positions, then
//! `layers` pre-norm residual blocks (attention, then a squared-ReLU MLP),
//! a final RMSNorm, and an untied unembedding. RMSNorm is gain-free, so the
//! only parameters are the matrices in [`ModelParams`]. Each block's
//! attention runs in either dense or pyramid-selected mode, chosen per
//! layer per step by the trainer.

use crate::error::{Error, Result};
use crate::layer::{
    dense_backward, dense_forward, lighthouse_backward, lighthouse_forward, AttentionLayerParams,
    DenseTape, LighthouseTape,
};
use crate::numerics::rng::SplitMix64;
use crate::numerics::{matmul, matmul_transpose_a, SeqMatrix};
use crate::scalar::Scalar;

use super::TrainConfig;

const RMSNORM_EPS: f64 = 1e-6;

/// One residual block: attention parameters plus the MLP pair.
#[derive(Debug, Clone)]
pub struct BlockParams<T: Scalar> {
    pub attn: AttentionLayerParams<T>,
    /// `d_model × ffn_dim`
    pub w1: SeqMatrix<T>,
    /// `ffn_dim × d_model`
    pub w2: SeqMatrix<T>,
}

/// All trainable tensors of the toy model.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    /// `vocab × d_model`
    pub embed: SeqMatrix<T>,
    /// `seq_len × d_model` learned absolute positions
    pub pos: SeqMatrix<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// `d_model × vocab`
    pub unembed: SeqMatrix<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &TrainConfig, rng: &mut SplitMix64) -> Self {
        let d = cfg.d_model;
        let embed_std = 1.0 / (d as f64).sqrt();
        ModelParams {
            embed: SeqMatrix::gaussian(cfg.vocab, d, embed_std, rng),
            pos: SeqMatrix::gaussian(cfg.lighthouse.seq_len, d, embed_std, rng),
            blocks: (0..cfg.layers)
                .map(|_| BlockParams {
                    attn: AttentionLayerParams::init(d, cfg.heads, cfg.head_dim, rng),
                    w1: SeqMatrix::gaussian(d, cfg.ffn_dim, 1.0 / (d as f64).sqrt(), rng),
                    w2: SeqMatrix::gaussian(cfg.ffn_dim, d, 1.0 / (cfg.ffn_dim as f64).sqrt(), rng),
                })
                .collect(),
            unembed: SeqMatrix::gaussian(d, cfg.vocab, embed_std, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embed: SeqMatrix::zeros(self.embed.rows(), self.embed.cols()),
            pos: SeqMatrix::zeros(self.pos.rows(), self.pos.cols()),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    attn: b.attn.zeros_like(),
                    w1: SeqMatrix::zeros(b.w1.rows(), b.w1.cols()),
                    w2: SeqMatrix::zeros(b.w2.rows(), b.w2.cols()),
                })
                .collect(),
            unembed: SeqMatrix::zeros(self.unembed.rows(), self.unembed.cols()),
        }
    }

    /// All tensors in a fixed order, each tagged with whether weight decay
    /// applies (matmul weights yes, embedding tables no).
    pub fn tensors(&self) -> Vec<(&SeqMatrix<T>, bool)> {
        let mut out: Vec<(&SeqMatrix<T>, bool)> = vec![(&self.embed, false), (&self.pos, false)];
        for block in &self.blocks {
            for w in &block.attn.w_q {
                out.push((w, true));
            }
            for w in &block.attn.w_k {
                out.push((w, true));
            }
            for w in &block.attn.w_v {
                out.push((w, true));
            }
            out.push((&block.attn.w_o, true));
            out.push((&block.w1, true));
            out.push((&block.w2, true));
        }
        out.push((&self.unembed, true));
        out
    }

    /// Mutable twin of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(&mut SeqMatrix<T>, bool)> {
        let mut out: Vec<(&mut SeqMatrix<T>, bool)> =
            vec![(&mut self.embed, false), (&mut self.pos, false)];
        for block in &mut self.blocks {
            for w in &mut block.attn.w_q {
                out.push((w, true));
            }
            for w in &mut block.attn.w_k {
                out.push((w, true));
            }
            for w in &mut block.attn.w_v {
                out.push((w, true));
            }
            out.push((&mut block.attn.w_o, true));
            out.push((&mut block.w1, true));
            out.push((&mut block.w2, true));
        }
        out.push((&mut self.unembed, true));
        out
    }
}

enum AttnTape<T: Scalar> {
    Dense(DenseTape<T>),
    Lighthouse(LighthouseTape<T>),
}

struct BlockTape<T: Scalar> {
    n1: SeqMatrix<T>,
    inv1: Vec<T>,
    attn: AttnTape<T>,
    n2: SeqMatrix<T>,
    inv2: Vec<T>,
    /// `relu(n2 · w1)`, saved for both MLP adjoints.
    relu: SeqMatrix<T>,
}

fn rmsnorm_forward<T: Scalar>(x: &SeqMatrix<T>) -> (SeqMatrix<T>, Vec<T>) {
    let (rows, cols) = (x.rows(), x.cols());
    let eps = T::cast(RMSNORM_EPS);
    let denom = T::cast(cols as f64);
    let mut y = SeqMatrix::zeros(rows, cols);
    let mut inv = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mut ms = T::zero();
        for &v in row {
            ms += v * v;
        }
        ms /= denom;
        let inv_r = (ms + eps).sqrt().recip();
        for (out, &v) in y.row_mut(i).iter_mut().zip(row) {
            *out = v * inv_r;
        }
        inv.push(inv_r);
    }
    (y, inv)
}

/// Adjoint of the gain-free RMSNorm given its output `y = x / rms(x)` and
/// the saved per-row `1 / rms(x)`:
/// `dx = inv_rms · (dy − y · mean(dy ⊙ y))`.
fn rmsnorm_backward<T: Scalar>(y: &SeqMatrix<T>, inv: &[T], dy: &SeqMatrix<T>) -> SeqMatrix<T> {
    let (rows, cols) = (y.rows(), y.cols());
    let denom = T::cast(cols as f64);
    let mut dx = SeqMatrix::zeros(rows, cols);
    for i in 0..rows {
        let y_row = y.row(i);
        let dy_row = dy.row(i);
        let mut dot = T::zero();
        for (&g, &v) in dy_row.iter().zip(y_row) {
            dot += g * v;
        }
        let mean = dot / denom;
        for ((out, &g), &v) in dx.row_mut(i).iter_mut().zip(dy_row).zip(y_row) {
            *out = inv[i] * (g - v * mean);
        }
    }
    dx
}

/// Forward pass plus full backward for one example window.
///
/// `tokens` holds `seq_len + 1` symbols: position `i` is trained to predict
/// `tokens[i + 1]`. The returned loss is the mean cross-entropy in nats over
/// the `seq_len` positions; gradients scaled by `weight` (the caller's
/// 1/batch factor) are accumulated into `grads`.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    tokens: &[usize],
    lighthouse_layers: &[bool],
    weight: f64,
    grads: &mut ModelParams<T>,
) -> Result<f64> {
    let n = cfg.lighthouse.seq_len;
    let d = cfg.d_model;
    if tokens.len() != n + 1 {
        return Err(Error::Contract(format!(
            "loss_and_grads: {} tokens for seq_len {n} (need seq_len + 1)",
            tokens.len()
        )));
    }
    if lighthouse_layers.len() != cfg.layers {
        return Err(Error::Contract(format!(
            "loss_and_grads: {} mode flags for {} layers",
            lighthouse_layers.len(),
            cfg.layers
        )));
    }
    let inputs = &tokens[..n];
    let targets = &tokens[1..];
    for &t in tokens {
        if t >= cfg.vocab {
            return Err(Error::Contract(format!("loss_and_grads: token {t} outside vocab {}", cfg.vocab)));
        }
    }

    // Forward.
    let mut x = SeqMatrix::<T>::zeros(n, d);
    for i in 0..n {
        let e = params.embed.row(inputs[i]);
        let p = params.pos.row(i);
        for ((out, &ev), &pv) in x.row_mut(i).iter_mut().zip(e).zip(p) {
            *out = ev + pv;
        }
    }
    let mut tapes = Vec::with_capacity(cfg.layers);
    for (block, &light) in params.blocks.iter().zip(lighthouse_layers) {
        let (n1, inv1) = rmsnorm_forward(&x);
        let (attn_out, attn_tape) = if light {
            let (o, tape) = lighthouse_forward(&n1, &block.attn, &cfg.lighthouse)?;
            (o, AttnTape::Lighthouse(tape))
        } else {
            let (o, tape) = dense_forward(&n1, &block.attn)?;
            (o, AttnTape::Dense(tape))
        };
        x.add_scaled(&attn_out, T::one())?;
        let (n2, inv2) = rmsnorm_forward(&x);
        let u = matmul(&n2, &block.w1, false)?;
        let mut relu = u;
        for v in relu.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let mut act = relu.clone();
        for v in act.data_mut() {
            *v = *v * *v;
        }
        let f = matmul(&act, &block.w2, false)?;
        x.add_scaled(&f, T::one())?;
        tapes.push(BlockTape { n1, inv1, attn: attn_tape, n2, inv2, relu });
    }
    let (yf, invf) = rmsnorm_forward(&x);
    let logits = matmul(&yf, &params.unembed, false)?;

    // Cross-entropy in nats, mean over positions, and its gradient.
    let pos_scale = T::cast(weight / n as f64);
    let mut loss = 0.0f64;
    let mut dlogits = SeqMatrix::<T>::zeros(n, cfg.vocab);
    for i in 0..n {
        let row = logits.row(i);
        let mut max = row[0];
        for &l in row {
            if l > max {
                max = l;
            }
        }
        let mut z = T::zero();
        for &l in row {
            z += (l - max).exp();
        }
        let lse = max + z.ln();
        loss += (lse - row[targets[i]]).to_f64();
        let drow = dlogits.row_mut(i);
        for (a, (&l, out)) in row.iter().zip(drow.iter_mut()).enumerate() {
            let mut g = (l - max).exp() / z;
            if a == targets[i] {
                g -= T::one();
            }
            *out = g * pos_scale;
        }
    }
    loss /= n as f64;

    // Backward.
    grads.unembed.add_scaled(&matmul_transpose_a(&yf, &dlogits)?, T::one())?;
    let dyf = matmul(&dlogits, &params.unembed, true)?;
    let mut dx = rmsnorm_backward(&yf, &invf, &dyf);
    for ((block, tape), grad_block) in params
        .blocks
        .iter()
        .zip(&tapes)
        .zip(&mut grads.blocks)
        .rev()
    {
        // MLP half: x_out = x_mid + relu(n2 · w1)² · w2.
        let mut act = tape.relu.clone();
        for v in act.data_mut() {
            *v = *v * *v;
        }
        grad_block.w2.add_scaled(&matmul_transpose_a(&act, &dx)?, T::one())?;
        let da = matmul(&dx, &block.w2, true)?;
        let mut du = da;
        let two = T::cast(2.0);
        for (g, &r) in du.data_mut().iter_mut().zip(tape.relu.data()) {
            *g = *g * two * r;
        }
        grad_block.w1.add_scaled(&matmul_transpose_a(&tape.n2, &du)?, T::one())?;
        let dn2 = matmul(&du, &block.w1, true)?;
        dx.add_scaled(&rmsnorm_backward(&tape.n2, &tape.inv2, &dn2), T::one())?;
        // Attention half: x_mid = x_in + attn(n1).
        let (dn1, attn_grads) = match &tape.attn {
            AttnTape::Dense(t) => dense_backward(t, &block.attn, &dx)?,
            AttnTape::Lighthouse(t) => lighthouse_backward(t, &block.attn, &dx)?,
        };
        for h in 0..block.attn.heads() {
            grad_block.attn.w_q[h].add_scaled(&attn_grads.w_q[h], T::one())?;
            grad_block.attn.w_k[h].add_scaled(&attn_grads.w_k[h], T::one())?;
            grad_block.attn.w_v[h].add_scaled(&attn_grads.w_v[h], T::one())?;
        }
        grad_block.attn.w_o.add_scaled(&attn_grads.w_o, T::one())?;
        dx.add_scaled(&rmsnorm_backward(&tape.n1, &tape.inv1, &dn1), T::one())?;
    }
    for i in 0..n {
        let src = dx.row(i).to_vec();
        for (out, &g) in grads.pos.row_mut(i).iter_mut().zip(&src) {
            *out += g;
        }
        for (out, &g) in grads.embed.row_mut(inputs[i]).iter_mut().zip(&src) {
            *out += g;
        }
    }
    Ok(loss)
}
