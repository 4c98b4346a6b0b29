//! Full multi-head attention layers: the sparse pyramid-selection path and
//! the dense baseline, each with forward and analytic backward passes.
//!
//! Per head the sparse path runs: project, pool into the pyramid, score,
//! select, gather, attend over the sub-sequence, scatter back. Heads are
//! concatenated and passed through a shared output projection. The backward
//! pass treats the selection index and all scores as constants — scores see
//! no gradient, so the top-k never needs a straight-through surrogate.

use crate::attention::{attend_subsequence, gather, gather_backward, sdpa_backward, sdpa_reference};
use crate::error::{Error, Result};
use crate::numerics::rng::SplitMix64;
use crate::numerics::{matmul, matmul_transpose_a, SeqMatrix};
use crate::pyramid::{build_pyramid, pool_backward, LighthouseConfig};
use crate::scalar::Scalar;
use crate::scatter::{scatter_back, scatter_backward};
use crate::scoring::{base_scores, pooled_scores};
use crate::selection::{select_indices, SelectionIndex};

/// Projections for one multi-head attention layer: per-head W_Q, W_K, W_V
/// (d_model × d) and a shared output projection W_O (H·d × d_model).
#[derive(Debug, Clone)]
pub struct AttentionLayerParams<T> {
    pub w_q: Vec<SeqMatrix<T>>,
    pub w_k: Vec<SeqMatrix<T>>,
    pub w_v: Vec<SeqMatrix<T>>,
    pub w_o: SeqMatrix<T>,
}

/// Gradients with the same shapes as [`AttentionLayerParams`].
pub type AttentionLayerGrads<T> = AttentionLayerParams<T>;

impl<T: Scalar> AttentionLayerParams<T> {
    /// Gaussian init scaled by 1/sqrt(fan-in).
    pub fn init(d_model: usize, heads: usize, head_dim: usize, rng: &mut SplitMix64) -> Self {
        let proj_std = 1.0 / (d_model as f64).sqrt();
        let out_std = 1.0 / ((heads * head_dim) as f64).sqrt();
        AttentionLayerParams {
            w_q: (0..heads).map(|_| SeqMatrix::gaussian(d_model, head_dim, proj_std, rng)).collect(),
            w_k: (0..heads).map(|_| SeqMatrix::gaussian(d_model, head_dim, proj_std, rng)).collect(),
            w_v: (0..heads).map(|_| SeqMatrix::gaussian(d_model, head_dim, proj_std, rng)).collect(),
            w_o: SeqMatrix::gaussian(heads * head_dim, d_model, out_std, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        AttentionLayerParams {
            w_q: self.w_q.iter().map(|m| SeqMatrix::zeros(m.rows(), m.cols())).collect(),
            w_k: self.w_k.iter().map(|m| SeqMatrix::zeros(m.rows(), m.cols())).collect(),
            w_v: self.w_v.iter().map(|m| SeqMatrix::zeros(m.rows(), m.cols())).collect(),
            w_o: SeqMatrix::zeros(self.w_o.rows(), self.w_o.cols()),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn validate(&self, d_model: usize, head_dim: usize) -> Result<()> {
        let h = self.heads();
        if h == 0 {
            return Err(Error::Config("params must have at least one head".into()));
        }
        if self.w_k.len() != h || self.w_v.len() != h {
            return Err(Error::Contract(format!(
                "params head counts disagree: {} / {} / {}",
                h,
                self.w_k.len(),
                self.w_v.len()
            )));
        }
        for stream in [&self.w_q, &self.w_k, &self.w_v] {
            for m in stream {
                if m.shape() != (d_model, head_dim) {
                    return Err(Error::shape(
                        "params",
                        format!("{}x{}", m.rows(), m.cols()),
                        format!("{d_model}x{head_dim}"),
                    ));
                }
            }
        }
        if self.w_o.shape() != (h * head_dim, d_model) {
            return Err(Error::shape(
                "params w_o",
                format!("{}x{}", self.w_o.rows(), self.w_o.cols()),
                format!("{}x{d_model}", h * head_dim),
            ));
        }
        Ok(())
    }
}

/// Per-head intermediates saved by the sparse forward pass. The full-length
/// projections and the subsequence output are not kept: scatter is linear in
/// its input and the pooled gradients re-enter through `gather_backward`.
#[derive(Debug, Clone)]
struct LighthouseHeadTape<T> {
    index: SelectionIndex,
    gathered_q: SeqMatrix<T>,
    gathered_k: SeqMatrix<T>,
    gathered_v: SeqMatrix<T>,
}

/// Saved intermediates for [`lighthouse_backward`].
#[derive(Debug, Clone)]
pub struct LighthouseTape<T> {
    x: SeqMatrix<T>,
    heads: Vec<LighthouseHeadTape<T>>,
    concat: SeqMatrix<T>,
    cfg: LighthouseConfig,
}

impl<T> LighthouseTape<T> {
    /// The per-head selection produced by the forward pass.
    pub fn indices(&self) -> impl Iterator<Item = &SelectionIndex> {
        self.heads.iter().map(|h| &h.index)
    }
}

/// Per-head intermediates saved by the dense forward pass.
#[derive(Debug, Clone)]
struct DenseHeadTape<T> {
    q: SeqMatrix<T>,
    k: SeqMatrix<T>,
    v: SeqMatrix<T>,
}

/// Saved intermediates for [`dense_backward`].
#[derive(Debug, Clone)]
pub struct DenseTape<T> {
    x: SeqMatrix<T>,
    heads: Vec<DenseHeadTape<T>>,
    concat: SeqMatrix<T>,
}

fn write_concat_block<T: Scalar>(concat: &mut SeqMatrix<T>, block: &SeqMatrix<T>, head: usize, head_dim: usize) {
    for r in 0..block.rows() {
        let dst = &mut concat.row_mut(r)[head * head_dim..(head + 1) * head_dim];
        dst.copy_from_slice(block.row(r));
    }
}

fn read_concat_block<T: Scalar>(concat: &SeqMatrix<T>, head: usize, head_dim: usize) -> SeqMatrix<T> {
    let mut block = SeqMatrix::zeros(concat.rows(), head_dim);
    for r in 0..concat.rows() {
        block
            .row_mut(r)
            .copy_from_slice(&concat.row(r)[head * head_dim..(head + 1) * head_dim]);
    }
    block
}

/// Sparse multi-head attention forward pass.
///
/// Selection is recomputed per head from that head's projections. With one
/// level the pipeline degenerates to the dense layer: selection keeps every
/// base position in order, gather and scatter are row copies, and the inner
/// attention call is the same dense routine.
pub fn lighthouse_forward<T: Scalar>(
    x: &SeqMatrix<T>,
    params: &AttentionLayerParams<T>,
    cfg: &LighthouseConfig,
) -> Result<(SeqMatrix<T>, LighthouseTape<T>)> {
    lighthouse_forward_with(x, params, cfg, None)
}

/// [`lighthouse_forward`] with optional frozen per-head selection indices,
/// used to evaluate the pipeline as a fixed-selection function of the input
/// (the function the backward pass differentiates).
pub fn lighthouse_forward_with<T: Scalar>(
    x: &SeqMatrix<T>,
    params: &AttentionLayerParams<T>,
    cfg: &LighthouseConfig,
    frozen: Option<&[SelectionIndex]>,
) -> Result<(SeqMatrix<T>, LighthouseTape<T>)> {
    cfg.validate()?;
    let d_model = x.cols();
    params.validate(d_model, cfg.head_dim)?;
    if x.rows() != cfg.seq_len {
        return Err(Error::shape(
            "lighthouse_forward",
            format!("{}x{}", x.rows(), x.cols()),
            format!("{}x{d_model}", cfg.seq_len),
        ));
    }
    if let Some(f) = frozen {
        if f.len() != params.heads() {
            return Err(Error::Contract(format!(
                "lighthouse_forward: {} frozen indices for {} heads",
                f.len(),
                params.heads()
            )));
        }
    }
    let h = params.heads();
    let d = cfg.head_dim;
    let mut concat = SeqMatrix::zeros(cfg.seq_len, h * d);
    let mut head_tapes = Vec::with_capacity(h);
    for head in 0..h {
        let q = matmul(x, &params.w_q[head], false)?;
        let k = matmul(x, &params.w_k[head], false)?;
        let v = matmul(x, &params.w_v[head], false)?;
        let pyr = build_pyramid(&q, &k, &v, cfg)?;
        let index = match frozen {
            Some(f) => f[head].clone(),
            None => {
                let (bq, bk) = base_scores(pyr.q(0), pyr.k(0), cfg.scorer)?;
                let scores = pooled_scores(&bq, &bk, cfg)?;
                select_indices(&scores, cfg)?
            }
        };
        let g = gather(&pyr, &index)?;
        let o_sub = attend_subsequence(&g)?;
        let (o_head, _holes) = scatter_back(&o_sub, &index, cfg)?;
        write_concat_block(&mut concat, &o_head, head, d);
        head_tapes.push(LighthouseHeadTape {
            index,
            gathered_q: g.q,
            gathered_k: g.k,
            gathered_v: g.v,
        });
    }
    let out = matmul(&concat, &params.w_o, false)?;
    let tape = LighthouseTape {
        x: x.clone(),
        heads: head_tapes,
        concat,
        cfg: cfg.clone(),
    };
    Ok((out, tape))
}

/// Backward pass of [`lighthouse_forward`]. The selection index and all
/// scores are constants of the differentiated function.
pub fn lighthouse_backward<T: Scalar>(
    tape: &LighthouseTape<T>,
    params: &AttentionLayerParams<T>,
    grad_out: &SeqMatrix<T>,
) -> Result<(SeqMatrix<T>, AttentionLayerGrads<T>)> {
    let cfg = &tape.cfg;
    let d_model = tape.x.cols();
    params.validate(d_model, cfg.head_dim)?;
    if tape.heads.len() != params.heads() {
        return Err(Error::Contract(format!(
            "lighthouse_backward: tape has {} heads, params have {}",
            tape.heads.len(),
            params.heads()
        )));
    }
    if grad_out.shape() != (cfg.seq_len, d_model) {
        return Err(Error::shape(
            "lighthouse_backward",
            format!("{}x{}", grad_out.rows(), grad_out.cols()),
            format!("{}x{d_model}", cfg.seq_len),
        ));
    }
    let mut grads = params.zeros_like();
    // Output projection: out = concat · W_O.
    grads.w_o = matmul_transpose_a(&tape.concat, grad_out)?;
    let d_concat = matmul(grad_out, &params.w_o, true)?;
    let mut dx = SeqMatrix::zeros(cfg.seq_len, d_model);
    for (head, ht) in tape.heads.iter().enumerate() {
        let d_head = read_concat_block(&d_concat, head, cfg.head_dim);
        // Scatter adjoint: gather write-range gradient sums per entry.
        let d_o_sub = scatter_backward(&d_head, &ht.index, cfg)?;
        // Attention backward over the gathered sub-sequence.
        let (d_gq, d_gk, d_gv) =
            sdpa_backward(&ht.gathered_q, &ht.gathered_k, &ht.gathered_v, &d_o_sub, true)?;
        // Gather adjoint: per-level pyramid gradients.
        let pyr_grads = gather_backward(&d_gq, &d_gk, &d_gv, &ht.index)?;
        // Pooling adjoint: spread each coarse gradient over its window.
        let dq = pool_backward(&pyr_grads.q, cfg)?;
        let dk = pool_backward(&pyr_grads.k, cfg)?;
        let dv = pool_backward(&pyr_grads.v, cfg)?;
        // Projection adjoints, accumulated q then k then v.
        grads.w_q[head] = matmul_transpose_a(&tape.x, &dq)?;
        grads.w_k[head] = matmul_transpose_a(&tape.x, &dk)?;
        grads.w_v[head] = matmul_transpose_a(&tape.x, &dv)?;
        dx.add_scaled(&matmul(&dq, &params.w_q[head], true)?, T::one())?;
        dx.add_scaled(&matmul(&dk, &params.w_k[head], true)?, T::one())?;
        dx.add_scaled(&matmul(&dv, &params.w_v[head], true)?, T::one())?;
    }
    Ok((dx, grads))
}

/// Dense multi-head causal attention forward pass (the baseline and the
/// resume path).
pub fn dense_forward<T: Scalar>(
    x: &SeqMatrix<T>,
    params: &AttentionLayerParams<T>,
) -> Result<(SeqMatrix<T>, DenseTape<T>)> {
    let d_model = x.cols();
    let h = params.heads();
    if h == 0 {
        return Err(Error::Config("params must have at least one head".into()));
    }
    let d = params.w_q[0].cols();
    params.validate(d_model, d)?;
    let n = x.rows();
    let mut concat = SeqMatrix::zeros(n, h * d);
    let mut head_tapes = Vec::with_capacity(h);
    for head in 0..h {
        let q = matmul(x, &params.w_q[head], false)?;
        let k = matmul(x, &params.w_k[head], false)?;
        let v = matmul(x, &params.w_v[head], false)?;
        let o_head = sdpa_reference(&q, &k, &v, true)?;
        write_concat_block(&mut concat, &o_head, head, d);
        head_tapes.push(DenseHeadTape { q, k, v });
    }
    let out = matmul(&concat, &params.w_o, false)?;
    let tape = DenseTape {
        x: x.clone(),
        heads: head_tapes,
        concat,
    };
    Ok((out, tape))
}

/// Backward pass of [`dense_forward`].
pub fn dense_backward<T: Scalar>(
    tape: &DenseTape<T>,
    params: &AttentionLayerParams<T>,
    grad_out: &SeqMatrix<T>,
) -> Result<(SeqMatrix<T>, AttentionLayerGrads<T>)> {
    let d_model = tape.x.cols();
    let h = params.heads();
    if tape.heads.len() != h {
        return Err(Error::Contract(format!(
            "dense_backward: tape has {} heads, params have {}",
            tape.heads.len(),
            h
        )));
    }
    let d = params.w_q[0].cols();
    params.validate(d_model, d)?;
    let n = tape.x.rows();
    if grad_out.shape() != (n, d_model) {
        return Err(Error::shape(
            "dense_backward",
            format!("{}x{}", grad_out.rows(), grad_out.cols()),
            format!("{n}x{d_model}"),
        ));
    }
    let mut grads = params.zeros_like();
    grads.w_o = matmul_transpose_a(&tape.concat, grad_out)?;
    let d_concat = matmul(grad_out, &params.w_o, true)?;
    let mut dx = SeqMatrix::zeros(n, d_model);
    for (head, ht) in tape.heads.iter().enumerate() {
        let d_head = read_concat_block(&d_concat, head, d);
        let (dq, dk, dv) = sdpa_backward(&ht.q, &ht.k, &ht.v, &d_head, true)?;
        grads.w_q[head] = matmul_transpose_a(&tape.x, &dq)?;
        grads.w_k[head] = matmul_transpose_a(&tape.x, &dk)?;
        grads.w_v[head] = matmul_transpose_a(&tape.x, &dv)?;
        dx.add_scaled(&matmul(&dq, &params.w_q[head], true)?, T::one())?;
        dx.add_scaled(&matmul(&dk, &params.w_k[head], true)?, T::one())?;
        dx.add_scaled(&matmul(&dv, &params.w_v[head], true)?, T::one())?;
    }
    Ok((dx, grads))
}
