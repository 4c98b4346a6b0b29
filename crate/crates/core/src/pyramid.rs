//! Pooling pyramid over the projected Q/K/V streams.
//!
//! Level 0 is the raw per-token sequence; level `l` halves-or-more the
//! resolution by averaging disjoint windows of `p^l` consecutive tokens.
//! All three streams are pooled with the same geometry, so an entry `(l, i)`
//! means the same token span whether it is read as a query or as a key/value.

use crate::error::{Error, Result};
use crate::numerics::SeqMatrix;
use crate::scalar::Scalar;

/// How the selection stage turns scores into an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionVariant {
    /// Coarse-to-fine descent: keep every coarsest entry, repeatedly expand
    /// the best `k` entries one level down. The default.
    HierarchicalDescent,
    /// One top-k over both score streams across all levels at once.
    FlatJoint,
}

/// Which base scorer ranks pyramid entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    /// L2 norm of the projected query row (QK stream) and key row (KQ stream).
    ProjectionNorm,
}

/// Geometry and selection parameters for one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct LighthouseConfig {
    /// Sequence length N.
    pub seq_len: usize,
    /// Per-head projection width d.
    pub head_dim: usize,
    /// Pooling factor p between adjacent levels.
    pub pool_factor: usize,
    /// Number of pyramid levels L (level 0 plus L-1 pooled levels).
    pub levels: usize,
    /// Selection budget k per descent step (or total, for the flat variant).
    pub budget_k: usize,
    /// Chunk width for stratified top-k.
    pub chunk_size: usize,
    /// Per-chunk retention buffer for stratified top-k.
    pub buffer_m: usize,
    pub variant: SelectionVariant,
    pub scorer: ScorerKind,
    /// Force level-0 entries for early positions no selected span writes to.
    pub prefix_coverage: bool,
}

impl LighthouseConfig {
    /// Config with the default selection machinery (descent, projection-norm
    /// scoring, 2048/128 chunking, prefix coverage on).
    pub fn new(seq_len: usize, head_dim: usize, pool_factor: usize, levels: usize, budget_k: usize) -> Self {
        LighthouseConfig {
            seq_len,
            head_dim,
            pool_factor,
            levels,
            budget_k,
            chunk_size: 2048,
            buffer_m: 128,
            variant: SelectionVariant::HierarchicalDescent,
            scorer: ScorerKind::ProjectionNorm,
            prefix_coverage: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("head_dim must be at least 1".into()));
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.levels == 1 {
            if self.pool_factor == 0 {
                return Err(Error::Config("pool_factor must be at least 1".into()));
            }
        } else if self.pool_factor < 2 {
            return Err(Error::Config(format!(
                "pool_factor must be at least 2 when levels > 1, got {}",
                self.pool_factor
            )));
        }
        let stride = self.coarsest_stride()?;
        if self.seq_len % stride != 0 {
            return Err(Error::Config(format!(
                "seq_len {} is not divisible by pool_factor^(levels-1) = {stride}",
                self.seq_len
            )));
        }
        if self.levels > 1 && self.budget_k == 0 {
            // An oversized budget is clamped with a warning at selection
            // time, never rejected here.
            return Err(Error::Config("budget_k must be at least 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be at least 1".into()));
        }
        if self.buffer_m == 0 || self.buffer_m > self.chunk_size {
            return Err(Error::Config(format!(
                "buffer_m must be in [1, chunk_size]; got {} with chunk_size {}",
                self.buffer_m, self.chunk_size
            )));
        }
        Ok(())
    }

    /// `p^(levels-1)`, the span width of a coarsest-level entry.
    pub fn coarsest_stride(&self) -> Result<usize> {
        pow_usize(self.pool_factor, self.levels - 1)
    }

    /// Number of entries on the coarsest level.
    pub fn coarsest_len(&self) -> Result<usize> {
        Ok(self.seq_len / self.coarsest_stride()?)
    }

    /// Number of entries on `level`.
    pub fn level_len(&self, level: usize) -> Result<usize> {
        if level >= self.levels {
            return Err(Error::Contract(format!(
                "level {level} out of range (levels = {})",
                self.levels
            )));
        }
        Ok(self.seq_len / pow_usize(self.pool_factor, level)?)
    }

    /// Total entries across all levels.
    pub fn total_entries(&self) -> Result<usize> {
        let mut total = 0usize;
        for l in 0..self.levels {
            total += self.level_len(l)?;
        }
        Ok(total)
    }
}

pub(crate) fn pow_usize(base: usize, exp: usize) -> Result<usize> {
    if exp == 0 {
        return Ok(1);
    }
    let mut acc: usize = 1;
    for _ in 0..exp {
        acc = acc
            .checked_mul(base)
            .ok_or_else(|| Error::Config(format!("{base}^{exp} overflows usize")))?;
    }
    Ok(acc)
}

/// Base-position window `[i * p^l, (i+1) * p^l - 1]` of entry `(l, i)`.
pub fn window_bounds(level: usize, i: usize, pool_factor: usize) -> Result<(usize, usize)> {
    let width = pow_usize(pool_factor, level)?;
    let start = i
        .checked_mul(width)
        .ok_or_else(|| Error::Config(format!("window start overflows for ({level}, {i})")))?;
    Ok((start, start + width - 1))
}

/// The three pooled streams. Level 0 aliases the caller's projections; only
/// the coarser levels are materialized.
#[derive(Debug)]
pub struct Pyramid<'a, T> {
    q0: &'a SeqMatrix<T>,
    k0: &'a SeqMatrix<T>,
    v0: &'a SeqMatrix<T>,
    coarse: Vec<PoolLevel<T>>,
    pub seq_len: usize,
    pub pool_factor: usize,
    pub levels: usize,
}

#[derive(Debug)]
struct PoolLevel<T> {
    q: SeqMatrix<T>,
    k: SeqMatrix<T>,
    v: SeqMatrix<T>,
}

impl<'a, T: Scalar> Pyramid<'a, T> {
    pub fn q(&self, level: usize) -> &SeqMatrix<T> {
        if level == 0 {
            self.q0
        } else {
            &self.coarse[level - 1].q
        }
    }

    pub fn k(&self, level: usize) -> &SeqMatrix<T> {
        if level == 0 {
            self.k0
        } else {
            &self.coarse[level - 1].k
        }
    }

    pub fn v(&self, level: usize) -> &SeqMatrix<T> {
        if level == 0 {
            self.v0
        } else {
            &self.coarse[level - 1].v
        }
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.q(level).rows()
    }

    pub fn total_entries(&self) -> usize {
        (0..self.levels).map(|l| self.level_len(l)).sum()
    }
}

/// Build the mean pyramid for one head's projections.
///
/// Each coarser level pools its parent level: row `i` of level `l` is the
/// arithmetic mean of rows `i*p ..= i*p + p - 1` of level `l-1`, summed in
/// ascending row order.
pub fn build_pyramid<'a, T: Scalar>(
    q: &'a SeqMatrix<T>,
    k: &'a SeqMatrix<T>,
    v: &'a SeqMatrix<T>,
    cfg: &LighthouseConfig,
) -> Result<Pyramid<'a, T>> {
    cfg.validate()?;
    for (name, m) in [("q", q), ("k", k), ("v", v)] {
        if m.shape() != (cfg.seq_len, cfg.head_dim) {
            return Err(Error::shape(
                "build_pyramid",
                format!("{name} {}x{}", m.rows(), m.cols()),
                format!("{}x{}", cfg.seq_len, cfg.head_dim),
            ));
        }
    }
    let mut coarse = Vec::with_capacity(cfg.levels - 1);
    for level in 1..cfg.levels {
        let (pq, pk, pv) = {
            let prev = |stream: usize| -> &SeqMatrix<T> {
                if level == 1 {
                    [q, k, v][stream]
                } else {
                    let lvl: &PoolLevel<T> = &coarse[level - 2];
                    [&lvl.q, &lvl.k, &lvl.v][stream]
                }
            };
            (
                pool_once(prev(0), cfg.pool_factor)?,
                pool_once(prev(1), cfg.pool_factor)?,
                pool_once(prev(2), cfg.pool_factor)?,
            )
        };
        coarse.push(PoolLevel { q: pq, k: pk, v: pv });
    }
    Ok(Pyramid {
        q0: q,
        k0: k,
        v0: v,
        coarse,
        seq_len: cfg.seq_len,
        pool_factor: cfg.pool_factor,
        levels: cfg.levels,
    })
}

fn pool_once<T: Scalar>(input: &SeqMatrix<T>, p: usize) -> Result<SeqMatrix<T>> {
    if input.rows() % p != 0 {
        return Err(Error::Contract(format!(
            "pool_once: {} rows not divisible by {p}",
            input.rows()
        )));
    }
    let out_rows = input.rows() / p;
    let cols = input.cols();
    let mut out = SeqMatrix::zeros(out_rows, cols);
    let divisor = T::cast(p as f64);
    for i in 0..out_rows {
        let or = out.row_mut(i);
        for j in 0..p {
            let ir = input.row(i * p + j);
            for c in 0..cols {
                or[c] += ir[c];
            }
        }
        for c in 0..cols {
            or[c] /= divisor;
        }
    }
    Ok(out)
}

/// Adjoint of the pyramid build for one stream.
///
/// `level_grads[l]` holds the upstream gradient of every level-`l` entry
/// (N/p^l rows); the result is the gradient of the level-0 stream. An entry
/// gradient `g` at level `l` contributes `g / p^l` to each of its `p^l`
/// window members; contributions accumulate level-ascending.
pub fn pool_backward<T: Scalar>(level_grads: &[SeqMatrix<T>], cfg: &LighthouseConfig) -> Result<SeqMatrix<T>> {
    cfg.validate()?;
    if level_grads.len() != cfg.levels {
        return Err(Error::Contract(format!(
            "pool_backward: expected {} level gradients, got {}",
            cfg.levels,
            level_grads.len()
        )));
    }
    for (l, g) in level_grads.iter().enumerate() {
        if g.shape() != (cfg.level_len(l)?, cfg.head_dim) {
            return Err(Error::shape(
                "pool_backward",
                format!("level {l}: {}x{}", g.rows(), g.cols()),
                format!("{}x{}", cfg.level_len(l)?, cfg.head_dim),
            ));
        }
    }
    let mut out = level_grads[0].clone();
    for level in 1..cfg.levels {
        let width = pow_usize(cfg.pool_factor, level)?;
        let share = T::cast(width as f64);
        let g = &level_grads[level];
        for i in 0..g.rows() {
            let gr = g.row(i);
            for j in 0..width {
                let or = out.row_mut(i * width + j);
                for c in 0..gr.len() {
                    or[c] += gr[c] / share;
                }
            }
        }
    }
    Ok(out)
}
