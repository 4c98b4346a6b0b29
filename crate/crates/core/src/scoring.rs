//! Parameter-free scoring of pyramid entries.
//!
//! Two score streams rank the same entries from opposite directions: the QK
//! stream scores entry `i` by the norm of its query row, the KQ stream by the
//! norm of its key row. Coarser levels take the windowed max of the level-0
//! scores, so a coarse entry is worth exactly its best descendant.

use crate::error::{Error, Result};
use crate::numerics::SeqMatrix;
use crate::pyramid::{LighthouseConfig, ScorerKind};
use crate::scalar::Scalar;

/// Per-level scores for both streams: `qk[l][i]` and `kq[l][i]`.
#[derive(Debug, Clone)]
pub struct ScoreSet<T> {
    pub qk: Vec<Vec<T>>,
    pub kq: Vec<Vec<T>>,
}

impl<T: Scalar> ScoreSet<T> {
    pub fn levels(&self) -> usize {
        self.qk.len()
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.qk[level].len()
    }

    /// Combined score used to pick descent parents: max of the two streams.
    #[inline]
    pub fn combined(&self, level: usize, i: usize) -> T {
        let a = self.qk[level][i];
        let b = self.kq[level][i];
        if a >= b {
            a
        } else {
            b
        }
    }

    /// Stream whose score wins `combined` (QK on ties).
    pub fn winning_stream(&self, level: usize, i: usize) -> Stream {
        if self.qk[level][i] >= self.kq[level][i] {
            Stream::Qk
        } else {
            Stream::Kq
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Qk,
    Kq,
}

/// Base scorer interface; implementations rank level-0 entries from the
/// per-head projections. Swappable so tests can wrap or replace the shipped
/// scorer; only the projection-norm scorer is built in.
pub trait Scorer<T: Scalar> {
    /// Returns `(qk_scores, kq_scores)` for the N level-0 entries.
    fn base_scores(&self, q0: &SeqMatrix<T>, k0: &SeqMatrix<T>) -> Result<(Vec<T>, Vec<T>)>;
}

/// QK score = l2 norm of the query row; KQ score = l2 norm of the key row.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectionNorm;

impl<T: Scalar> Scorer<T> for ProjectionNorm {
    fn base_scores(&self, q0: &SeqMatrix<T>, k0: &SeqMatrix<T>) -> Result<(Vec<T>, Vec<T>)> {
        if q0.shape() != k0.shape() {
            return Err(Error::shape(
                "base_scores",
                format!("{}x{}", q0.rows(), q0.cols()),
                format!("{}x{}", k0.rows(), k0.cols()),
            ));
        }
        let norms = |m: &SeqMatrix<T>| -> Result<Vec<T>> {
            let mut out = Vec::with_capacity(m.rows());
            for r in 0..m.rows() {
                let mut acc = T::zero();
                for &v in m.row(r) {
                    acc += v * v;
                }
                let norm = acc.sqrt();
                if !norm.is_finite() {
                    return Err(Error::NonFinite(format!("base_scores: row {r}")));
                }
                out.push(norm);
            }
            Ok(out)
        };
        Ok((norms(q0)?, norms(k0)?))
    }
}

/// Base scores for the configured scorer kind.
pub fn base_scores<T: Scalar>(
    q0: &SeqMatrix<T>,
    k0: &SeqMatrix<T>,
    kind: ScorerKind,
) -> Result<(Vec<T>, Vec<T>)> {
    match kind {
        ScorerKind::ProjectionNorm => ProjectionNorm.base_scores(q0, k0),
    }
}

/// Extend base scores to every pyramid level by windowed max pooling.
///
/// Built level from level; max is associative, so this equals taking the max
/// over the full base window directly (exactly, no rounding).
pub fn pooled_scores<T: Scalar>(
    base_qk: &[T],
    base_kq: &[T],
    cfg: &LighthouseConfig,
) -> Result<ScoreSet<T>> {
    cfg.validate()?;
    if base_qk.len() != cfg.seq_len || base_kq.len() != cfg.seq_len {
        return Err(Error::shape(
            "pooled_scores",
            format!("{} / {} scores", base_qk.len(), base_kq.len()),
            format!("{}", cfg.seq_len),
        ));
    }
    for (i, v) in base_qk.iter().chain(base_kq.iter()).enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("pooled_scores: score {i}")));
        }
    }
    let pool = |base: &[T]| -> Vec<Vec<T>> {
        let mut levels = Vec::with_capacity(cfg.levels);
        levels.push(base.to_vec());
        for l in 1..cfg.levels {
            let prev: &Vec<T> = &levels[l - 1];
            let next: Vec<T> = prev
                .chunks(cfg.pool_factor)
                .map(|w| {
                    let mut best = w[0];
                    for &v in &w[1..] {
                        if v > best {
                            best = v;
                        }
                    }
                    best
                })
                .collect();
            levels.push(next);
        }
        levels
    };
    Ok(ScoreSet {
        qk: pool(base_qk),
        kq: pool(base_kq),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SplitMix64;

    #[test]
    fn norm_of_three_four_is_five() {
        let q = SeqMatrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let k = SeqMatrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let (qk, kq) = base_scores(&q, &k, ScorerKind::ProjectionNorm).unwrap();
        assert_eq!(qk[0], 5.0);
        assert_eq!(kq[0], 0.0);
    }

    #[test]
    fn norms_match_loop_oracle() {
        let mut rng = SplitMix64::new(3);
        let q = SeqMatrix::<f64>::gaussian(16, 5, 1.0, &mut rng);
        let k = SeqMatrix::<f64>::gaussian(16, 5, 1.0, &mut rng);
        let (qk, kq) = base_scores(&q, &k, ScorerKind::ProjectionNorm).unwrap();
        for r in 0..16 {
            let mut sq = 0.0;
            let mut sk = 0.0;
            for c in 0..5 {
                sq += q.get(r, c) * q.get(r, c);
                sk += k.get(r, c) * k.get(r, c);
            }
            assert!((qk[r] - sq.sqrt()).abs() < 1e-12);
            assert!((kq[r] - sk.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_scores_are_windowed_maxes() {
        let cfg = LighthouseConfig::new(8, 1, 2, 3, 2);
        let base: Vec<f64> = vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let scores = pooled_scores(&base, &base, &cfg).unwrap();
        assert_eq!(scores.qk[1], vec![3.0, 4.0, 9.0, 6.0]);
        assert_eq!(scores.qk[2], vec![4.0, 9.0]);
    }

    #[test]
    fn max_composition_is_exact() {
        let cfg = LighthouseConfig::new(64, 1, 4, 3, 2);
        let mut rng = SplitMix64::new(4);
        let base: Vec<f64> = (0..64).map(|_| rng.next_unit::<f64>()).collect();
        let scores = pooled_scores(&base, &base, &cfg).unwrap();
        for i in 0..scores.level_len(2) {
            let direct = base[i * 16..(i + 1) * 16]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(scores.qk[2][i], direct);
        }
    }

    #[test]
    fn monotone_transform_preserves_ranking() {
        let cfg = LighthouseConfig::new(16, 1, 2, 3, 2);
        let mut rng = SplitMix64::new(5);
        let base: Vec<f64> = (0..16).map(|_| rng.next_unit::<f64>()).collect();
        let mapped: Vec<f64> = base.iter().map(|v| 3.0 * v + 1.0).collect();
        let a = pooled_scores(&base, &base, &cfg).unwrap();
        let b = pooled_scores(&mapped, &mapped, &cfg).unwrap();
        for l in 0..cfg.levels {
            let mut order_a: Vec<usize> = (0..a.level_len(l)).collect();
            let mut order_b = order_a.clone();
            order_a.sort_by(|&x, &y| a.qk[l][y].partial_cmp(&a.qk[l][x]).unwrap().then(x.cmp(&y)));
            order_b.sort_by(|&x, &y| b.qk[l][y].partial_cmp(&b.qk[l][x]).unwrap().then(x.cmp(&y)));
            assert_eq!(order_a, order_b);
        }
    }

    #[test]
    fn rejects_non_finite_scores() {
        let cfg = LighthouseConfig::new(4, 1, 2, 2, 1);
        let base = vec![1.0, f64::INFINITY, 0.0, 0.0];
        assert!(matches!(
            pooled_scores(&base, &base, &cfg),
            Err(Error::NonFinite(_))
        ));
    }
}
