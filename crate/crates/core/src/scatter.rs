//! Scatter sub-sequence attention output back to base positions.
//!
//! Entry `(l, i)` writes its output row to the shifted range starting at the
//! last token it summarizes: `[span_end, span_end + p^l - 1]`, clipped to the
//! sequence end. The shift means no base position ever receives a summary
//! containing its own future. Same-level ranges are disjoint and adjacent,
//! so per-position fan-in is at most one entry per level.

use crate::error::{Error, Result};
use crate::numerics::SeqMatrix;
use crate::pyramid::LighthouseConfig;
use crate::scalar::Scalar;
use crate::selection::SelectionIndex;

/// Inclusive base-position range a selected entry writes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteRange {
    pub start: usize,
    pub end: usize,
}

/// Write range per index entry, in index order.
pub fn scatter_ranges(idx: &SelectionIndex, cfg: &LighthouseConfig) -> Result<Vec<WriteRange>> {
    if idx.seq_len != cfg.seq_len || idx.pool_factor != cfg.pool_factor || idx.levels != cfg.levels {
        return Err(Error::Contract(
            "scatter_ranges: index geometry does not match config".into(),
        ));
    }
    Ok(idx
        .entries
        .iter()
        .map(|e| {
            let (start, end) = e.write_range(cfg.seq_len);
            WriteRange { start, end }
        })
        .collect())
}

/// Number of entries writing to each base position.
pub fn contributor_counts(idx: &SelectionIndex, cfg: &LighthouseConfig) -> Result<Vec<usize>> {
    let ranges = scatter_ranges(idx, cfg)?;
    let mut counts = vec![0usize; cfg.seq_len];
    for r in ranges {
        for j in r.start..=r.end {
            counts[j] += 1;
        }
    }
    Ok(counts)
}

/// Sum each entry's output row over its write range.
///
/// Accumulation visits entries coarsest level first, position ascending
/// within a level, so every output cell receives its contributions in one
/// fixed order regardless of how the index was produced. Positions no entry
/// writes to stay zero rows; their count is returned as a diagnostic (it is
/// always 0 when prefix coverage is on).
pub fn scatter_back<T: Scalar>(
    o_sub: &SeqMatrix<T>,
    idx: &SelectionIndex,
    cfg: &LighthouseConfig,
) -> Result<(SeqMatrix<T>, usize)> {
    if o_sub.rows() != idx.len() {
        return Err(Error::Contract(format!(
            "scatter_back: {} output rows for {} index entries",
            o_sub.rows(),
            idx.len()
        )));
    }
    let ranges = scatter_ranges(idx, cfg)?;
    let d = o_sub.cols();
    let mut out = SeqMatrix::zeros(cfg.seq_len, d);
    let mut order: Vec<usize> = (0..idx.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        let ea = &idx.entries[a];
        let eb = &idx.entries[b];
        eb.level.cmp(&ea.level).then(ea.pos.cmp(&eb.pos))
    });
    for m in order {
        let r = ranges[m];
        let src = o_sub.row(m);
        for j in r.start..=r.end {
            for (acc, &s) in out.row_mut(j).iter_mut().zip(src) {
                *acc += s;
            }
        }
    }
    let mut covered = vec![false; cfg.seq_len];
    for r in &ranges {
        for j in r.start..=r.end {
            covered[j] = true;
        }
    }
    let holes = covered.iter().filter(|&&c| !c).count();
    Ok((out, holes))
}

/// Adjoint of [`scatter_back`]: the gradient of entry `m`'s row is the sum
/// of output-gradient rows over its write range, positions ascending.
pub fn scatter_backward<T: Scalar>(
    grad_out: &SeqMatrix<T>,
    idx: &SelectionIndex,
    cfg: &LighthouseConfig,
) -> Result<SeqMatrix<T>> {
    if grad_out.rows() != cfg.seq_len {
        return Err(Error::Contract(format!(
            "scatter_backward: {} gradient rows for seq_len {}",
            grad_out.rows(),
            cfg.seq_len
        )));
    }
    let ranges = scatter_ranges(idx, cfg)?;
    let d = grad_out.cols();
    let mut grad_sub = SeqMatrix::zeros(idx.len(), d);
    for (m, r) in ranges.iter().enumerate() {
        for j in r.start..=r.end {
            for (acc, &g) in grad_sub.row_mut(m).iter_mut().zip(grad_out.row(j)) {
                *acc += g;
            }
        }
    }
    Ok(grad_sub)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SplitMix64;
    use crate::pyramid::build_pyramid;
    use crate::scoring::{base_scores, pooled_scores};
    use crate::selection::{select_indices, SelectionEntry, Provenance};

    fn random_index(cfg: &LighthouseConfig, seed: u64) -> SelectionIndex {
        let mut rng = SplitMix64::new(seed);
        let q = SeqMatrix::<f64>::gaussian(cfg.seq_len, cfg.head_dim, 1.0, &mut rng);
        let k = SeqMatrix::<f64>::gaussian(cfg.seq_len, cfg.head_dim, 1.0, &mut rng);
        let v = SeqMatrix::<f64>::gaussian(cfg.seq_len, cfg.head_dim, 1.0, &mut rng);
        let pyr = build_pyramid(&q, &k, &v, cfg).unwrap();
        let (bq, bk) = base_scores(pyr.q(0), pyr.k(0), cfg.scorer).unwrap();
        let scores = pooled_scores(&bq, &bk, cfg).unwrap();
        select_indices(&scores, cfg).unwrap()
    }

    fn single_entry_index(cfg: &LighthouseConfig, level: usize, pos: usize) -> SelectionIndex {
        SelectionIndex {
            entries: vec![SelectionEntry::new(level, pos, cfg.pool_factor, Provenance::QkScore).unwrap()],
            seq_len: cfg.seq_len,
            pool_factor: cfg.pool_factor,
            levels: cfg.levels,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn range_examples() {
        let cfg = LighthouseConfig::new(16, 2, 2, 3, 2);
        let idx = single_entry_index(&cfg, 0, 5);
        assert_eq!(scatter_ranges(&idx, &cfg).unwrap()[0], WriteRange { start: 5, end: 5 });
        let idx = single_entry_index(&cfg, 1, 0);
        assert_eq!(scatter_ranges(&idx, &cfg).unwrap()[0], WriteRange { start: 1, end: 2 });
        let idx = single_entry_index(&cfg, 2, 1);
        assert_eq!(scatter_ranges(&idx, &cfg).unwrap()[0], WriteRange { start: 7, end: 10 });
    }

    #[test]
    fn last_window_clips_at_sequence_end() {
        let cfg = LighthouseConfig::new(16, 2, 2, 3, 2);
        // (2, 3) spans [12, 15]; unclipped range [15, 18] clips to [15, 15].
        let idx = single_entry_index(&cfg, 2, 3);
        assert_eq!(scatter_ranges(&idx, &cfg).unwrap()[0], WriteRange { start: 15, end: 15 });
    }

    #[test]
    fn single_entry_writes_its_row_to_its_range() {
        let cfg = LighthouseConfig::new(8, 3, 2, 2, 1);
        let idx = single_entry_index(&cfg, 1, 0);
        let o = SeqMatrix::from_vec(1, 3, vec![2.0, 4.0, 8.0]).unwrap();
        let (out, holes) = scatter_back(&o, &idx, &cfg).unwrap();
        assert_eq!(out.row(1), &[2.0, 4.0, 8.0]);
        assert_eq!(out.row(2), &[2.0, 4.0, 8.0]);
        for j in [0, 3, 4, 5, 6, 7] {
            assert_eq!(out.row(j), &[0.0, 0.0, 0.0]);
        }
        assert_eq!(holes, 6);
    }

    #[test]
    fn full_level0_selection_is_identity() {
        let cfg = LighthouseConfig::new(8, 2, 1, 1, 1);
        let idx = random_index(&cfg, 40);
        let mut rng = SplitMix64::new(41);
        let o = SeqMatrix::<f64>::gaussian(8, 2, 1.0, &mut rng);
        let (out, holes) = scatter_back(&o, &idx, &cfg).unwrap();
        assert_eq!(out.data(), o.data());
        assert_eq!(holes, 0);
    }

    #[test]
    fn scatter_matches_accumulation_loop_oracle() {
        for seed in 0..5 {
            let cfg = LighthouseConfig::new(16, 3, 2, 3, 2);
            let idx = random_index(&cfg, 50 + seed);
            let mut rng = SplitMix64::new(60 + seed);
            let o = SeqMatrix::gaussian(idx.len(), 3, 1.0, &mut rng);
            let (out, _) = scatter_back(&o, &idx, &cfg).unwrap();
            // Oracle: per position, sum contributing rows coarsest-first.
            let ranges = scatter_ranges(&idx, &cfg).unwrap();
            for j in 0..cfg.seq_len {
                let mut want = vec![0.0f64; 3];
                let mut contributors: Vec<usize> = (0..idx.len())
                    .filter(|&m| ranges[m].start <= j && j <= ranges[m].end)
                    .collect();
                contributors.sort_by_key(|&m| (usize::MAX - idx.entries[m].level, idx.entries[m].pos));
                for m in contributors {
                    for (w, &s) in want.iter_mut().zip(o.row(m)) {
                        *w += s;
                    }
                }
                for (a, b) in out.row(j).iter().zip(&want) {
                    assert!((a - b).abs() <= 1e-12, "seed {seed} pos {j}");
                }
            }
        }
    }

    #[test]
    fn fan_in_is_between_one_and_levels() {
        for seed in 0..5 {
            let cfg = LighthouseConfig::new(32, 2, 2, 3, 3);
            let idx = random_index(&cfg, 70 + seed);
            let counts = contributor_counts(&idx, &cfg).unwrap();
            for (j, &c) in counts.iter().enumerate() {
                assert!(c >= 1, "seed {seed}: position {j} uncovered");
                assert!(c <= cfg.levels, "seed {seed}: position {j} fan-in {c}");
            }
        }
    }

    #[test]
    fn writes_never_precede_span_end() {
        let cfg = LighthouseConfig::new(32, 2, 2, 3, 3);
        let idx = random_index(&cfg, 80);
        let ranges = scatter_ranges(&idx, &cfg).unwrap();
        for (e, r) in idx.entries.iter().zip(&ranges) {
            assert!(r.start >= e.span_end);
        }
    }

    #[test]
    fn backward_is_exact_adjoint() {
        // Integer-valued data keeps both inner products exact.
        let cfg = LighthouseConfig::new(16, 2, 2, 3, 2);
        let idx = random_index(&cfg, 90);
        let mut rng = SplitMix64::new(91);
        let mut int_matrix = |rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.next_index(17) as f64 - 8.0).collect();
            SeqMatrix::from_vec(rows, cols, data).unwrap()
        };
        let o = int_matrix(idx.len(), 2);
        let g = int_matrix(cfg.seq_len, 2);
        let (out, _) = scatter_back(&o, &idx, &cfg).unwrap();
        let grad_sub = scatter_backward(&g, &idx, &cfg).unwrap();
        let inner = |a: &SeqMatrix<f64>, b: &SeqMatrix<f64>| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
        };
        assert_eq!(inner(&out, &g), inner(&o, &grad_sub));
    }

    #[test]
    fn scatter_is_linear() {
        let cfg = LighthouseConfig::new(16, 2, 2, 3, 2);
        let idx = random_index(&cfg, 92);
        let mut rng = SplitMix64::new(93);
        let a = SeqMatrix::<f64>::gaussian(idx.len(), 2, 1.0, &mut rng);
        let b = SeqMatrix::<f64>::gaussian(idx.len(), 2, 1.0, &mut rng);
        let mut sum = a.clone();
        sum.add_scaled(&b, 2.0).unwrap();
        let (out_sum, _) = scatter_back(&sum, &idx, &cfg).unwrap();
        let (out_a, _) = scatter_back(&a, &idx, &cfg).unwrap();
        let (out_b, _) = scatter_back(&b, &idx, &cfg).unwrap();
        let mut combined = out_a.clone();
        combined.add_scaled(&out_b, 2.0).unwrap();
        for (x, y) in out_sum.data().iter().zip(combined.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn row_count_mismatch_is_contract_error() {
        let cfg = LighthouseConfig::new(16, 2, 2, 3, 2);
        let idx = random_index(&cfg, 94);
        let o = SeqMatrix::<f64>::zeros(idx.len() + 1, 2);
        assert!(matches!(
            scatter_back(&o, &idx, &cfg),
            Err(Error::Contract(_))
        ));
    }
}
