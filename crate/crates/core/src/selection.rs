//! Selection: turns score pyramids into a causally ordered index of entries.
//!
//! The default variant descends the pyramid coarse-to-fine: every coarsest
//! entry is kept, the best `k` entries of the current level are expanded into
//! their `p` children, all children join the index, and the best `k` children
//! descend further. The flat variant runs one top-k over both score streams
//! across all levels at once. Either way the result is re-ordered by causal
//! position so downstream attention can use a plain lower-triangular mask.

use crate::error::{Error, Result};
use crate::pyramid::{pow_usize, window_bounds, LighthouseConfig, SelectionVariant};
use crate::scalar::Scalar;
use crate::scoring::{ScoreSet, Stream};

/// Why an entry is in the index.
///
/// Descent children inherit the stream that made their parent win; for the
/// flat variant it is the stream under which the entry itself was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Member of the always-included coarsest level.
    Coarsest,
    /// Justified by the QK score stream.
    QkScore,
    /// Justified by the KQ score stream.
    KqScore,
    /// Forced in by prefix coverage.
    Forced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionEntry {
    pub level: usize,
    pub pos: usize,
    /// First base position of the pooled span.
    pub span_start: usize,
    /// Last base position of the pooled span; also the causal position.
    pub span_end: usize,
    pub provenance: Provenance,
}

impl SelectionEntry {
    pub fn new(level: usize, pos: usize, pool_factor: usize, provenance: Provenance) -> Result<Self> {
        let (span_start, span_end) = window_bounds(level, pos, pool_factor)?;
        Ok(SelectionEntry {
            level,
            pos,
            span_start,
            span_end,
            provenance,
        })
    }

    /// The base position this entry counts as for causal ordering.
    #[inline]
    pub fn causal_pos(&self) -> usize {
        self.span_end
    }

    /// Output positions this entry's attention row is written to:
    /// `[span_end, span_end + p^level - 1]`, clipped to the sequence end.
    pub fn write_range(&self, seq_len: usize) -> (usize, usize) {
        let width = self.span_end - self.span_start + 1;
        let start = self.span_end;
        let end = (start + width - 1).min(seq_len - 1);
        (start, end)
    }
}

/// A causally ordered set of pyramid entries for one head.
#[derive(Debug, Clone)]
pub struct SelectionIndex {
    pub entries: Vec<SelectionEntry>,
    pub seq_len: usize,
    pub pool_factor: usize,
    pub levels: usize,
    /// Non-fatal events recorded during selection (for example a budget
    /// clamped to the available candidate count).
    pub warnings: Vec<String>,
}

impl SelectionIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().map(|e| (e.level, e.pos))
    }
}

/// Stratified top-k over a score stream.
///
/// The stream is split into consecutive chunks of `chunk_size` (the last may
/// be short); each chunk retains its top `min(m, chunk_len)` ids; the result
/// is the top `k` of the union of those buffers (all of the union if it is
/// smaller than `k`). Ties break toward the smaller id everywhere. Returned
/// ids are in (score desc, id asc) order.
pub fn chunked_topk<T: Scalar>(scores: &[T], k: usize, chunk_size: usize, m: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Contract("chunked_topk: empty candidate stream".into()));
    }
    if chunk_size == 0 {
        return Err(Error::Config("chunked_topk: chunk_size must be at least 1".into()));
    }
    if m == 0 || m > chunk_size {
        return Err(Error::Config(format!(
            "chunked_topk: m must be in [1, chunk_size]; got {m} with chunk_size {chunk_size}"
        )));
    }
    for (i, v) in scores.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("chunked_topk: score {i}")));
        }
    }
    let by_score_then_id = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .expect("scores are finite")
            .then(a.cmp(b))
    };
    let mut union: Vec<usize> = Vec::new();
    let mut start = 0;
    while start < scores.len() {
        let end = (start + chunk_size).min(scores.len());
        let mut ids: Vec<usize> = (start..end).collect();
        ids.sort_unstable_by(by_score_then_id);
        ids.truncate(m.min(end - start));
        union.extend(ids);
        start = end;
    }
    union.sort_unstable_by(by_score_then_id);
    union.truncate(k);
    Ok(union)
}

/// Smallest per-chunk buffer >= `m_cfg` whose union can still hold
/// `min(k, len)` ids. Hierarchical descent runs top-k over short per-level
/// streams where the configured buffer (sized for long flat streams) could
/// starve the budget and silently shrink the index; raising the buffer keeps
/// the per-chunk cap semantics while making the budget attainable.
fn buffer_for_budget(len: usize, chunk_size: usize, m_cfg: usize, k: usize) -> usize {
    let need = k.min(len);
    let union_size = |m: usize| -> usize {
        let mut total = 0;
        let mut start = 0;
        while start < len {
            let end = (start + chunk_size).min(len);
            total += m.min(end - start);
            start = end;
        }
        total
    };
    let mut lo = m_cfg.min(chunk_size).max(1);
    if union_size(lo) >= need {
        return lo;
    }
    let mut hi = chunk_size;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if union_size(mid) >= need {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Order entries by causal position, coarser level first on ties, then by
/// span start. Duplicate `(level, pos)` coordinates are a contract error.
pub fn causal_order(mut entries: Vec<SelectionEntry>) -> Result<Vec<SelectionEntry>> {
    entries.sort_unstable_by(|a, b| {
        a.causal_pos()
            .cmp(&b.causal_pos())
            .then(b.level.cmp(&a.level))
            .then(a.span_start.cmp(&b.span_start))
    });
    for pair in entries.windows(2) {
        if pair[0].level == pair[1].level && pair[0].pos == pair[1].pos {
            return Err(Error::Contract(format!(
                "causal_order: duplicate entry ({}, {})",
                pair[0].level, pair[0].pos
            )));
        }
    }
    Ok(entries)
}

/// Select the attended entries for one head from its score set.
pub fn select_indices<T: Scalar>(scores: &ScoreSet<T>, cfg: &LighthouseConfig) -> Result<SelectionIndex> {
    cfg.validate()?;
    if scores.levels() != cfg.levels {
        return Err(Error::Contract(format!(
            "select_indices: score set has {} levels, config has {}",
            scores.levels(),
            cfg.levels
        )));
    }
    for l in 0..cfg.levels {
        if scores.level_len(l) != cfg.level_len(l)? || scores.kq[l].len() != cfg.level_len(l)? {
            return Err(Error::Contract(format!(
                "select_indices: level {l} has {} scores, expected {}",
                scores.level_len(l),
                cfg.level_len(l)?
            )));
        }
    }
    let mut warnings = Vec::new();
    let mut entries = match cfg.variant {
        SelectionVariant::HierarchicalDescent => select_descent(scores, cfg, &mut warnings)?,
        SelectionVariant::FlatJoint => select_flat(scores, cfg, &mut warnings)?,
    };
    if cfg.prefix_coverage {
        force_prefix_coverage(&mut entries, cfg)?;
    }
    let entries = causal_order(entries)?;
    Ok(SelectionIndex {
        entries,
        seq_len: cfg.seq_len,
        pool_factor: cfg.pool_factor,
        levels: cfg.levels,
        warnings,
    })
}

fn select_descent<T: Scalar>(
    scores: &ScoreSet<T>,
    cfg: &LighthouseConfig,
    warnings: &mut Vec<String>,
) -> Result<Vec<SelectionEntry>> {
    let top = cfg.levels - 1;
    let coarsest_len = cfg.coarsest_len()?;
    let mut entries = Vec::new();
    for i in 0..coarsest_len {
        entries.push(SelectionEntry::new(top, i, cfg.pool_factor, Provenance::Coarsest)?);
    }
    if cfg.levels == 1 {
        return Ok(entries);
    }

    // Parents at the coarsest level: budget k over all coarsest entries.
    let mut k_eff = cfg.budget_k;
    if k_eff > coarsest_len {
        warnings.push(format!(
            "budget {k_eff} clamped to {coarsest_len} coarsest candidates"
        ));
        k_eff = coarsest_len;
    }
    let coarse_scores: Vec<T> = (0..coarsest_len).map(|i| scores.combined(top, i)).collect();
    let m = buffer_for_budget(coarsest_len, cfg.chunk_size, cfg.buffer_m, k_eff);
    let mut parents: Vec<usize> = chunked_topk(&coarse_scores, k_eff, cfg.chunk_size, m)?;
    parents.sort_unstable();

    for level in (0..top).rev() {
        // Every child of every parent joins the index; parents stay too.
        let mut candidates: Vec<usize> = Vec::with_capacity(parents.len() * cfg.pool_factor);
        for &parent in &parents {
            let stream = scores.winning_stream(level + 1, parent);
            let prov = match stream {
                Stream::Qk => Provenance::QkScore,
                Stream::Kq => Provenance::KqScore,
            };
            for c in 0..cfg.pool_factor {
                let pos = parent * cfg.pool_factor + c;
                candidates.push(pos);
                entries.push(SelectionEntry::new(level, pos, cfg.pool_factor, prov)?);
            }
        }
        if level == 0 {
            break;
        }
        let mut k_level = cfg.budget_k;
        if k_level > candidates.len() {
            warnings.push(format!(
                "budget {k_level} clamped to {} candidates at level {level}",
                candidates.len()
            ));
            k_level = candidates.len();
        }
        let cand_scores: Vec<T> = candidates.iter().map(|&i| scores.combined(level, i)).collect();
        let m = buffer_for_budget(candidates.len(), cfg.chunk_size, cfg.buffer_m, k_level);
        let winners = chunked_topk(&cand_scores, k_level, cfg.chunk_size, m)?;
        parents = winners.into_iter().map(|w| candidates[w]).collect();
        parents.sort_unstable();
    }
    Ok(entries)
}

fn select_flat<T: Scalar>(
    scores: &ScoreSet<T>,
    cfg: &LighthouseConfig,
    warnings: &mut Vec<String>,
) -> Result<Vec<SelectionEntry>> {
    // Stream layout: all QK scores level-ascending then position-ascending,
    // followed by all KQ scores in the same order. An entry strong in both
    // streams occupies two slots of the budget; duplicates collapse after
    // the top-k.
    let total = cfg.total_entries()?;
    let mut flat: Vec<T> = Vec::with_capacity(2 * total);
    let mut coords: Vec<(usize, usize, Stream)> = Vec::with_capacity(2 * total);
    for (stream, per_level) in [(Stream::Qk, &scores.qk), (Stream::Kq, &scores.kq)] {
        for (level, level_scores) in per_level.iter().enumerate() {
            for (pos, &s) in level_scores.iter().enumerate() {
                flat.push(s);
                coords.push((level, pos, stream));
            }
        }
    }
    let mut k_eff = cfg.budget_k;
    if k_eff > flat.len() {
        warnings.push(format!("budget {k_eff} clamped to {} scored items", flat.len()));
        k_eff = flat.len();
    }
    let winners = chunked_topk(&flat, k_eff, cfg.chunk_size, cfg.buffer_m)?;

    let mut seen = std::collections::BTreeSet::new();
    let mut entries = Vec::new();
    for w in winners {
        let (level, pos, stream) = coords[w];
        if seen.insert((level, pos)) {
            let prov = match stream {
                Stream::Qk => Provenance::QkScore,
                Stream::Kq => Provenance::KqScore,
            };
            entries.push(SelectionEntry::new(level, pos, cfg.pool_factor, prov)?);
        }
    }
    // Coarsest-level completion: the scaffold every sequence keeps.
    let top = cfg.levels - 1;
    for i in 0..cfg.coarsest_len()? {
        if seen.insert((top, i)) {
            entries.push(SelectionEntry::new(top, i, cfg.pool_factor, Provenance::Coarsest)?);
        }
    }
    Ok(entries)
}

/// Force level-0 entries for base positions in `[0, p^(L-1) - 2]` that no
/// selected entry writes to. Positions from `p^(L-1) - 1` on are always
/// covered by the coarsest scaffold.
fn force_prefix_coverage(entries: &mut Vec<SelectionEntry>, cfg: &LighthouseConfig) -> Result<()> {
    let stride = cfg.coarsest_stride()?;
    if stride < 2 {
        return Ok(());
    }
    let prefix = stride - 1;
    let mut covered = vec![false; prefix];
    for e in entries.iter() {
        let (lo, hi) = e.write_range(cfg.seq_len);
        for j in lo..=hi.min(prefix - 1) {
            covered[j] = true;
        }
    }
    for (j, was) in covered.into_iter().enumerate() {
        if !was {
            entries.push(SelectionEntry::new(0, j, cfg.pool_factor, Provenance::Forced)?);
        }
    }
    Ok(())
}

/// Run selection independently on `shards` contiguous shards of the sequence.
///
/// Each shard sees only its own slice of the score pyramid (pooling windows
/// never cross shard boundaries, so the slice equals the global scores
/// restricted to the shard) and gets the full budget `k`. Returned indices
/// are in shard order and shard-local coordinates.
pub fn shard_local_select<T: Scalar>(
    scores: &ScoreSet<T>,
    cfg: &LighthouseConfig,
    shards: usize,
) -> Result<Vec<SelectionIndex>> {
    cfg.validate()?;
    if shards == 0 {
        return Err(Error::Config("shard_local_select: shards must be at least 1".into()));
    }
    if cfg.seq_len % shards != 0 {
        return Err(Error::Config(format!(
            "shard_local_select: seq_len {} not divisible by {shards} shards",
            cfg.seq_len
        )));
    }
    let shard_len = cfg.seq_len / shards;
    let stride = cfg.coarsest_stride()?;
    if shard_len % stride != 0 {
        return Err(Error::Config(format!(
            "shard_local_select: shard length {shard_len} not divisible by p^(L-1) = {stride}"
        )));
    }
    let mut out = Vec::with_capacity(shards);
    for w in 0..shards {
        let mut shard_cfg = cfg.clone();
        shard_cfg.seq_len = shard_len;
        let shard_coarsest = shard_len / stride;
        let mut clamp_note = None;
        if cfg.levels > 1 && shard_cfg.budget_k > shard_coarsest {
            clamp_note = Some(format!(
                "shard {w}: budget {} clamped to {shard_coarsest} coarsest candidates",
                shard_cfg.budget_k
            ));
            shard_cfg.budget_k = shard_coarsest;
        }
        let mut shard_scores = ScoreSet {
            qk: Vec::with_capacity(cfg.levels),
            kq: Vec::with_capacity(cfg.levels),
        };
        for l in 0..cfg.levels {
            let level_shard_len = shard_len / pow_usize(cfg.pool_factor, l)?;
            let start = w * level_shard_len;
            shard_scores.qk.push(scores.qk[l][start..start + level_shard_len].to_vec());
            shard_scores.kq.push(scores.kq[l][start..start + level_shard_len].to_vec());
        }
        let mut idx = select_indices(&shard_scores, &shard_cfg)?;
        if let Some(note) = clamp_note {
            idx.warnings.push(note);
        }
        out.push(idx);
    }
    Ok(out)
}
