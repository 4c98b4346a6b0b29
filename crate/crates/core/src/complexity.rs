//! Closed-form size and cost predictions, plus the measured scaling sweep.
//!
//! The flop model instantiates each pipeline stage's asymptotic row with the
//! constants this implementation actually uses, so the predictions are
//! falsifiable: the analytic counts are checked against measured stage times
//! and the selection size formula against real selections.

use crate::attention::{attend_subsequence, gather, gather_backward, sdpa_backward, sdpa_reference};
use crate::error::{Error, Result};
use crate::numerics::rng::SplitMix64;
use crate::numerics::SeqMatrix;
use crate::pyramid::{build_pyramid, pool_backward, pow_usize, LighthouseConfig};
use crate::scatter::{scatter_back, scatter_backward};
use crate::scoring::{base_scores, pooled_scores};
use crate::selection::select_indices;
use std::fmt::Write as _;
use std::time::Instant;

/// Pipeline stages in table order.
pub const STAGE_NAMES: [&str; 7] = [
    "projections",
    "pyramid_pool",
    "scoring",
    "topk",
    "gather",
    "subseq_attention",
    "scatter_back",
];

/// Per-stage operation counts for one head, with optional measured times.
#[derive(Debug, Clone)]
pub struct CostBreakdown {
    /// `(stage, operation count)` in [`STAGE_NAMES`] order.
    pub stages: Vec<(&'static str, u128)>,
    /// Measured wall-clock milliseconds per stage, same order, when the
    /// breakdown came from an instrumented run.
    pub stage_times_ms: Option<Vec<f64>>,
}

impl CostBreakdown {
    pub fn total(&self) -> u128 {
        self.stages.iter().map(|(_, c)| c).sum()
    }

    pub fn get(&self, stage: &str) -> Option<u128> {
        self.stages.iter().find(|(n, _)| *n == stage).map(|(_, c)| *c)
    }

    /// Sum of every stage except the input projections — the part of the
    /// layer the selection machinery actually changes.
    pub fn pipeline_total(&self) -> u128 {
        self.stages
            .iter()
            .filter(|(n, _)| *n != "projections")
            .map(|(_, c)| c)
            .sum()
    }
}

/// Exact selected-subsequence size for hierarchical descent with distinct
/// scores and prefix coverage off: `N/p^(L-1) + (L-1)·p·k`.
pub fn subseq_size(n: usize, levels: usize, pool_factor: usize, budget_k: usize) -> Result<usize> {
    let cfg = LighthouseConfig::new(n, 1, pool_factor, levels, budget_k);
    cfg.validate()?;
    let coarsest = cfg.coarsest_len()?;
    if levels == 1 {
        return Ok(n);
    }
    Ok(coarsest + (levels - 1) * pool_factor * budget_k.min(coarsest))
}

/// Level count balancing the coarsest-scaffold and descent terms:
/// `L = log_p(T/k)`, which makes `T/p^(L-1) = p·k` exactly. Returns
/// `(L, S)` with `S = p·k·L`.
pub fn balanced_levels(t: usize, pool_factor: usize, budget_k: usize) -> Result<(usize, usize)> {
    if pool_factor < 2 {
        return Err(Error::Config("balanced_levels: pool_factor must be at least 2".into()));
    }
    if budget_k == 0 || t == 0 {
        return Err(Error::Config("balanced_levels: T and k must be at least 1".into()));
    }
    if t % budget_k != 0 {
        return Err(nearest_levels_error(t, pool_factor, budget_k));
    }
    let ratio = t / budget_k;
    if ratio == 1 {
        return Err(Error::Config(format!(
            "balanced_levels: T = k = {t} gives the degenerate L = 0; \
             the nearest valid configurations are L = 1 (T = {}) and L = 2 (T = {})",
            budget_k * pool_factor,
            budget_k * pool_factor * pool_factor
        )));
    }
    let mut levels = 0usize;
    let mut acc = ratio;
    while acc % pool_factor == 0 {
        acc /= pool_factor;
        levels += 1;
    }
    if acc != 1 {
        return Err(nearest_levels_error(t, pool_factor, budget_k));
    }
    let s = pool_factor * budget_k * levels;
    debug_assert_eq!(subseq_size(t, levels, pool_factor, budget_k)?, s);
    Ok((levels, s))
}

fn nearest_levels_error(t: usize, p: usize, k: usize) -> Error {
    // Bracket log_p(T/k) by the two nearest integer level counts.
    let ratio = t as f64 / k as f64;
    let exact = ratio.ln() / (p as f64).ln();
    let lo = exact.floor().max(1.0) as usize;
    let hi = lo + 1;
    Error::Config(format!(
        "balanced_levels: T/k = {t}/{k} is not a power of p = {p}; \
         nearest valid choices are L = {lo} (T = {}) and L = {hi} (T = {})",
        k * pow_usize(p, lo).unwrap_or(usize::MAX),
        k * pow_usize(p, hi).unwrap_or(usize::MAX),
    ))
}

/// Analytic per-stage operation counts for one head of the sparse pipeline.
///
/// Constants per stage (documented so the model is falsifiable):
/// * projections — 3 streams × 2·N·d_model·d multiply-adds;
/// * pyramid_pool — 3 streams × p ops per pooled cell over all coarse levels;
/// * scoring — 2 streams × 2·N·d for base norms plus the windowed-max
///   compares, 2 × Σ_{l≥1} (N/p^l)(p−1);
/// * topk — one op per ranked candidate: coarsest length plus (L−2)·p·k;
/// * gather — 3·S·d row copies;
/// * subseq_attention — 2·S²·d logits + 2·S²·d value accumulation;
/// * scatter_back — d ops per written cell, unclipped write ranges.
///
/// `S` is the descent size formula (prefix off, distinct scores).
pub fn flop_table(cfg: &LighthouseConfig, d_model: usize) -> Result<CostBreakdown> {
    cfg.validate()?;
    let n = cfg.seq_len as u128;
    let d = cfg.head_dim as u128;
    let dm = d_model as u128;
    let p = cfg.pool_factor as u128;
    let levels = cfg.levels;
    let s = subseq_size(cfg.seq_len, levels, cfg.pool_factor, cfg.budget_k)? as u128;
    let coarsest = cfg.coarsest_len()? as u128;
    let k = cfg.budget_k.min(cfg.coarsest_len()?) as u128;

    let mut coarse_cells = 0u128; // Σ_{l>=1} N/p^l
    for l in 1..levels {
        coarse_cells += (cfg.seq_len / pow_usize(cfg.pool_factor, l)?) as u128;
    }
    let projections = 3 * 2 * n * dm * d;
    let pyramid_pool = 3 * p * d * coarse_cells;
    let scoring = 2 * 2 * n * d + 2 * coarse_cells * (p - 1);
    let topk = if levels >= 2 {
        coarsest + (levels as u128 - 2) * p * k
    } else {
        0
    };
    let gather = 3 * s * d;
    let subseq_attention = 4 * s * s * d;
    let scatter_back = if levels == 1 {
        n * d
    } else {
        // Coarsest ranges tile [0, N); each finer level adds p·k ranges of
        // width p^l, l = 0..L-2.
        let mut fine_cells = 0u128;
        for l in 0..levels - 1 {
            fine_cells += p * k * pow_usize(cfg.pool_factor, l)? as u128;
        }
        (n + fine_cells) * d
    };
    Ok(CostBreakdown {
        stages: vec![
            ("projections", projections),
            ("pyramid_pool", pyramid_pool),
            ("scoring", scoring),
            ("topk", topk),
            ("gather", gather),
            ("subseq_attention", subseq_attention),
            ("scatter_back", scatter_back),
        ],
        stage_times_ms: None,
    })
}

/// Analytic counts for the dense baseline: projections plus the 4·N²·d
/// attention stage; the selection-machinery stages are zero.
pub fn dense_flop_table(n: usize, d_model: usize, head_dim: usize) -> CostBreakdown {
    let n = n as u128;
    let d = head_dim as u128;
    let dm = d_model as u128;
    CostBreakdown {
        stages: vec![
            ("projections", 3 * 2 * n * dm * d),
            ("pyramid_pool", 0),
            ("scoring", 0),
            ("topk", 0),
            ("gather", 0),
            ("subseq_attention", 4 * n * n * d),
            ("scatter_back", 0),
        ],
        stage_times_ms: None,
    }
}

/// Run each pipeline stage once on random data, recording wall-clock per
/// stage alongside the analytic counts.
pub fn measure_stage_times(cfg: &LighthouseConfig, d_model: usize, seed: u64) -> Result<CostBreakdown> {
    let mut breakdown = flop_table(cfg, d_model)?;
    let mut rng = SplitMix64::new(seed);
    let x = SeqMatrix::<f64>::gaussian(cfg.seq_len, d_model, 1.0, &mut rng);
    let w_q = SeqMatrix::<f64>::gaussian(d_model, cfg.head_dim, 1.0, &mut rng);
    let w_k = SeqMatrix::<f64>::gaussian(d_model, cfg.head_dim, 1.0, &mut rng);
    let w_v = SeqMatrix::<f64>::gaussian(d_model, cfg.head_dim, 1.0, &mut rng);
    let mut times = Vec::with_capacity(STAGE_NAMES.len());
    let clock = |t0: Instant| t0.elapsed().as_secs_f64() * 1e3;

    let t0 = Instant::now();
    let q = crate::numerics::matmul(&x, &w_q, false)?;
    let k = crate::numerics::matmul(&x, &w_k, false)?;
    let v = crate::numerics::matmul(&x, &w_v, false)?;
    times.push(clock(t0));

    let t0 = Instant::now();
    let pyr = build_pyramid(&q, &k, &v, cfg)?;
    times.push(clock(t0));

    let t0 = Instant::now();
    let (bq, bk) = base_scores(pyr.q(0), pyr.k(0), cfg.scorer)?;
    let scores = pooled_scores(&bq, &bk, cfg)?;
    times.push(clock(t0));

    let t0 = Instant::now();
    let idx = select_indices(&scores, cfg)?;
    times.push(clock(t0));

    let t0 = Instant::now();
    let g = gather(&pyr, &idx)?;
    times.push(clock(t0));

    let t0 = Instant::now();
    let o_sub = attend_subsequence(&g)?;
    times.push(clock(t0));

    let t0 = Instant::now();
    let (o, _) = scatter_back(&o_sub, &idx, cfg)?;
    times.push(clock(t0));
    std::hint::black_box(o);

    breakdown.stage_times_ms = Some(times);
    Ok(breakdown)
}

/// One measured configuration of the scaling sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub n: usize,
    pub mode: &'static str,
    /// Attended sequence length: N for dense, |SelectionIndex| for the
    /// sparse pipeline (prefix coverage on, so it can exceed the formula by
    /// the few forced prefix entries).
    pub s: usize,
    pub flops_total: u128,
    pub flops_attention: u128,
    pub time_fwd_ms_median: f64,
    pub time_fwdbwd_ms_median: f64,
    pub repetitions: usize,
    pub seed: u64,
}

/// Sweep parameters. Per swept N the sparse level count comes from
/// [`balanced_levels`], so every N must make N/k a power of p.
#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub n_values: Vec<usize>,
    pub head_dim: usize,
    pub pool_factor: usize,
    pub budget_k: usize,
    pub repetitions: usize,
    pub seed: u64,
}

fn lower_median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    samples[(samples.len() - 1) / 2]
}

/// Time dense attention and the sparse pipeline (both without projections)
/// at each N, forward and forward+backward, and report medians alongside
/// the analytic flop model.
pub fn scaling_sweep(settings: &SweepSettings) -> Result<Vec<SweepRow>> {
    if settings.repetitions == 0 {
        return Err(Error::Config("scaling_sweep: repetitions must be at least 1".into()));
    }
    if settings.n_values.is_empty() {
        return Err(Error::Config("scaling_sweep: empty N list".into()));
    }
    let d = settings.head_dim;
    let mut rows = Vec::with_capacity(settings.n_values.len() * 2);
    for &n in &settings.n_values {
        let (levels, _) = balanced_levels(n, settings.pool_factor, settings.budget_k)?;
        let cfg = LighthouseConfig::new(n, d, settings.pool_factor, levels, settings.budget_k);
        cfg.validate()?;
        let mut rng = SplitMix64::new(settings.seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let q = SeqMatrix::<f64>::gaussian(n, d, 1.0, &mut rng);
        let k = SeqMatrix::<f64>::gaussian(n, d, 1.0, &mut rng);
        let v = SeqMatrix::<f64>::gaussian(n, d, 1.0, &mut rng);
        let grad_out = SeqMatrix::<f64>::gaussian(n, d, 1.0, &mut rng);

        // Dense attention, forward and forward+backward.
        let mut fwd = Vec::with_capacity(settings.repetitions);
        let mut fwdbwd = Vec::with_capacity(settings.repetitions);
        for _ in 0..settings.repetitions {
            let t0 = Instant::now();
            let out = sdpa_reference(&q, &k, &v, true)?;
            fwd.push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(&out);

            let t0 = Instant::now();
            let out = sdpa_reference(&q, &k, &v, true)?;
            let grads = sdpa_backward(&q, &k, &v, &grad_out, true)?;
            fwdbwd.push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box((&out, &grads));
        }
        let dense_flops = dense_flop_table(n, d, d);
        rows.push(SweepRow {
            n,
            mode: "dense",
            s: n,
            flops_total: dense_flops.pipeline_total(),
            flops_attention: dense_flops.get("subseq_attention").unwrap(),
            time_fwd_ms_median: lower_median(&mut fwd),
            time_fwdbwd_ms_median: lower_median(&mut fwdbwd),
            repetitions: settings.repetitions,
            seed: settings.seed,
        });

        // Sparse pipeline: pool, score, select, gather, attend, scatter.
        let mut fwd = Vec::with_capacity(settings.repetitions);
        let mut fwdbwd = Vec::with_capacity(settings.repetitions);
        let mut measured_s = 0usize;
        for _ in 0..settings.repetitions {
            let t0 = Instant::now();
            lighthouse_pipeline(&q, &k, &v, &cfg, None)?;
            fwd.push(t0.elapsed().as_secs_f64() * 1e3);

            let t0 = Instant::now();
            measured_s = lighthouse_pipeline(&q, &k, &v, &cfg, Some(&grad_out))?;
            fwdbwd.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let flops = flop_table(&cfg, d)?;
        let attn_flops = 4 * (measured_s as u128) * (measured_s as u128) * (d as u128);
        // Swap the formula-S attention term for the measured-S one so the
        // row is internally consistent with its own S column.
        let total = flops.pipeline_total() - flops.get("subseq_attention").unwrap() + attn_flops;
        rows.push(SweepRow {
            n,
            mode: "lighthouse",
            s: measured_s,
            flops_total: total,
            flops_attention: attn_flops,
            time_fwd_ms_median: lower_median(&mut fwd),
            time_fwdbwd_ms_median: lower_median(&mut fwdbwd),
            repetitions: settings.repetitions,
            seed: settings.seed,
        });
    }
    Ok(rows)
}

/// One sparse-pipeline pass (no projections); with `grad_out` the backward
/// chain runs too. Returns the selection size actually used.
fn lighthouse_pipeline(
    q: &SeqMatrix<f64>,
    k: &SeqMatrix<f64>,
    v: &SeqMatrix<f64>,
    cfg: &LighthouseConfig,
    grad_out: Option<&SeqMatrix<f64>>,
) -> Result<usize> {
    let pyr = build_pyramid(q, k, v, cfg)?;
    let (bq, bk) = base_scores(pyr.q(0), pyr.k(0), cfg.scorer)?;
    let scores = pooled_scores(&bq, &bk, cfg)?;
    let idx = select_indices(&scores, cfg)?;
    let g = gather(&pyr, &idx)?;
    let o_sub = attend_subsequence(&g)?;
    let (out, _) = scatter_back(&o_sub, &idx, cfg)?;
    std::hint::black_box(&out);
    if let Some(gout) = grad_out {
        let d_o_sub = scatter_backward(gout, &idx, cfg)?;
        let (dgq, dgk, dgv) = sdpa_backward(&g.q, &g.k, &g.v, &d_o_sub, true)?;
        let pyr_grads = gather_backward(&dgq, &dgk, &dgv, &idx)?;
        let dq = pool_backward(&pyr_grads.q, cfg)?;
        let dk = pool_backward(&pyr_grads.k, cfg)?;
        let dv = pool_backward(&pyr_grads.v, cfg)?;
        std::hint::black_box((&dq, &dk, &dv));
    }
    Ok(idx.len())
}

/// Render sweep rows as CSV with the flop model documented in `#` comments.
pub fn sweep_csv(settings: &SweepSettings, rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# scaling sweep: dense attention vs the sparse pyramid pipeline");
    let _ = writeln!(
        out,
        "# fixed: head_dim={}, pool_factor={}, budget_k={}; levels per N chosen so N/p^(L-1) = p*k",
        settings.head_dim, settings.pool_factor, settings.budget_k
    );
    let _ = writeln!(
        out,
        "# flops_total sums the pipeline stages downstream of the projections: \
         pooling (3pd cells), scoring (4Nd + window compares), top-k (ranked candidates), \
         gather (3Sd), attention (4S^2d), scatter (d per written cell)"
    );
    let _ = writeln!(
        out,
        "# dense rows: flops_total = flops_attention = 4N^2d; S = N. \
         lighthouse rows: S = measured selection size (prefix coverage on)"
    );
    let _ = writeln!(
        out,
        "# times are lower medians over the stated repetitions, single thread"
    );
    let _ = writeln!(
        out,
        "N,mode,S,flops_total,flops_attention,time_fwd_ms_median,time_fwdbwd_ms_median,repetitions,seed"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{},{}",
            r.n,
            r.mode,
            r.s,
            r.flops_total,
            r.flops_attention,
            r.time_fwd_ms_median,
            r.time_fwdbwd_ms_median,
            r.repetitions,
            r.seed
        );
    }
    out
}

/// Least-squares slope of ln(y) against ln(x).
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract(format!(
            "log_log_slope: need >= 2 matched points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let lx: Vec<f64> = xs.iter().map(|&x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        return Err(Error::Contract("log_log_slope: degenerate x values".into()));
    }
    Ok(num / den)
}
