//! Attention-analysis suite: per-layer retention sweeps, recent-attention
//! overlap heatmaps, and the non-shared pivotal-context study. Works on
//! attention traces captured from live model runs or ingested from disk.
//!
//! The relative distance of a context token is `d = (n - 1 - j) / n` for the
//! 0-based token `j` in a length-`n` sequence, so the last token sits at
//! `d = 0`. Heads are averaged before any selection.

mod trace;

pub use trace::{load_trace, save_trace, AttentionTrace, TraceError, TRACE_MAGIC, TRACE_VERSION};

use thiserror::Error;

use crate::math::Matrix;
use crate::model::{prefill, Model, ModelError};
use crate::policy::{select_pvc, CachePolicy, RecencyRamp, SingleLayerProbe};

/// Context boundary for the overlap heatmap: tokens at `d >= 0.3` form the
/// context sequence, the rest the recent sequence.
const RAC_CONTEXT_SPLIT: f64 = 0.3;
/// Context boundary for the non-shared study.
const NONSHARED_CONTEXT_SPLIT: f64 = 0.2;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("reference set is empty")]
    EmptyReference,
    #[error("bucket [{lo:.3}, {hi:.3}) contains no token")]
    EmptyBucket { lo: f64, hi: f64 },
    #[error("no probe tokens with {lo:.0}% < d < {hi:.0}%")]
    EmptyProbeRange { lo: f64, hi: f64 },
    #[error("top_p must lie in (0, 1], got {0}")]
    InvalidTopP(f64),
    #[error("retention grid entry {0} outside (0, 1]")]
    InvalidRetention(f64),
    #[error("trace too short: no context columns at split {split:.0}% for length {len}")]
    TraceTooShort { len: usize, split: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Whether a probe is a single attention row or a recency-weighted average
/// of nearby rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RacMode {
    Separate,
    Ensemble,
}

impl RacMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RacMode::Separate => "separate",
            RacMode::Ensemble => "ensemble",
        }
    }
}

/// Default bucket edges: 5%-wide bins over `d` in `[0, 30%)`.
pub fn default_d_grid() -> Vec<f64> {
    vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25]
}

/// Grid of overlap ratios indexed by (layer, recent-ratio bucket).
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapReport {
    pub mode: RacMode,
    pub d_grid: Vec<f64>,
    pub layers: usize,
    grid: Vec<f64>, // layer-major
}

impl OverlapReport {
    pub fn get(&self, layer: usize, bucket: usize) -> f64 {
        self.grid[layer * self.d_grid.len() + bucket]
    }

    pub fn values(&self) -> &[f64] {
        &self.grid
    }

    /// CSV with columns `layer,d_bucket,mode,overlap`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,d_bucket,mode,overlap\n");
        for l in 0..self.layers {
            for (b, d) in self.d_grid.iter().enumerate() {
                out.push_str(&format!(
                    "{l},{d},{},{}\n",
                    self.mode.as_str(),
                    self.get(l, b)
                ));
            }
        }
        out
    }
}

/// Per-layer perplexity curves over a retention grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IcrReport {
    pub retention_grid: Vec<f64>,
    /// One curve per layer, same length as the grid.
    pub perplexities: Vec<Vec<f64>>,
}

impl IcrReport {
    /// CSV with columns `layer,retention,perplexity`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,retention,perplexity\n");
        for (l, curve) in self.perplexities.iter().enumerate() {
            for (r, p) in self.retention_grid.iter().zip(curve) {
                out.push_str(&format!("{l},{r},{p}\n"));
            }
        }
        out
    }
}

/// Fraction of the reference set shared with `set`: `|set ∩ reference| / |reference|`.
pub fn overlap_ratio(set: &[usize], reference: &[usize]) -> Result<f64, AnalysisError> {
    if reference.is_empty() {
        return Err(AnalysisError::EmptyReference);
    }
    Ok(intersection_count(set, reference) as f64 / reference.len() as f64)
}

/// Intersection size of two ascending index slices.
fn intersection_count(a: &[usize], b: &[usize]) -> usize {
    debug_assert!(a.windows(2).all(|w| w[0] < w[1]));
    debug_assert!(b.windows(2).all(|w| w[0] < w[1]));
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn ascending_difference(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter()
        .copied()
        .filter(|x| b.binary_search(x).is_err())
        .collect()
}

/// Number of leading tokens whose relative distance is at least `split`.
fn context_len(n: usize, split: f64) -> usize {
    (0..n)
        .take_while(|&j| (n - 1 - j) as f64 / n as f64 >= split - 1e-12)
        .count()
}

/// Token index probed at relative distance `d` (left bucket edge).
fn probe_index(n: usize, d: f64) -> usize {
    let offset = (d * n as f64 + 1e-9).floor() as usize;
    n - 1 - offset.min(n - 1)
}

/// Top-p context selection from one weight row, ties toward recency.
fn top_p_context(weights: &[f32], top_p: f64) -> Vec<usize> {
    select_pvc(weights, top_p, 1)
}

/// Overlap between each probe's pivotal context and the last token's, per
/// layer and per recent-ratio bucket.
///
/// In separate mode the probe is the single token at the bucket's left edge;
/// in ensemble mode the probe weights are the recency-weighted average of
/// the rows with `d' ∈ [d, d + ensemble_span)`. The reference is always the
/// last token's selection. Selection is restricted to the context columns
/// (`d >= 30%`) and uses the head-mean attention.
pub fn rac_heatmap(
    trace: &AttentionTrace,
    d_grid: &[f64],
    top_p: f64,
    mode: RacMode,
    ensemble_span: f64,
) -> Result<OverlapReport, AnalysisError> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(AnalysisError::InvalidTopP(top_p));
    }
    let n = trace.seq_len();
    let ctx = context_len(n, RAC_CONTEXT_SPLIT);
    if ctx == 0 || ctx >= n {
        return Err(AnalysisError::TraceTooShort {
            len: n,
            split: RAC_CONTEXT_SPLIT * 100.0,
        });
    }
    // Every bucket must hold at least one token: consecutive edges must map
    // to distinct probe offsets inside the recent region.
    let mut last_offset: Option<usize> = None;
    for (i, &d) in d_grid.iter().enumerate() {
        let offset = n - 1 - probe_index(n, d);
        let hi = d_grid
            .get(i + 1)
            .copied()
            .unwrap_or(d + ensemble_span.max(0.05));
        if probe_index(n, d) < ctx {
            return Err(AnalysisError::EmptyBucket { lo: d, hi });
        }
        if let Some(prev) = last_offset {
            if offset <= prev {
                return Err(AnalysisError::EmptyBucket { lo: d, hi });
            }
        }
        last_offset = Some(offset);
    }

    let mut grid = Vec::with_capacity(trace.layers() * d_grid.len());
    for layer in 0..trace.layers() {
        let mean = Matrix::mean_of(trace.layer_mats(layer));
        let reference = top_p_context(&mean.row(n - 1)[..ctx], top_p);
        for &d in d_grid {
            let probe = match mode {
                RacMode::Separate => {
                    let j = probe_index(n, d);
                    top_p_context(&mean.row(j)[..ctx], top_p)
                }
                RacMode::Ensemble => {
                    let o_start = (d * n as f64 + 1e-9).floor() as usize;
                    let o_end = ((d + ensemble_span) * n as f64 + 1e-9).floor() as usize;
                    let rows: Vec<usize> = (o_start..o_end.max(o_start + 1))
                        .filter(|&o| o < n)
                        .map(|o| n - 1 - o)
                        .collect();
                    if rows.is_empty() {
                        return Err(AnalysisError::EmptyBucket {
                            lo: d,
                            hi: d + ensemble_span,
                        });
                    }
                    // oldest first so recency weights favor the newest row
                    let ordered: Vec<Vec<f32>> = rows
                        .iter()
                        .rev()
                        .map(|&j| mean.row(j)[..ctx].to_vec())
                        .collect();
                    let m = Matrix::from_rows(&ordered);
                    let weights =
                        crate::policy::ensemble_weights(&[m], ordered.len(), RecencyRamp::Linear)
                            .expect("rows and columns are non-empty");
                    top_p_context(&weights, top_p)
                }
            };
            grid.push(overlap_ratio(&probe, &reference)?);
        }
    }
    Ok(OverlapReport {
        mode,
        d_grid: d_grid.to_vec(),
        layers: trace.layers(),
        grid,
    })
}

/// Perplexity curve for compressing only `layer` to each retention in the
/// grid, every other layer left at full cache.
pub fn icr_sweep(
    model: &Model,
    eval_tokens: &[u32],
    layer: usize,
    retention_grid: &[f64],
) -> Result<Vec<f64>, AnalysisError> {
    let mut curve = Vec::with_capacity(retention_grid.len());
    for &r in retention_grid {
        if !(r > 0.0 && r <= 1.0) {
            return Err(AnalysisError::InvalidRetention(r));
        }
        let policy = CachePolicy::LayerProbe(SingleLayerProbe {
            layer,
            retention: r,
        });
        curve.push(crate::model::perplexity(model, eval_tokens, &policy)?);
    }
    Ok(curve)
}

/// Sweep every layer of the model; rows of the report follow layer order.
pub fn icr_report(
    model: &Model,
    eval_tokens: &[u32],
    retention_grid: &[f64],
) -> Result<IcrReport, AnalysisError> {
    let mut perplexities = Vec::with_capacity(model.config.layers);
    for layer in 0..model.config.layers {
        perplexities.push(icr_sweep(model, eval_tokens, layer, retention_grid)?);
    }
    Ok(IcrReport {
        retention_grid: retention_grid.to_vec(),
        perplexities,
    })
}

/// Population standard deviation of each layer's perplexity curve.
pub fn icr_std(report: &IcrReport) -> Vec<f64> {
    report
        .perplexities
        .iter()
        .map(|curve| {
            let n = curve.len() as f64;
            let mean = curve.iter().sum::<f64>() / n;
            (curve.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// One probe's partition overlaps in the non-shared study.
#[derive(Debug, Clone, PartialEq)]
pub struct NonsharedRow {
    pub layer: usize,
    pub probe_d: f64,
    /// Mean fraction of the probe's non-shared set found in the non-shared
    /// sets of closer probes.
    pub nonshared_overlap: f64,
    /// Mean fraction found in the non-pivotal remainder of closer probes.
    pub nonpvc_overlap: f64,
    /// True when the probe's non-shared set is empty (e.g. top_p = 1).
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonsharedReport {
    pub rows: Vec<NonsharedRow>,
}

impl NonsharedReport {
    /// CSV with columns `layer,probe_d,nonshared_overlap,nonpvc_overlap,degenerate`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,probe_d,nonshared_overlap,nonpvc_overlap,degenerate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.layer, r.probe_d, r.nonshared_overlap, r.nonpvc_overlap, r.degenerate
            ));
        }
        out
    }
}

/// Where the non-shared pivotal context of probes at `10% < d < 20%` falls
/// within the selections of probes at `0 < d < 10%`, using a 20% context
/// split and the last token's selection as the shared reference.
///
/// For a probe `a` with non-shared set `NS_a` and a closer probe `b`, the
/// reported quantities are `|NS_a ∩ NS_b| / |NS_a|` and
/// `|NS_a ∩ nonPvC_b| / |NS_a|`; the two sum to at most one because `NS_a`
/// never meets the shared reference.
pub fn nonshared_overlap(
    trace: &AttentionTrace,
    top_p: f64,
) -> Result<NonsharedReport, AnalysisError> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(AnalysisError::InvalidTopP(top_p));
    }
    let n = trace.seq_len();
    let ctx = context_len(n, NONSHARED_CONTEXT_SPLIT);
    if ctx == 0 || ctx >= n {
        return Err(AnalysisError::TraceTooShort {
            len: n,
            split: NONSHARED_CONTEXT_SPLIT * 100.0,
        });
    }
    let d_of = |j: usize| (n - 1 - j) as f64 / n as f64;
    let far_probes: Vec<usize> = (0..n)
        .filter(|&j| d_of(j) > 0.10 && d_of(j) < 0.20)
        .collect();
    let near_probes: Vec<usize> = (0..n)
        .filter(|&j| d_of(j) > 0.0 && d_of(j) < 0.10)
        .collect();
    if far_probes.is_empty() {
        return Err(AnalysisError::EmptyProbeRange { lo: 10.0, hi: 20.0 });
    }
    if near_probes.is_empty() {
        return Err(AnalysisError::EmptyProbeRange { lo: 0.0, hi: 10.0 });
    }

    let all_ctx: Vec<usize> = (0..ctx).collect();
    let mut rows = Vec::new();
    for layer in 0..trace.layers() {
        let mean = Matrix::mean_of(trace.layer_mats(layer));
        let reference = top_p_context(&mean.row(n - 1)[..ctx], top_p);
        let near_sets: Vec<(Vec<usize>, Vec<usize>)> = near_probes
            .iter()
            .map(|&j| {
                let pvc = top_p_context(&mean.row(j)[..ctx], top_p);
                let ns = ascending_difference(&pvc, &reference);
                let non_pvc = ascending_difference(&all_ctx, &pvc);
                (ns, non_pvc)
            })
            .collect();
        for &j in &far_probes {
            let pvc = top_p_context(&mean.row(j)[..ctx], top_p);
            let ns = ascending_difference(&pvc, &reference);
            if ns.is_empty() {
                rows.push(NonsharedRow {
                    layer,
                    probe_d: d_of(j),
                    nonshared_overlap: 0.0,
                    nonpvc_overlap: 0.0,
                    degenerate: true,
                });
                continue;
            }
            let mut acc_ns = 0.0;
            let mut acc_np = 0.0;
            for (other_ns, other_np) in &near_sets {
                acc_ns += intersection_count(&ns, other_ns) as f64 / ns.len() as f64;
                acc_np += intersection_count(&ns, other_np) as f64 / ns.len() as f64;
            }
            rows.push(NonsharedRow {
                layer,
                probe_d: d_of(j),
                nonshared_overlap: acc_ns / near_sets.len() as f64,
                nonpvc_overlap: acc_np / near_sets.len() as f64,
                degenerate: false,
            });
        }
    }
    Ok(NonsharedReport { rows })
}

/// Run a full-cache prefill over `tokens` and package every layer's per-head
/// attention as a trace.
pub fn capture_trace(model: &Model, tokens: &[u32]) -> Result<AttentionTrace, AnalysisError> {
    let (out, _) = prefill(model, tokens, &CachePolicy::Full, true)?;
    let per_layer = out.attn.expect("capture requested");
    let mats: Vec<Matrix> = per_layer.into_iter().flatten().collect();
    Ok(
        AttentionTrace::new(model.config.layers, model.config.heads, tokens.len(), mats)
            .expect("full-cache capture is square"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, perplexity, ModelConfig};

    fn uniform_trace(layers: usize, heads: usize, seq: usize) -> AttentionTrace {
        let mats = (0..layers * heads)
            .map(|_| {
                let mut m = Matrix::zeros(seq, seq);
                for i in 0..seq {
                    for j in 0..=i {
                        m.set(i, j, 1.0 / (i + 1) as f32);
                    }
                }
                m
            })
            .collect();
        AttentionTrace::new(layers, heads, seq, mats).unwrap()
    }

    /// All rows share one ranking profile over the context columns.
    fn proportional_trace(layers: usize, seq: usize) -> AttentionTrace {
        let mats = (0..layers)
            .map(|l| {
                let mut m = Matrix::zeros(seq, seq);
                for i in 0..seq {
                    let mut sum = 0.0f32;
                    for j in 0..=i {
                        let v = ((j * 7 + l * 3) % 13 + 1) as f32;
                        m.set(i, j, v);
                        sum += v;
                    }
                    for j in 0..=i {
                        m.set(i, j, m.get(i, j) / sum);
                    }
                }
                m
            })
            .collect();
        AttentionTrace::new(layers, 1, seq, mats).unwrap()
    }

    #[test]
    fn overlap_ratio_examples() {
        assert_eq!(overlap_ratio(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(overlap_ratio(&[1, 3, 5], &[3, 5, 7, 9]).unwrap(), 0.5);
        assert!(matches!(
            overlap_ratio(&[1], &[]),
            Err(AnalysisError::EmptyReference)
        ));
    }

    #[test]
    fn overlap_is_one_iff_reference_contained() {
        assert_eq!(overlap_ratio(&[0, 1, 2, 3], &[1, 3]).unwrap(), 1.0);
        assert!(overlap_ratio(&[0, 1], &[1, 3]).unwrap() < 1.0);
    }

    #[test]
    fn rac_probe_at_zero_matches_reference() {
        let trace = trace_fixture();
        let rep = rac_heatmap(&trace, &default_d_grid(), 0.8, RacMode::Separate, 0.10).unwrap();
        for l in 0..trace.layers() {
            assert_eq!(rep.get(l, 0), 1.0);
        }
    }

    #[test]
    fn rac_full_top_p_is_all_ones() {
        let trace = trace_fixture();
        for mode in [RacMode::Separate, RacMode::Ensemble] {
            let rep = rac_heatmap(&trace, &default_d_grid(), 1.0, mode, 0.10).unwrap();
            assert!(rep.values().iter().all(|&v| v == 1.0));
        }
    }

    /// Buckets whose ensemble windows stay inside the recent region; rows
    /// there have no structural zeros over the context columns, so averaging
    /// rows with identical context rankings cannot change the selection.
    fn interior_d_grid() -> Vec<f64> {
        vec![0.0, 0.05, 0.10, 0.15, 0.20]
    }

    #[test]
    fn rac_uniform_trace_ensemble_equals_separate() {
        let trace = uniform_trace(2, 2, 60);
        let sep = rac_heatmap(&trace, &interior_d_grid(), 0.8, RacMode::Separate, 0.10).unwrap();
        let ens = rac_heatmap(&trace, &interior_d_grid(), 0.8, RacMode::Ensemble, 0.10).unwrap();
        assert_eq!(sep.values(), ens.values());
    }

    #[test]
    fn rac_proportional_rows_ensemble_equals_separate() {
        // Averaging rows with identical rankings leaves the selection fixed.
        let trace = proportional_trace(3, 80);
        let sep = rac_heatmap(&trace, &interior_d_grid(), 0.6, RacMode::Separate, 0.10).unwrap();
        let ens = rac_heatmap(&trace, &interior_d_grid(), 0.6, RacMode::Ensemble, 0.10).unwrap();
        assert_eq!(sep.values(), ens.values());
    }

    #[test]
    fn rac_rejects_empty_buckets() {
        let trace = uniform_trace(1, 1, 10);
        let err = rac_heatmap(&trace, &default_d_grid(), 0.8, RacMode::Separate, 0.10).unwrap_err();
        assert!(matches!(err, AnalysisError::EmptyBucket { .. }), "{err}");
        assert!(err.to_string().contains("bucket"));
    }

    #[test]
    fn rac_is_deterministic() {
        let trace = trace_fixture();
        let a = rac_heatmap(&trace, &default_d_grid(), 0.8, RacMode::Ensemble, 0.10).unwrap();
        let b = rac_heatmap(&trace, &default_d_grid(), 0.8, RacMode::Ensemble, 0.10).unwrap();
        assert_eq!(a, b);
    }

    fn trace_fixture() -> AttentionTrace {
        let model = init_model(&ModelConfig::small(21)).unwrap();
        let tokens: Vec<u32> = (0..60).map(|i| (i * 11 % 64) as u32).collect();
        capture_trace(&model, &tokens).unwrap()
    }

    #[test]
    fn captured_trace_is_causal_and_normalized() {
        trace_fixture().validate().unwrap();
    }

    #[test]
    fn icr_full_retention_matches_baseline() {
        let model = init_model(&ModelConfig::small(22)).unwrap();
        let tokens: Vec<u32> = (0..40).map(|i| (i * 7 % 64) as u32).collect();
        let base = perplexity(&model, &tokens, &CachePolicy::Full).unwrap();
        for layer in [0, 3] {
            let curve = icr_sweep(&model, &tokens, layer, &[1.0]).unwrap();
            assert!((curve[0] - base).abs() < 1e-6, "layer {layer}");
        }
    }

    #[test]
    fn icr_curve_covers_grid() {
        let model = init_model(&ModelConfig::small(23)).unwrap();
        let tokens: Vec<u32> = (0..30).map(|i| (i * 5 % 64) as u32).collect();
        let grid = [0.25, 0.5, 0.75, 1.0];
        let report = icr_report(&model, &tokens, &grid).unwrap();
        assert_eq!(report.perplexities.len(), 4);
        assert!(report.perplexities.iter().all(|c| c.len() == grid.len()));
        assert!(report.perplexities.iter().flatten().all(|&p| p >= 1.0));
    }

    #[test]
    fn icr_std_examples() {
        let constant = IcrReport {
            retention_grid: vec![0.5, 1.0],
            perplexities: vec![vec![3.0, 3.0]],
        };
        assert_eq!(icr_std(&constant), vec![0.0]);
        let pair = IcrReport {
            retention_grid: vec![0.5, 1.0],
            perplexities: vec![vec![2.0, 4.0], vec![1.0, 1.0]],
        };
        let std = icr_std(&pair);
        assert_eq!(std.len(), 2);
        assert!((std[0] - 1.0).abs() < 1e-12);
        assert_eq!(std[1], 0.0);
    }

    #[test]
    fn nonshared_full_top_p_flags_degenerate() {
        let trace = trace_fixture();
        let rep = nonshared_overlap(&trace, 1.0).unwrap();
        assert!(!rep.rows.is_empty());
        assert!(rep.rows.iter().all(|r| r.degenerate));
    }

    #[test]
    fn nonshared_identical_rows_overlap_fully() {
        let trace = proportional_trace(2, 80);
        let rep = nonshared_overlap(&trace, 0.6).unwrap();
        for row in rep.rows.iter().filter(|r| !r.degenerate) {
            assert!((row.nonshared_overlap - 1.0).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn nonshared_parts_sum_to_at_most_one() {
        let trace = trace_fixture();
        let rep = nonshared_overlap(&trace, 0.8).unwrap();
        for row in &rep.rows {
            assert!(
                row.nonshared_overlap + row.nonpvc_overlap <= 1.0 + 1e-12,
                "{row:?}"
            );
        }
    }

    #[test]
    fn nonshared_rejects_short_traces() {
        let trace = uniform_trace(1, 1, 8);
        assert!(matches!(
            nonshared_overlap(&trace, 0.8),
            Err(AnalysisError::EmptyProbeRange { .. })
        ));
    }

    #[test]
    fn csv_shapes() {
        let trace = trace_fixture();
        let rep = rac_heatmap(&trace, &default_d_grid(), 0.8, RacMode::Separate, 0.10).unwrap();
        let csv = rep.to_csv();
        assert!(csv.starts_with("layer,d_bucket,mode,overlap\n"));
        assert_eq!(
            csv.lines().count(),
            1 + trace.layers() * default_d_grid().len()
        );
    }
}
