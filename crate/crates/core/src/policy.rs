//! Cache-compression policies and retention-schedule construction.
//!
//! The `pyramid` policy keeps, at every layer, a sliding recent window plus
//! the context entries that carry the top ensemble attention weight of that
//! window ("pivotal context"). Deeper layers keep fewer context entries,
//! following a geometric retention schedule, so the per-layer cache lengths
//! form a pyramid. Baselines: `full` (no eviction), `local` (first + recent
//! tokens only), and a simplified `heavy_hitter` that scores entries by
//! accumulated attention with a uniform budget at every layer.
//!
//! Policy values are immutable configuration; per-sequence mutable state
//! lives in [`PolicyRunState`] owned by the running sequence.

use std::collections::VecDeque;

use thiserror::Error;

use crate::kv::{CacheError, LayerKvCache};
use crate::math::Matrix;

/// Default fraction of the prompt treated as the recent sequence.
pub const DEFAULT_RECENT_RATIO: f64 = 0.4;
/// Default minimum recent tokens always kept (the sliding window length).
pub const DEFAULT_RECENT_WINDOW_MIN: usize = 16;
/// Default minimum pivotal-context length per layer.
pub const DEFAULT_MIN_PVC_LEN: usize = 32;
/// Default layer-0 retention ratio.
pub const DEFAULT_P0: f64 = 1.0;
/// Default per-layer retention decay, calibrated so an 8-layer model retains
/// about 45% of the full KV entries after a 512-token prefill when the recent
/// window sits at its minimum length.
pub const DEFAULT_DECAY: f64 = 0.735;
/// Recent ratio small enough that the minimum window length dominates at
/// desk-scale prompt sizes; used by the calibrated configuration.
pub const CALIBRATED_RECENT_RATIO: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("recent window of {window} rows exceeds the {rows} available attention rows")]
    WindowExceedsRows { window: usize, rows: usize },
    #[error("attention has no context columns")]
    EmptyContext,
    #[error("invalid policy configuration: {0}")]
    InvalidConfig(String),
    #[error("preset schedules need an even layer count, got {0}")]
    OddLayerCount(usize),
    #[error("target compression must lie in (0, 1), got {0}")]
    InvalidTarget(f64),
    #[error("preset infeasible: first-half retention {first_half:.4}, second-half retention {second_half:.4} (must lie in (0, 1])")]
    InfeasiblePreset { first_half: f64, second_half: f64 },
    #[error("heavy-hitter budget {budget} is below the recent window {window}")]
    BudgetBelowWindow { budget: usize, window: usize },
    #[error("accumulated scores length {scores} does not match cache length {cache}")]
    ScoreLengthMismatch { scores: usize, cache: usize },
    #[error("layer {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// `ceil(frac * n)` with a small epsilon so that products like `0.8 * 80`
/// do not round up from float noise.
pub(crate) fn frac_ceil(frac: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    (frac * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Recency weighting applied when combining the recent window's attention rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RecencyRamp {
    /// Weight `j + 1` for the j-th row, oldest to newest.
    Linear,
    /// Weight `gamma^(L-1-j)`: the newest row gets weight 1, older rows decay.
    Exponential { gamma: f64 },
}

impl RecencyRamp {
    fn weights(&self, len: usize) -> Vec<f32> {
        let raw: Vec<f64> = match self {
            RecencyRamp::Linear => (0..len).map(|j| (j + 1) as f64).collect(),
            RecencyRamp::Exponential { gamma } => {
                (0..len).map(|j| gamma.powi((len - 1 - j) as i32)).collect()
            }
        };
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| (w / total) as f32).collect()
    }
}

/// Combine the last `recent_len` rows of the head-averaged attention into one
/// non-negative score per context column.
///
/// `attn` holds one matrix per head whose columns are already restricted to
/// the context entries (rows may cover more than the window; only the last
/// `recent_len` are used). Rows are combined with recency weights that favor
/// newer queries and normalize to one.
pub fn ensemble_weights(
    attn: &[Matrix],
    recent_len: usize,
    ramp: RecencyRamp,
) -> Result<Vec<f32>, PolicyError> {
    assert!(!attn.is_empty(), "ensemble over zero heads");
    let mean = Matrix::mean_of(attn);
    if recent_len == 0 || recent_len > mean.rows() {
        return Err(PolicyError::WindowExceedsRows {
            window: recent_len,
            rows: mean.rows(),
        });
    }
    if mean.cols() == 0 {
        return Err(PolicyError::EmptyContext);
    }
    let weights = ramp.weights(recent_len);
    let first = mean.rows() - recent_len;
    let mut scores = vec![0.0f32; mean.cols()];
    for (j, &w) in weights.iter().enumerate() {
        for (s, &a) in scores.iter_mut().zip(mean.row(first + j)) {
            *s += w * a;
        }
    }
    Ok(scores)
}

/// Indices of the `k` largest weights, ties broken toward the larger index
/// (the more recent token), returned in ascending order.
pub(crate) fn select_top_k(weights: &[f32], k: usize) -> Vec<usize> {
    let k = k.min(weights.len());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.cmp(&a))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Keep `max(min_len, ceil(retention * n))` indices (capped at `n`) with the
/// largest weights; ties favor the larger index; output is ascending.
pub fn select_pvc(weights: &[f32], retention: f64, min_len: usize) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let k = frac_ceil(retention, n).max(min_len).min(n);
    select_top_k(weights, k)
}

/// Geometric per-layer retention schedule `min(1, p0 * decay^layer)`.
pub fn layer_retention_schedule(p0: f64, decay: f64, layers: usize) -> Vec<f64> {
    (0..layers)
        .map(|l| (p0 * decay.powi(l as i32)).min(1.0))
        .collect()
}

/// The three half-split decay patterns compared by the length-decay ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetSchedule {
    /// Remove 1.5x the uniform share in the first half of the layers.
    ReduceMore,
    /// Flat removal across all layers.
    ReduceUniform,
    /// Remove 0.7x the uniform share in the first half (the pyramid pattern).
    ReduceLess,
}

impl PresetSchedule {
    fn first_half_multiplier(self) -> f64 {
        match self {
            PresetSchedule::ReduceMore => 1.5,
            PresetSchedule::ReduceUniform => 1.0,
            PresetSchedule::ReduceLess => 0.7,
        }
    }
}

impl std::str::FromStr for PresetSchedule {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, PolicyError> {
        match s {
            "reduce_more" => Ok(PresetSchedule::ReduceMore),
            "reduce_uniform" => Ok(PresetSchedule::ReduceUniform),
            "reduce_less" => Ok(PresetSchedule::ReduceLess),
            other => Err(PolicyError::InvalidConfig(format!(
                "unknown preset '{other}'"
            ))),
        }
    }
}

/// Two-segment retention schedule hitting an exact total compression target.
///
/// The first half of the layers removes `multiplier * target_compression`
/// of its cache; the second half is solved analytically so the total retained
/// fraction equals `1 - target_compression`.
pub fn preset_schedule(
    preset: PresetSchedule,
    layers: usize,
    target_compression: f64,
) -> Result<Vec<f64>, PolicyError> {
    if layers == 0 || !layers.is_multiple_of(2) {
        return Err(PolicyError::OddLayerCount(layers));
    }
    if !(target_compression > 0.0 && target_compression < 1.0) {
        return Err(PolicyError::InvalidTarget(target_compression));
    }
    let retained = 1.0 - target_compression;
    let first_half = 1.0 - target_compression * preset.first_half_multiplier();
    let second_half = 2.0 * retained - first_half;
    let ok = |r: f64| r > 0.0 && r <= 1.0 + 1e-12;
    if !ok(first_half) || !ok(second_half) {
        return Err(PolicyError::InfeasiblePreset {
            first_half,
            second_half,
        });
    }
    let half = layers / 2;
    let mut schedule = vec![first_half.min(1.0); half];
    schedule.extend(vec![second_half.min(1.0); half]);
    Ok(schedule)
}

/// Per-layer outcome of a selection step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPolicyDecision {
    /// Ascending indices into the pre-compression cache, recent window included.
    pub kept_indices: Vec<usize>,
    /// Fraction of the context that was kept.
    pub retention_used: f64,
}

/// Pyramid policy configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidPolicyConfig {
    /// Fraction of the prompt treated as the recent sequence during prefill.
    pub recent_ratio: f64,
    /// Minimum recent tokens always kept; also the sliding window length
    /// during generation.
    pub recent_window_min: usize,
    /// Layer-0 retention ratio in (0, 1].
    pub p0: f64,
    /// Per-layer multiplicative retention decay in (0, 1].
    pub decay: f64,
    /// Minimum pivotal-context length per layer; no compression happens while
    /// the context is at or below this length.
    pub min_pvc_lens: Vec<usize>,
    /// Recency weighting for the ensemble average.
    pub recency_ramp: RecencyRamp,
    /// Optional fixed per-layer cap on kept context entries, for unbounded
    /// streaming.
    pub budget: Option<usize>,
    /// Re-select pivotal context every this many decode steps.
    pub refresh_every: usize,
    /// Explicit per-layer retention schedule; overrides `p0`/`decay`.
    pub schedule_override: Option<Vec<f64>>,
}

impl PyramidPolicyConfig {
    /// Spec-level defaults: 40% recent sequence, minimum window 16, geometric
    /// schedule `1.0 * 0.735^layer`, minimum context 32 per layer.
    pub fn new(layers: usize) -> Self {
        Self {
            recent_ratio: DEFAULT_RECENT_RATIO,
            recent_window_min: DEFAULT_RECENT_WINDOW_MIN,
            p0: DEFAULT_P0,
            decay: DEFAULT_DECAY,
            min_pvc_lens: vec![DEFAULT_MIN_PVC_LEN; layers],
            recency_ramp: RecencyRamp::Linear,
            budget: None,
            refresh_every: 1,
            schedule_override: None,
        }
    }

    /// The calibrated configuration used for compression-ratio reporting:
    /// identical to [`PyramidPolicyConfig::new`] except that the recent ratio
    /// is small enough that the window floors at `recent_window_min`, so the
    /// retained fraction is pure schedule arithmetic (about 45% for 8 layers
    /// at prefill 512).
    pub fn default_calibrated(layers: usize) -> Self {
        Self {
            recent_ratio: CALIBRATED_RECENT_RATIO,
            ..Self::new(layers)
        }
    }

    pub fn layers(&self) -> usize {
        self.min_pvc_lens.len()
    }

    /// Per-layer retention ratios: the override if set, else the geometric
    /// schedule.
    pub fn retention_schedule(&self) -> Vec<f64> {
        match &self.schedule_override {
            Some(s) => s.clone(),
            None => layer_retention_schedule(self.p0, self.decay, self.layers()),
        }
    }

    pub fn validate(&self, layers: usize) -> Result<(), PolicyError> {
        let fail = |msg: String| Err(PolicyError::InvalidConfig(msg));
        if !(self.p0 > 0.0 && self.p0 <= 1.0) {
            return fail(format!("p0 must lie in (0, 1], got {}", self.p0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if !(self.recent_ratio > 0.0 && self.recent_ratio < 1.0) {
            return fail(format!(
                "recent_ratio must lie in (0, 1), got {}",
                self.recent_ratio
            ));
        }
        if self.recent_window_min == 0 {
            return fail("recent_window_min must be at least 1".into());
        }
        if self.min_pvc_lens.len() != layers {
            return fail(format!(
                "min_pvc_lens has {} entries for {layers} layers",
                self.min_pvc_lens.len()
            ));
        }
        if self.refresh_every == 0 {
            return fail("refresh_every must be at least 1".into());
        }
        if let Some(b) = self.budget {
            let min_floor = self.min_pvc_lens.iter().copied().max().unwrap_or(0);
            if b < min_floor {
                return fail(format!(
                    "budget {b} is below the largest min_pvc_len {min_floor}; the length bound budget + window would not hold"
                ));
            }
        }
        if let Some(s) = &self.schedule_override {
            if s.len() != layers {
                return fail(format!(
                    "schedule override has {} entries for {layers} layers",
                    s.len()
                ));
            }
            if s.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
                return fail("schedule override entries must lie in (0, 1]".into());
            }
        }
        Ok(())
    }
}

/// Inputs for one pyramid selection step on a layer.
#[derive(Debug, Clone)]
pub struct PyramidSelectParams {
    /// Recent entries always kept (and the ensemble query window).
    pub window: usize,
    /// Desired kept-context count before the min/budget clamps; derived from
    /// the retention ratio and the total context length of the sequence so
    /// that repeated re-selection does not compound.
    pub target_context: usize,
    /// No compression while the present context is at or below this length.
    pub min_pvc_len: usize,
    /// Cap on kept context entries.
    pub budget: Option<usize>,
    pub ramp: RecencyRamp,
}

/// Decide which entries of a layer to keep. `attn` holds per-head attention
/// over all `len` current entries; the last `window` rows available are used
/// as the ensemble queries. Returns `None` when nothing is evicted.
pub fn pyramid_select(
    attn: &[Matrix],
    len: usize,
    params: &PyramidSelectParams,
) -> Result<Option<LayerPolicyDecision>, PolicyError> {
    let ctx = len.saturating_sub(params.window);
    if ctx == 0 || ctx <= params.min_pvc_len {
        return Ok(None);
    }
    let mut k = params.target_context.max(params.min_pvc_len).min(ctx);
    if let Some(b) = params.budget {
        k = k.min(b);
    }
    if k == ctx {
        return Ok(None);
    }
    let rows = attn[0].rows();
    let ens_rows = params.window.min(rows);
    let sliced: Vec<Matrix> = attn
        .iter()
        .map(|m| m.submatrix(rows - ens_rows..rows, 0..ctx))
        .collect();
    let scores = ensemble_weights(&sliced, ens_rows, params.ramp)?;
    let mut kept = select_top_k(&scores, k);
    kept.extend(ctx..len);
    Ok(Some(LayerPolicyDecision {
        kept_indices: kept,
        retention_used: k as f64 / ctx as f64,
    }))
}

/// Single-shot pyramid compression of one layer's cache, window and context
/// both derived from the cache's current length.
pub fn pyramid_update_layer(
    cache: &LayerKvCache,
    attn: &[Matrix],
    cfg: &PyramidPolicyConfig,
    layer: usize,
) -> Result<LayerKvCache, PolicyError> {
    let layers = cfg.layers();
    if layer >= layers {
        return Err(PolicyError::LayerOutOfRange { layer, layers });
    }
    let len = cache.len();
    let window = cfg.recent_window_min.max(frac_ceil(cfg.recent_ratio, len));
    let retention = cfg.retention_schedule()[layer];
    let params = PyramidSelectParams {
        window,
        target_context: frac_ceil(retention, len.saturating_sub(window)),
        min_pvc_len: cfg.min_pvc_lens[layer],
        budget: cfg.budget,
        ramp: cfg.recency_ramp,
    };
    match pyramid_select(attn, len, &params)? {
        None => Ok(cache.clone()),
        Some(decision) => Ok(cache.gather(&decision.kept_indices)?),
    }
}

/// Keep the first `keep_first` and last `window` entries.
pub fn local_policy_update(cache: &LayerKvCache, keep_first: usize, window: usize) -> LayerKvCache {
    let indices = local_indices(cache.len(), keep_first, window);
    cache
        .gather(&indices)
        .expect("local indices are valid by construction")
}

fn local_indices(len: usize, keep_first: usize, window: usize) -> Vec<usize> {
    let head_end = keep_first.min(len);
    let tail_start = len.saturating_sub(window).max(head_end);
    (0..head_end).chain(tail_start..len).collect()
}

/// Keep the last `window` entries plus the top `budget - window` context
/// entries by accumulated attention score. Ties favor recency.
pub fn heavy_hitter_update(
    cache: &LayerKvCache,
    accumulated_scores: &[f32],
    budget: usize,
    window: usize,
) -> Result<LayerKvCache, PolicyError> {
    let kept = heavy_hitter_indices(cache.len(), accumulated_scores, budget, window)?;
    match kept {
        None => Ok(cache.clone()),
        Some(indices) => Ok(cache.gather(&indices)?),
    }
}

fn heavy_hitter_indices(
    len: usize,
    scores: &[f32],
    budget: usize,
    window: usize,
) -> Result<Option<Vec<usize>>, PolicyError> {
    if budget < window {
        return Err(PolicyError::BudgetBelowWindow { budget, window });
    }
    if scores.len() != len {
        return Err(PolicyError::ScoreLengthMismatch {
            scores: scores.len(),
            cache: len,
        });
    }
    if budget >= len {
        return Ok(None);
    }
    let ctx = len - window;
    let mut kept = select_top_k(&scores[..ctx], budget - window);
    kept.extend(ctx..len);
    Ok(Some(kept))
}

/// Probe policy: compress exactly one layer by the newest token's attention
/// row, leaving every other layer untouched. Used by the per-layer
/// retention sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleLayerProbe {
    pub layer: usize,
    pub retention: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalPolicyConfig {
    pub keep_first: usize,
    pub window: usize,
}

impl LocalPolicyConfig {
    pub fn new(keep_first: usize, window: usize) -> Self {
        Self { keep_first, window }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeavyHitterConfig {
    /// Total per-layer entry budget, identical at every layer.
    pub budget: usize,
    /// Recent entries always kept.
    pub window: usize,
}

impl HeavyHitterConfig {
    pub fn new(budget: usize, window: usize) -> Self {
        Self { budget, window }
    }
}

/// A cache-compression policy. Immutable configuration, shareable across
/// sequences; each running sequence owns its own [`PolicyRunState`].
#[derive(Debug, Clone, PartialEq)]
pub enum CachePolicy {
    /// Keep everything.
    Full,
    /// Keep the first and most recent tokens only.
    Local(LocalPolicyConfig),
    /// Accumulated-attention scoring with a uniform per-layer budget.
    HeavyHitter(HeavyHitterConfig),
    /// Layer-wise pivotal-context selection.
    Pyramid(PyramidPolicyConfig),
    /// Compress a single layer by the newest token's attention row.
    LayerProbe(SingleLayerProbe),
}

impl CachePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            CachePolicy::Full => "full",
            CachePolicy::Local(_) => "local",
            CachePolicy::HeavyHitter(_) => "heavy_hitter",
            CachePolicy::Pyramid(_) => "pyramid",
            CachePolicy::LayerProbe(_) => "layer_probe",
        }
    }

    /// Whether the policy gathers hidden states between layers during
    /// prefill, so that deeper layers compute attention over fewer entries.
    /// Only the pyramid policy compresses while the prompt is being computed;
    /// the baselines evict from already-computed caches.
    pub fn compresses_prefill_forward(&self) -> bool {
        matches!(self, CachePolicy::Pyramid(_))
    }

    pub fn validate(&self, layers: usize) -> Result<(), PolicyError> {
        match self {
            CachePolicy::Full | CachePolicy::Local(_) => Ok(()),
            CachePolicy::HeavyHitter(cfg) => {
                if cfg.budget < cfg.window {
                    Err(PolicyError::BudgetBelowWindow {
                        budget: cfg.budget,
                        window: cfg.window,
                    })
                } else {
                    Ok(())
                }
            }
            CachePolicy::Pyramid(cfg) => cfg.validate(layers),
            CachePolicy::LayerProbe(p) => {
                if p.layer >= layers {
                    return Err(PolicyError::LayerOutOfRange {
                        layer: p.layer,
                        layers,
                    });
                }
                if !(p.retention > 0.0 && p.retention <= 1.0) {
                    return Err(PolicyError::InvalidConfig(format!(
                        "probe retention must lie in (0, 1], got {}",
                        p.retention
                    )));
                }
                Ok(())
            }
        }
    }

    /// Selection for one layer at the end of prefill. `attn` covers the
    /// entries active at this layer; `prompt_len` is the original prompt
    /// length, from which windows and retention targets are derived.
    pub(crate) fn prefill_layer_decision(
        &self,
        layer: usize,
        attn: &[Matrix],
        active_len: usize,
        prompt_len: usize,
        state: &mut PolicyRunState,
    ) -> Result<Option<LayerPolicyDecision>, PolicyError> {
        match self {
            CachePolicy::Full => Ok(None),
            CachePolicy::Local(cfg) => {
                let kept = local_indices(active_len, cfg.keep_first, cfg.window);
                if kept.len() == active_len {
                    Ok(None)
                } else {
                    let retention_used = kept.len() as f64 / active_len as f64;
                    Ok(Some(LayerPolicyDecision {
                        kept_indices: kept,
                        retention_used,
                    }))
                }
            }
            CachePolicy::HeavyHitter(cfg) => {
                let scores = column_sums(attn);
                let kept = heavy_hitter_indices(active_len, &scores, cfg.budget, cfg.window)?;
                if kept.is_some() {
                    state.sort_ops += 1;
                }
                Ok(kept.map(|kept_indices| {
                    let retention_used = kept_indices.len() as f64 / active_len as f64;
                    LayerPolicyDecision {
                        kept_indices,
                        retention_used,
                    }
                }))
            }
            CachePolicy::Pyramid(cfg) => {
                let window = cfg
                    .recent_window_min
                    .max(frac_ceil(cfg.recent_ratio, prompt_len));
                let retention = state.schedule[layer];
                let params = PyramidSelectParams {
                    window,
                    target_context: frac_ceil(retention, prompt_len.saturating_sub(window)),
                    min_pvc_len: cfg.min_pvc_lens[layer],
                    budget: cfg.budget,
                    ramp: cfg.recency_ramp,
                };
                let decision = pyramid_select(attn, active_len, &params)?;
                if decision.is_some() {
                    state.sort_ops += 1;
                }
                Ok(decision)
            }
            CachePolicy::LayerProbe(p) => {
                if layer != p.layer {
                    return Ok(None);
                }
                let mean = Matrix::mean_of(attn);
                let last_row = mean.row(mean.rows() - 1);
                let k = frac_ceil(p.retention, prompt_len).min(active_len);
                if k >= active_len {
                    return Ok(None);
                }
                state.sort_ops += 1;
                let mut kept = select_top_k(&last_row[..active_len], k);
                if *kept.last().unwrap_or(&0) != active_len - 1 {
                    kept.push(active_len - 1);
                }
                let retention_used = kept.len() as f64 / active_len as f64;
                Ok(Some(LayerPolicyDecision {
                    kept_indices: kept,
                    retention_used,
                }))
            }
        }
    }

    /// Record per-layer state (accumulated scores, recent attention rows)
    /// once the prefill cache for the layer is settled. `kept` is the gather
    /// applied to this layer, if any.
    pub(crate) fn seed_layer_state(
        &self,
        layer: usize,
        attn: &[Matrix],
        kept: Option<&[usize]>,
        state: &mut PolicyRunState,
    ) {
        match self {
            CachePolicy::Full | CachePolicy::Local(_) => {}
            CachePolicy::HeavyHitter(_) => {
                let mut scores = column_sums(attn);
                if let Some(kept) = kept {
                    scores = kept.iter().map(|&i| scores[i]).collect();
                }
                state.hh_scores[layer] = scores;
            }
            CachePolicy::Pyramid(_) | CachePolicy::LayerProbe(_) => {
                let mean = Matrix::mean_of(attn);
                let cap = state.recent_rows[layer].cap;
                let first = mean.rows().saturating_sub(cap);
                for r in first..mean.rows() {
                    let mut row = mean.row(r).to_vec();
                    if let Some(kept) = kept {
                        row = kept.iter().map(|&i| row[i]).collect();
                    }
                    state.recent_rows[layer].push_seeded(row);
                }
            }
        }
    }

    /// Selection after a decode step appended one entry to the layer's cache.
    /// The engine has already recorded the step's attention row in `state`.
    /// `total_positions` counts every token processed so far, including
    /// evicted ones; retention targets derive from it.
    pub(crate) fn decode_layer_decision(
        &self,
        layer: usize,
        cache_len: usize,
        total_positions: usize,
        state: &mut PolicyRunState,
    ) -> Result<Option<LayerPolicyDecision>, PolicyError> {
        match self {
            CachePolicy::Full => Ok(None),
            CachePolicy::Local(cfg) => {
                let kept = local_indices(cache_len, cfg.keep_first, cfg.window);
                if kept.len() == cache_len {
                    Ok(None)
                } else {
                    let retention_used = kept.len() as f64 / cache_len as f64;
                    Ok(Some(LayerPolicyDecision {
                        kept_indices: kept,
                        retention_used,
                    }))
                }
            }
            CachePolicy::HeavyHitter(cfg) => {
                let scores = &state.hh_scores[layer];
                if cfg.budget >= cache_len {
                    return Ok(None);
                }
                state.sort_ops += 1;
                let kept = heavy_hitter_indices(cache_len, scores, cfg.budget, cfg.window)?;
                Ok(kept.map(|kept_indices| {
                    let retention_used = kept_indices.len() as f64 / cache_len as f64;
                    LayerPolicyDecision {
                        kept_indices,
                        retention_used,
                    }
                }))
            }
            CachePolicy::Pyramid(cfg) => {
                let window = cfg.recent_window_min;
                let over_budget = cfg
                    .budget
                    .map(|b| cache_len.saturating_sub(window) > b)
                    .unwrap_or(false);
                let due = state.decode_steps.is_multiple_of(cfg.refresh_every as u64);
                if !due && !over_budget {
                    return Ok(None);
                }
                let retention = state.schedule[layer];
                let params = PyramidSelectParams {
                    window,
                    target_context: frac_ceil(retention, total_positions.saturating_sub(window)),
                    min_pvc_len: cfg.min_pvc_lens[layer],
                    budget: cfg.budget,
                    ramp: cfg.recency_ramp,
                };
                let rows = state.recent_rows[layer].to_matrix(cache_len);
                let decision = pyramid_select(&[rows], cache_len, &params)?;
                if decision.is_some() {
                    state.sort_ops += 1;
                }
                Ok(decision)
            }
            CachePolicy::LayerProbe(p) => {
                if layer != p.layer {
                    return Ok(None);
                }
                let k = frac_ceil(p.retention, total_positions).min(cache_len);
                if k >= cache_len {
                    return Ok(None);
                }
                let rows = &state.recent_rows[layer];
                let last = rows.last().expect("probe row recorded before decision");
                state.sort_ops += 1;
                let mut kept = select_top_k(last, k);
                if *kept.last().unwrap_or(&0) != cache_len - 1 {
                    kept.push(cache_len - 1);
                }
                let retention_used = kept.len() as f64 / cache_len as f64;
                Ok(Some(LayerPolicyDecision {
                    kept_indices: kept,
                    retention_used,
                }))
            }
        }
    }
}

/// Head-mean attention mass received by each column, summed over all rows.
fn column_sums(attn: &[Matrix]) -> Vec<f32> {
    let mean = Matrix::mean_of(attn);
    let mut sums = vec![0.0f32; mean.cols()];
    for r in 0..mean.rows() {
        for (s, &v) in sums.iter_mut().zip(mean.row(r)) {
            *s += v;
        }
    }
    sums
}

/// Sliding buffer of recent head-mean attention rows, kept column-aligned
/// with the layer cache across appends and gathers.
#[derive(Debug, Clone)]
pub(crate) struct RecentRows {
    rows: VecDeque<Vec<f32>>,
    cap: usize,
}

impl RecentRows {
    fn new(cap: usize) -> Self {
        Self {
            rows: VecDeque::new(),
            cap,
        }
    }

    fn push_seeded(&mut self, row: Vec<f32>) {
        self.push(row);
    }

    /// Append a row of the current cache width; older rows are padded with
    /// zeros for entries that did not exist when they were computed.
    pub(crate) fn push(&mut self, row: Vec<f32>) {
        for r in &mut self.rows {
            if r.len() < row.len() {
                r.resize(row.len(), 0.0);
            }
        }
        self.rows.push_back(row);
        while self.rows.len() > self.cap {
            self.rows.pop_front();
        }
    }

    pub(crate) fn gather(&mut self, kept: &[usize]) {
        for r in &mut self.rows {
            *r = kept.iter().map(|&i| r[i]).collect();
        }
    }

    fn last(&self) -> Option<&Vec<f32>> {
        self.rows.back()
    }

    fn to_matrix(&self, cols: usize) -> Matrix {
        let rows: Vec<Vec<f32>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = r.clone();
                row.resize(cols, 0.0);
                row
            })
            .collect();
        Matrix::from_rows(&rows)
    }
}

/// Mutable per-sequence policy state. One instance per in-flight sequence.
#[derive(Debug, Clone)]
pub struct PolicyRunState {
    pub(crate) schedule: Vec<f64>,
    pub(crate) hh_scores: Vec<Vec<f32>>,
    pub(crate) recent_rows: Vec<RecentRows>,
    /// Top-k selection sorts performed so far.
    pub sort_ops: u64,
    pub(crate) decode_steps: u64,
}

impl PolicyRunState {
    pub(crate) fn new(policy: &CachePolicy, layers: usize) -> Self {
        let schedule = match policy {
            CachePolicy::Pyramid(cfg) => cfg.retention_schedule(),
            _ => vec![1.0; layers],
        };
        let row_cap = match policy {
            CachePolicy::Pyramid(cfg) => cfg.recent_window_min,
            CachePolicy::LayerProbe(_) => 1,
            _ => 0,
        };
        Self {
            schedule,
            hh_scores: vec![Vec::new(); layers],
            recent_rows: (0..layers).map(|_| RecentRows::new(row_cap)).collect(),
            sort_ops: 0,
            decode_steps: 0,
        }
    }

    /// Record the head-mean attention row of a decode step for one layer.
    pub(crate) fn observe_decode_row(&mut self, policy: &CachePolicy, layer: usize, row: Vec<f32>) {
        match policy {
            CachePolicy::HeavyHitter(_) => {
                let scores = &mut self.hh_scores[layer];
                if scores.len() < row.len() {
                    scores.resize(row.len(), 0.0);
                }
                for (s, v) in scores.iter_mut().zip(row) {
                    *s += v;
                }
            }
            CachePolicy::Pyramid(_) | CachePolicy::LayerProbe(_) => {
                self.recent_rows[layer].push(row);
            }
            CachePolicy::Full | CachePolicy::Local(_) => {}
        }
    }

    /// Re-align per-layer state after the cache was gathered.
    pub(crate) fn gather_layer(&mut self, layer: usize, kept: &[usize]) {
        if !self.hh_scores[layer].is_empty() {
            self.hh_scores[layer] = kept.iter().map(|&i| self.hh_scores[layer][i]).collect();
        }
        self.recent_rows[layer].gather(kept);
    }

    pub(crate) fn bump_step(&mut self) {
        self.decode_steps += 1;
    }
}
