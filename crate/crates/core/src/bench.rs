//! Benchmark harness: KV entries, attention-cell work, top-k sort counts,
//! per-token latency, and throughput per policy, plus the ablation sweeps.
//!
//! The primary efficiency metrics are attention-cell and KV-entry counts,
//! which are hardware-independent and deterministic given the seeds.
//! Wall-clock fields are reported but never asserted.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    decode_step, greedy_token, init_model, perplexity, prefill, Model, ModelError, PositionMode,
};
use crate::policy::{CachePolicy, PyramidPolicyConfig};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("batch must be at least 1")]
    EmptyBatch,
    #[error("ratio {0} outside (0, 1)")]
    InvalidRatio(f64),
    #[error("batch sizes must be ascending")]
    UnsortedBatches,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One benchmark run. Counts are summed over the batch; wall-clock fields
/// are hardware-dependent and excluded from determinism guarantees.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub policy: String,
    pub batch: usize,
    pub prefill_len: usize,
    pub gen_len: usize,
    pub kv_entries_peak: u64,
    pub kv_bytes_peak: u64,
    pub attn_cells: u64,
    pub sort_ops: u64,
    pub lat_ms_per_token: f64,
    pub thr_tok_s: f64,
}

/// Exact CSV header for bench output.
pub const BENCH_CSV_HEADER: &str =
    "policy,batch,prefill,gen,kv_entries_peak,kv_bytes_peak,attn_cells,sort_ops,lat_ms_per_token,thr_tok_s";

impl BenchRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.4},{:.1}",
            self.policy,
            self.batch,
            self.prefill_len,
            self.gen_len,
            self.kv_entries_peak,
            self.kv_bytes_peak,
            self.attn_cells,
            self.sort_ops,
            self.lat_ms_per_token,
            self.thr_tok_s
        )
    }
}

pub fn write_csv(records: &[BenchRecord], path: &std::path::Path) -> Result<(), BenchError> {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Closed-form attention-cell count of a full-cache run, per sequence:
/// `layers * heads * (P(P+1)/2 + sum_{t=1..G} (P+t))`.
pub fn full_cache_attn_cells(
    layers: usize,
    heads: usize,
    prefill_len: usize,
    gen_len: usize,
) -> u64 {
    let p = prefill_len as u64;
    let g = gen_len as u64;
    let prefill_cells = p * (p + 1) / 2;
    let gen_cells = g * p + g * (g + 1) / 2;
    layers as u64 * heads as u64 * (prefill_cells + gen_cells)
}

/// Full-cache peak KV entries for the same run shape.
pub fn full_cache_kv_peak(layers: usize, batch: usize, prefill_len: usize, gen_len: usize) -> u64 {
    (batch * layers * (prefill_len + gen_len)) as u64
}

fn random_prompt(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.random_range(0..vocab as u32))
        .collect()
}

/// Run `batch` independent sequences (random prompts from `seed`) through a
/// prefill and `gen_len` greedy decode steps, recording peak KV entries and
/// bytes, cumulative attention cells and selection sorts, mean per-token
/// decode latency, and aggregate decode throughput.
///
/// Peak accounting treats the batch as simultaneously resident: per-sequence
/// entry counts are sampled after prefill and after every decode step, summed
/// across the batch pointwise in time, and the maximum is reported.
pub fn run_bench(
    model: &Model,
    policy: &CachePolicy,
    batch: usize,
    prefill_len: usize,
    gen_len: usize,
    seed: u64,
) -> Result<BenchRecord, BenchError> {
    if batch == 0 {
        return Err(BenchError::EmptyBatch);
    }
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut timelines: Vec<Vec<u64>> = Vec::with_capacity(batch);
    let mut attn_cells = 0u64;
    let mut sort_ops = 0u64;
    let mut decode_wall = 0f64;

    for _ in 0..batch {
        let prompt = random_prompt(&mut rng, prefill_len, cfg.vocab);
        let (out, mut session) = prefill(model, &prompt, policy, false)?;
        let mut timeline = Vec::with_capacity(gen_len + 1);
        timeline.push(session.caches().kv_entry_count() as u64);
        let mut next = greedy_token(&out.logits);
        let started = Instant::now();
        for _ in 0..gen_len {
            let out = decode_step(model, next, &mut session)?;
            next = greedy_token(&out.logits);
            timeline.push(session.caches().kv_entry_count() as u64);
        }
        decode_wall += started.elapsed().as_secs_f64();
        attn_cells += session.stats.attn_cells;
        sort_ops += session.sort_ops();
        timelines.push(timeline);
    }

    let points = gen_len + 1;
    let kv_entries_peak = (0..points)
        .map(|t| timelines.iter().map(|tl| tl[t]).sum::<u64>())
        .max()
        .unwrap_or(0);
    let kv_bytes_peak = 2 * kv_entries_peak * cfg.heads as u64 * cfg.head_dim as u64 * 4;

    let decoded = (batch * gen_len) as f64;
    let (lat_ms_per_token, thr_tok_s) = if gen_len == 0 {
        (0.0, 0.0)
    } else {
        (
            decode_wall * 1e3 / decoded,
            decoded / decode_wall.max(1e-12),
        )
    };

    Ok(BenchRecord {
        policy: policy.name().to_string(),
        batch,
        prefill_len,
        gen_len,
        kv_entries_peak,
        kv_bytes_peak,
        attn_cells,
        sort_ops,
        lat_ms_per_token,
        thr_tok_s,
    })
}

/// One row of the recent-sequence-ratio sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RecentRatioRow {
    pub ratio: f64,
    /// Peak KV entries relative to the full-cache peak.
    pub kv_entries_ratio: f64,
    pub perplexity: f64,
}

pub fn recent_ratio_csv(rows: &[RecentRatioRow]) -> String {
    let mut out = String::from("ratio,kv_entries_ratio,perplexity\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.ratio, r.kv_entries_ratio, r.perplexity
        ));
    }
    out
}

/// Sweep the fraction of the prompt treated as the recent sequence, holding
/// the rest of the pyramid configuration fixed. Each ratio yields the peak
/// KV ratio of a bench run plus the perplexity on `eval_tokens`.
pub fn sweep_recent_ratio(
    model: &Model,
    base: &PyramidPolicyConfig,
    ratios: &[f64],
    prefill_len: usize,
    gen_len: usize,
    eval_tokens: &[u32],
    seed: u64,
) -> Result<Vec<RecentRatioRow>, BenchError> {
    let full_peak = full_cache_kv_peak(model.config.layers, 1, prefill_len, gen_len) as f64;
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(BenchError::InvalidRatio(ratio));
        }
        let cfg = PyramidPolicyConfig {
            recent_ratio: ratio,
            ..base.clone()
        };
        let policy = CachePolicy::Pyramid(cfg);
        let record = run_bench(model, &policy, 1, prefill_len, gen_len, seed)?;
        let ppl = perplexity(model, eval_tokens, &policy)?;
        rows.push(RecentRatioRow {
            ratio,
            kv_entries_ratio: record.kv_entries_peak as f64 / full_peak,
            perplexity: ppl,
        });
    }
    Ok(rows)
}

/// Throughput comparison of two policies across batch sizes, plus the first
/// batch size (if any) at which the first policy's measured throughput
/// reaches the second's. The crossover is wall-clock derived and therefore
/// hardware-dependent; it is reported, never asserted.
pub struct BatchSweep {
    pub records: Vec<BenchRecord>,
    pub crossover_batch: Option<usize>,
}

pub fn sweep_batch(
    model: &Model,
    candidate: &CachePolicy,
    baseline: &CachePolicy,
    batches: &[usize],
    prefill_len: usize,
    gen_len: usize,
    seed: u64,
) -> Result<BatchSweep, BenchError> {
    if batches.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BenchError::UnsortedBatches);
    }
    let mut records = Vec::with_capacity(batches.len() * 2);
    let mut crossover_batch = None;
    for &batch in batches {
        let cand = run_bench(model, candidate, batch, prefill_len, gen_len, seed)?;
        let base = run_bench(model, baseline, batch, prefill_len, gen_len, seed)?;
        if crossover_batch.is_none() && cand.thr_tok_s >= base.thr_tok_s {
            crossover_batch = Some(batch);
        }
        records.push(cand);
        records.push(base);
    }
    Ok(BatchSweep {
        records,
        crossover_batch,
    })
}

/// One row of the position-encoding ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionModeRow {
    pub mode: &'static str,
    pub perplexity: f64,
    pub kv_entries_peak: u64,
}

pub fn position_mode_csv(rows: &[PositionModeRow]) -> String {
    let mut out = String::from("mode,perplexity,kv_entries_peak\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.mode, r.perplexity, r.kv_entries_peak
        ));
    }
    out
}

/// Run the same compressed evaluation under both position-encoding modes:
/// rotary angles gathered from original token positions versus re-encoded
/// densely over the retained entries. Emits one comparison row per mode.
pub fn position_mode_ablation(
    base_config: &crate::model::ModelConfig,
    policy: &CachePolicy,
    eval_tokens: &[u32],
    prefill_len: usize,
    gen_len: usize,
    seed: u64,
) -> Result<Vec<PositionModeRow>, BenchError> {
    let mut rows = Vec::with_capacity(2);
    for (mode, name) in [
        (PositionMode::Gather, "gather"),
        (PositionMode::Reencode, "reencode"),
    ] {
        let mut cfg = base_config.clone();
        cfg.position_mode = mode;
        let model = init_model(&cfg)?;
        let record = run_bench(&model, policy, 1, prefill_len, gen_len, seed)?;
        let ppl = perplexity(&model, eval_tokens, policy)?;
        rows.push(PositionModeRow {
            mode: name,
            perplexity: ppl,
            kv_entries_peak: record.kv_entries_peak,
        });
    }
    Ok(rows)
}
