//! Statistical direction checks that need a population of seeded models.
//! These complement the exact per-operation tests: they assert medians over
//! 20 models, evaluated on text each model generated itself (the one corpus
//! a random model can partly predict).

use pykv_core::model::{init_model, perplexity, sample_eval_text, ModelConfig, PositionMode};
use pykv_core::policy::{CachePolicy, PyramidPolicyConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn probe_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 4,
        heads: 4,
        head_dim: 64,
        vocab: 64,
        mlp_ratio: 4.0,
        seed,
        max_seq: 4096,
        position_mode: PositionMode::Gather,
    }
}

fn flat_pyramid(retention: f64) -> CachePolicy {
    let mut cfg = PyramidPolicyConfig::new(4);
    cfg.p0 = retention;
    cfg.decay = 1.0;
    cfg.recent_window_min = 8;
    cfg.recent_ratio = 0.05;
    cfg.min_pvc_lens = vec![4; 4];
    CachePolicy::Pyramid(cfg)
}

/// Median perplexity under retention 0.3 is at least the median under 0.9
/// across 20 seeded models: heavier compression never reads as better.
#[test]
fn heavier_compression_does_not_improve_median_perplexity() {
    let mut low_retention = Vec::new();
    let mut high_retention = Vec::new();
    for seed in 100..120u64 {
        let model = init_model(&probe_config(seed)).unwrap();
        let eval = sample_eval_text(&model, seed, 64, 0.25).unwrap();
        low_retention.push(perplexity(&model, &eval, &flat_pyramid(0.3)).unwrap());
        high_retention.push(perplexity(&model, &eval, &flat_pyramid(0.9)).unwrap());
    }
    let (lo, hi) = (median(low_retention), median(high_retention));
    assert!(
        lo >= hi,
        "median ppl at retention 0.3 = {lo:.4} vs 0.9 = {hi:.4}"
    );
}
