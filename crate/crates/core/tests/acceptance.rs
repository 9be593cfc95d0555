//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Headline GPU numbers are not reproducible at desk scale; these criteria
//! check properties and ratio-level reproduction instead. Run with
//! `cargo test --test acceptance -- --nocapture` to see the per-criterion
//! lines.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pykv_core::analysis::{
    default_d_grid, icr_sweep, load_trace, overlap_ratio, rac_heatmap, save_trace, AttentionTrace,
    RacMode, TraceError, TRACE_MAGIC, TRACE_VERSION,
};
use pykv_core::bench::{
    full_cache_attn_cells, full_cache_kv_peak, position_mode_ablation, position_mode_csv, run_bench,
};
use pykv_core::math::Matrix;
use pykv_core::model::{
    decode_step, greedy_token, init_model, perplexity, prefill, sample_eval_text, ModelConfig,
    PositionMode,
};
use pykv_core::policy::{CachePolicy, PyramidPolicyConfig};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {id:02} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id:02} {name} failed: {detail}");
}

fn lossless_pyramid(layers: usize) -> CachePolicy {
    let mut cfg = PyramidPolicyConfig::new(layers);
    cfg.p0 = 1.0;
    cfg.decay = 1.0;
    cfg.budget = None;
    CachePolicy::Pyramid(cfg)
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.random_range(0..vocab as u32))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Criterion 1: pyramid with retention 1.0 everywhere and no budget matches
/// full-cache logits within 1e-6 max-abs over a 64-token prompt plus 32
/// decode steps, for 10 random seeds, in under a minute.
#[test]
fn criterion_01_lossless_limit() {
    let started = Instant::now();
    let mut max_abs = 0.0f32;
    for seed in 0..10u64 {
        let model = init_model(&ModelConfig::desk(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
        let prompt = random_tokens(&mut rng, 64, model.config.vocab);

        let (full_out, mut full_session) =
            prefill(&model, &prompt, &CachePolicy::Full, false).unwrap();
        let (pyr_out, mut pyr_session) =
            prefill(&model, &prompt, &lossless_pyramid(8), false).unwrap();
        for (a, b) in full_out.logits.iter().zip(&pyr_out.logits) {
            max_abs = max_abs.max((a - b).abs());
        }
        let mut next = greedy_token(&full_out.logits);
        for _ in 0..32 {
            let f = decode_step(&model, next, &mut full_session).unwrap();
            let p = decode_step(&model, next, &mut pyr_session).unwrap();
            for (a, b) in f.logits.iter().zip(&p.logits) {
                max_abs = max_abs.max((a - b).abs());
            }
            next = greedy_token(&f.logits);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        1,
        "lossless-limit",
        max_abs <= 1e-6 && elapsed < 60.0,
        &format!("max |logit diff| = {max_abs:e}, {elapsed:.1}s"),
    );
}

/// Criterion 2: with the default calibrated schedule, peak KV entries after a
/// 512-token prefill land in [0.43, 0.47] of the full-cache peak.
#[test]
fn criterion_02_compression_ratio() {
    let model = init_model(&ModelConfig::desk(1234)).unwrap();
    let policy = CachePolicy::Pyramid(PyramidPolicyConfig::default_calibrated(8));
    let rec = run_bench(&model, &policy, 1, 512, 0, 99).unwrap();
    let ratio = rec.kv_entries_peak as f64 / full_cache_kv_peak(8, 1, 512, 0) as f64;
    report(
        2,
        "compression-ratio",
        (0.43..=0.47).contains(&ratio),
        &format!("ratio = {ratio:.4}"),
    );
}

/// Criterion 3: after every decode step under the pyramid policy, the most
/// recent L token positions are present in every layer's cache (256 steps).
#[test]
fn criterion_03_recent_window_retention() {
    let model = init_model(&ModelConfig::desk(7)).unwrap();
    let cfg = PyramidPolicyConfig::default_calibrated(8);
    let window = cfg.recent_window_min;
    let policy = CachePolicy::Pyramid(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let prompt = random_tokens(&mut rng, 64, model.config.vocab);
    let (out, mut session) = prefill(&model, &prompt, &policy, false).unwrap();
    let mut next = greedy_token(&out.logits);
    let mut violations = 0usize;
    for step in 0..256usize {
        let out = decode_step(&model, next, &mut session).unwrap();
        next = greedy_token(&out.logits);
        let newest = 64 + step;
        let want: Vec<usize> = (newest + 1 - window..=newest).collect();
        for l in 0..8 {
            if !session.caches().layer(l).positions().ends_with(&want) {
                violations += 1;
            }
        }
    }
    report(
        3,
        "recent-window-retention",
        violations == 0,
        &format!("{violations} violations"),
    );
}

/// Criterion 4: with a per-layer budget of 128 and window 16, every layer's
/// cache stays at or below 144 entries across 10,000 decode steps, and the
/// byte accounting is constant once saturated.
#[test]
fn criterion_04_bounded_streaming() {
    let mut model_cfg = ModelConfig::small(11);
    model_cfg.max_seq = 16_000;
    let model = init_model(&model_cfg).unwrap();
    let mut cfg = PyramidPolicyConfig::default_calibrated(4);
    cfg.budget = Some(128);
    cfg.recent_window_min = 16;
    let policy = CachePolicy::Pyramid(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prompt = random_tokens(&mut rng, 32, model.config.vocab);
    let (out, mut session) = prefill(&model, &prompt, &policy, false).unwrap();
    let mut next = greedy_token(&out.logits);
    let mut max_len = 0usize;
    let mut tail_bytes = Vec::new();
    let steps = 10_000usize;
    for step in 0..steps {
        let out = decode_step(&model, next, &mut session).unwrap();
        next = greedy_token(&out.logits);
        let lengths = session.caches().lengths();
        max_len = max_len.max(lengths.iter().copied().max().unwrap());
        if step >= steps - 2000 {
            tail_bytes.push(session.caches().kv_bytes(2, 16, 4));
        }
    }
    let constant_after_saturation = tail_bytes.windows(2).all(|w| w[0] == w[1]);
    report(
        4,
        "bounded-streaming",
        max_len <= 144 && constant_after_saturation,
        &format!("max layer length = {max_len}, tail bytes constant = {constant_after_saturation}"),
    );
}

/// Criterion 5: select_pvc agrees exactly (including tie-breaks) with a
/// brute-force scan oracle on 10,000 random weight vectors of lengths 1-512.
#[test]
fn criterion_05_selection_oracle() {
    fn oracle(weights: &[f32], k: usize) -> Vec<usize> {
        let mut taken = vec![false; weights.len()];
        for _ in 0..k.min(weights.len()) {
            let mut best: Option<usize> = None;
            for i in 0..weights.len() {
                if taken[i] {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) if weights[i] >= weights[b] => Some(i),
                    keep => keep,
                };
            }
            taken[best.unwrap()] = true;
        }
        (0..weights.len()).filter(|&i| taken[i]).collect()
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut mismatches = 0usize;
    for case in 0..10_000usize {
        let n = rng.random_range(1..=512usize);
        // half the cases draw from a tiny value pool to force ties
        let weights: Vec<f32> = if case % 2 == 0 {
            (0..n)
                .map(|_| rng.random_range(0..5) as f32 * 0.25)
                .collect()
        } else {
            (0..n).map(|_| rng.random_range(0.0..1.0f32)).collect()
        };
        let retention = rng.random_range(0.01..=1.0f64);
        let min_len = rng.random_range(0..8usize);
        let got = pykv_core::policy::select_pvc(&weights, retention, min_len);
        let k = got.len();
        if got != oracle(&weights, k) {
            mismatches += 1;
        }
    }
    report(
        5,
        "selection-oracle",
        mismatches == 0,
        &format!("{mismatches} mismatches of 10000"),
    );
}

/// Criterion 6: overlap_ratio matches an independent set-intersection
/// computation exactly on 1,000 random index-set pairs.
#[test]
fn criterion_06_overlap_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let univ = rng.random_range(4..200usize);
        let mut a: Vec<usize> = (0..univ).filter(|_| rng.random_bool(0.4)).collect();
        let mut b: Vec<usize> = (0..univ).filter(|_| rng.random_bool(0.4)).collect();
        a.dedup();
        b.dedup();
        if b.is_empty() {
            b.push(rng.random_range(0..univ));
        }
        let got = overlap_ratio(&a, &b).unwrap();
        let sa: HashSet<usize> = a.iter().copied().collect();
        let sb: HashSet<usize> = b.iter().copied().collect();
        let want = sa.intersection(&sb).count() as f64 / sb.len() as f64;
        if got != want {
            mismatches += 1;
        }
    }
    report(
        6,
        "overlap-oracle",
        mismatches == 0,
        &format!("{mismatches} mismatches of 1000"),
    );
}

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

/// Criterion 7: top_p = 1.0 yields an all-ones heatmap, and ensemble mode
/// equals separate mode on an analytically uniform trace (buckets whose
/// ensemble windows stay inside the recent region).
#[test]
fn criterion_07_rac_degenerate_cases() {
    let model = init_model(&ModelConfig::small(29)).unwrap();
    let text = sample_eval_text(&model, 3, 60, 0.5).unwrap();
    let live = pykv_core::analysis::capture_trace(&model, &text).unwrap();
    let mut all_ones = true;
    for mode in [RacMode::Separate, RacMode::Ensemble] {
        let rep = rac_heatmap(&live, &default_d_grid(), 1.0, mode, 0.10).unwrap();
        all_ones &= rep.values().iter().all(|&v| v == 1.0);
    }

    let synth = uniform_trace(2, 2, 60);
    let interior = [0.0, 0.05, 0.10, 0.15, 0.20];
    let sep = rac_heatmap(&synth, &interior, 0.8, RacMode::Separate, 0.10).unwrap();
    let ens = rac_heatmap(&synth, &interior, 0.8, RacMode::Ensemble, 0.10).unwrap();
    let modes_equal = sep.values() == ens.values();
    report(
        7,
        "rac-degenerate-cases",
        all_ones && modes_equal,
        &format!("all-ones = {all_ones}, ensemble == separate = {modes_equal}"),
    );
}

fn icr_probe_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 8,
        heads: 4,
        head_dim: 64,
        vocab: 64,
        mlp_ratio: 4.0,
        seed,
        max_seq: 4096,
        position_mode: PositionMode::Gather,
    }
}

fn icr_direction(seed_base: u64) -> (f64, f64) {
    let mut first_inflation = Vec::new();
    let mut last_inflation = Vec::new();
    for i in 0..20u64 {
        let seed = seed_base + i;
        let model = init_model(&icr_probe_config(seed)).unwrap();
        let eval = sample_eval_text(&model, seed ^ 0x5eed, 72, 0.25).unwrap();
        let base = perplexity(&model, &eval, &CachePolicy::Full).unwrap();
        let first = icr_sweep(&model, &eval, 0, &[0.2]).unwrap()[0];
        let last = icr_sweep(&model, &eval, 7, &[0.2]).unwrap()[0];
        first_inflation.push(first / base);
        last_inflation.push(last / base);
    }
    (median(first_inflation), median(last_inflation))
}

/// Criterion 8: over 20 seeded 8-layer models, the median perplexity
/// inflation from compressing only the first layer to retention 0.2 exceeds
/// the median inflation from compressing only the last layer. Statistical:
/// rerun once with fresh seeds before declaring failure.
#[test]
fn criterion_08_icr_direction() {
    let (mut first, mut last) = icr_direction(0);
    if first <= last {
        let rerun = icr_direction(1000);
        first = rerun.0;
        last = rerun.1;
    }
    report(
        8,
        "icr-direction",
        first > last,
        &format!("median inflation first = {first:.4}, last = {last:.4}"),
    );
}

/// Criterion 9: at the default schedule, cumulative attention cells for
/// prefill 512 + generation 128 stay at or below 60% of the full-cache
/// closed form.
#[test]
fn criterion_09_work_reduction() {
    let model = init_model(&ModelConfig::desk(1234)).unwrap();
    let policy = CachePolicy::Pyramid(PyramidPolicyConfig::default_calibrated(8));
    let rec = run_bench(&model, &policy, 1, 512, 128, 99).unwrap();
    let closed = full_cache_attn_cells(8, 4, 512, 128);
    let ratio = rec.attn_cells as f64 / closed as f64;
    report(
        9,
        "work-reduction",
        ratio <= 0.60,
        &format!("cell ratio = {ratio:.4}"),
    );
}

/// Criterion 10: save then load round-trips 100 random traces bit-exactly,
/// and the three malformed-file cases raise their distinct errors.
#[test]
fn criterion_10_trace_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut round_trips_ok = true;
    for i in 0..100 {
        let layers = rng.random_range(1..4usize);
        let heads = rng.random_range(1..4usize);
        let seq = rng.random_range(2..12usize);
        let mats = (0..layers * heads)
            .map(|_| {
                let mut m = Matrix::zeros(seq, seq);
                for r in 0..seq {
                    let mut sum = 0.0f32;
                    for c in 0..=r {
                        let v = rng.random_range(0.001..1.0f32);
                        m.set(r, c, v);
                        sum += v;
                    }
                    for c in 0..=r {
                        m.set(r, c, m.get(r, c) / sum);
                    }
                }
                m
            })
            .collect();
        let trace = AttentionTrace::new(layers, heads, seq, mats).unwrap();
        let path = dir.path().join(format!("t{i}.atrc"));
        save_trace(&trace, &path).unwrap();
        round_trips_ok &= load_trace(&path).unwrap() == trace;
    }

    let good = dir.path().join("good.atrc");
    save_trace(&uniform_trace(1, 1, 4), &good).unwrap();
    let bytes = std::fs::read(&good).unwrap();

    let magic_path = dir.path().join("magic.atrc");
    let mut corrupted = bytes.clone();
    corrupted[1] = b'?';
    std::fs::write(&magic_path, corrupted).unwrap();
    let bad_magic = matches!(load_trace(&magic_path), Err(TraceError::BadMagic));

    let trunc_path = dir.path().join("trunc.atrc");
    std::fs::write(&trunc_path, &bytes[..bytes.len() - 3]).unwrap();
    let truncated = matches!(load_trace(&trunc_path), Err(TraceError::Truncated { .. }));

    let dims_path = dir.path().join("dims.atrc");
    let mut huge = Vec::new();
    huge.extend_from_slice(&TRACE_MAGIC);
    huge.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    for _ in 0..3 {
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
    }
    std::fs::write(&dims_path, huge).unwrap();
    let overflow = matches!(load_trace(&dims_path), Err(TraceError::DimensionOverflow));

    report(
        10,
        "trace-round-trip",
        round_trips_ok && bad_magic && truncated && overflow,
        &format!(
            "round-trips = {round_trips_ok}, bad-magic = {bad_magic}, truncated = {truncated}, overflow = {overflow}"
        ),
    );
}

/// Criterion 11: the position-encoding ablation harness runs both gather and
/// re-encode modes and emits a deterministic comparison CSV.
#[test]
fn criterion_11_position_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::small(37);
    let mut policy_cfg = PyramidPolicyConfig::default_calibrated(4);
    policy_cfg.recent_window_min = 8;
    policy_cfg.min_pvc_lens = vec![4; 4];
    let policy = CachePolicy::Pyramid(policy_cfg);
    let model = init_model(&cfg).unwrap();
    let eval = sample_eval_text(&model, 9, 48, 0.5).unwrap();

    let rows = position_mode_ablation(&cfg, &policy, &eval, 48, 8, 3).unwrap();
    let csv = position_mode_csv(&rows);
    let path = dir.path().join("positions.csv");
    std::fs::write(&path, &csv).unwrap();

    let again = position_mode_csv(&position_mode_ablation(&cfg, &policy, &eval, 48, 8, 3).unwrap());
    let deterministic = csv == again;
    let has_both = rows.len() == 2 && rows[0].mode == "gather" && rows[1].mode == "reencode";
    let written = std::fs::read_to_string(&path).unwrap();
    let well_formed =
        written.lines().count() == 3 && written.starts_with("mode,perplexity,kv_entries_peak\n");
    report(
        11,
        "position-ablation",
        deterministic && has_both && well_formed,
        &format!("deterministic = {deterministic}, rows = {}", rows.len()),
    );
}
