//! Deterministic seeded decoder-only transformer with prefill and
//! single-token decode passes that route all KV handling through a cache
//! policy, plus teacher-forced perplexity evaluation.
//!
//! Architecture: pre-norm blocks with RMS normalization, GELU MLP, rotary
//! position encoding, tied embedding/output projection. Weights are fully
//! determined by `(config, seed)`; the model is immutable after init and
//! shareable across workers. Each in-flight sequence owns a [`Session`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::kv::{CacheError, CacheSet, LayerKvCache};
use crate::math::{attention_forward, rotary_encode, HeadTensor, MathError, Matrix};
use crate::policy::{CachePolicy, PolicyError, PolicyRunState};

const RMS_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("sequence length {len} exceeds configured max {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("perplexity needs at least 2 tokens, got {0}")]
    SequenceTooShort(usize),
    #[error("cache/model shape mismatch: {0}")]
    CacheMismatch(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// How rotary angles are assigned to cached entries after eviction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionMode {
    /// Use the original token positions carried by the cache (default).
    Gather,
    /// Re-encode retained entries densely as positions `0..len`.
    Reencode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
    pub max_seq: usize,
    pub position_mode: PositionMode,
}

impl ModelConfig {
    /// The default desk-scale configuration: 8 layers, 4 heads of 32 dims,
    /// byte-level vocab, 2048 max positions.
    pub fn desk(seed: u64) -> Self {
        Self {
            layers: 8,
            heads: 4,
            head_dim: 32,
            vocab: 256,
            mlp_ratio: 4.0,
            seed,
            max_seq: 2048,
            position_mode: PositionMode::Gather,
        }
    }

    /// A small configuration for quick experiments and tests.
    pub fn small(seed: u64) -> Self {
        Self {
            layers: 4,
            heads: 2,
            head_dim: 16,
            vocab: 64,
            mlp_ratio: 4.0,
            seed,
            max_seq: 4096,
            position_mode: PositionMode::Gather,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn mlp_dim(&self) -> usize {
        (self.mlp_ratio * self.model_dim() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.heads == 0 {
            return fail("heads must be at least 1".into());
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return fail(format!(
                "head_dim must be even and positive, got {}",
                self.head_dim
            ));
        }
        if self.vocab < 2 {
            return fail(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if self.mlp_ratio <= 0.0 {
            return fail(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            ));
        }
        if self.max_seq == 0 {
            return fail("max_seq must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    attn_norm: Vec<f32>, // D
    wq: Vec<f32>,        // D x D, row-major [in][out]
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    mlp_norm: Vec<f32>, // D
    mlp_in: Vec<f32>,   // D x H
    mlp_out: Vec<f32>,  // H x D
}

/// Immutable model weights, fully determined by `(config, seed)`.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    embed: Vec<f32>, // vocab x D
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>, // D
}

/// Initialize a model with weights drawn i.i.d. from normal(0, 0.02) using a
/// ChaCha8 counter-based generator seeded by `config.seed`.
///
/// Draw order is fixed: the embedding table first, then for each layer in
/// ascending index the drawn parameters in lexicographic name order
/// (`mlp_in`, `mlp_out`, `wk`, `wo`, `wq`, `wv`). Norm gains are set to 1 and
/// consume no draws.
pub fn init_model(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::<f32>::new(0.0, INIT_STD).expect("valid std");
    let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(&mut rng)).collect() };

    let d = config.model_dim();
    let h = config.mlp_dim();
    let embed = draw(config.vocab * d);
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let mlp_in = draw(d * h);
        let mlp_out = draw(h * d);
        let wk = draw(d * d);
        let wo = draw(d * d);
        let wq = draw(d * d);
        let wv = draw(d * d);
        layers.push(LayerWeights {
            attn_norm: vec![1.0; d],
            wq,
            wk,
            wv,
            wo,
            mlp_norm: vec![1.0; d],
            mlp_in,
            mlp_out,
        });
    }
    Ok(Model {
        config: config.clone(),
        embed,
        layers,
        final_norm: vec![1.0; d],
    })
}

impl Model {
    /// A model whose drawn weights are all zero (norm gains stay 1). Every
    /// logit vector it produces is uniform; useful as a degenerate baseline.
    pub fn zeroed(config: &ModelConfig) -> Result<Model, ModelError> {
        config.validate()?;
        let d = config.model_dim();
        let h = config.mlp_dim();
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: vec![0.0; d * d],
                wk: vec![0.0; d * d],
                wv: vec![0.0; d * d],
                wo: vec![0.0; d * d],
                mlp_norm: vec![1.0; d],
                mlp_in: vec![0.0; d * h],
                mlp_out: vec![0.0; h * d],
            })
            .collect();
        Ok(Model {
            config: config.clone(),
            embed: vec![0.0; config.vocab * d],
            layers,
            final_norm: vec![1.0; d],
        })
    }
}

/// Logits for the emitted position plus, optionally, the attention weights
/// of every layer and head.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Vocab-length logits of the last processed position.
    pub logits: Vec<f32>,
    /// Per-layer, per-head attention matrices (set when capture is requested).
    pub attn: Option<Vec<Vec<Matrix>>>,
}

/// Counters accumulated over a session's lifetime.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunStats {
    /// Attention score cells computed (summed over heads and layers).
    pub attn_cells: u64,
}

/// Per-sequence inference state: the compressed caches, policy state, and
/// work counters. Owned by exactly one in-flight sequence.
#[derive(Debug, Clone)]
pub struct Session {
    caches: CacheSet,
    state: PolicyRunState,
    policy: CachePolicy,
    next_position: usize,
    shape: (usize, usize, usize, usize),
    pub stats: RunStats,
}

impl Session {
    pub fn caches(&self) -> &CacheSet {
        &self.caches
    }

    pub fn policy(&self) -> &CachePolicy {
        &self.policy
    }

    /// Total tokens processed so far, including evicted ones.
    pub fn positions_seen(&self) -> usize {
        self.next_position
    }

    pub fn sort_ops(&self) -> u64 {
        self.state.sort_ops
    }
}

fn rms_norm_rows(x: &[f32], rows: usize, d: usize, gain: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut ss = 0.0f32;
        for &v in row {
            ss += v * v;
        }
        let scale = 1.0 / (ss / d as f32 + RMS_EPS).sqrt();
        let orow = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            orow[i] = row[i] * scale * gain[i];
        }
    }
    out
}

/// `y = x * w` for row-major `x: rows x d_in`, `w: d_in x d_out`.
fn matmul_rows(x: &[f32], rows: usize, d_in: usize, w: &[f32], d_out: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * d_out];
    for r in 0..rows {
        let xrow = &x[r * d_in..(r + 1) * d_in];
        let orow = &mut out[r * d_out..(r + 1) * d_out];
        for (i, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[i * d_out..(i + 1) * d_out];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

fn gelu(x: f32) -> f32 {
    // tanh approximation
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044715 * x * x * x)).tanh())
}

fn split_heads(x: &[f32], rows: usize, heads: usize, head_dim: usize) -> HeadTensor {
    let d = heads * head_dim;
    let mut t = HeadTensor::zeros(heads, rows, head_dim);
    for h in 0..heads {
        for r in 0..rows {
            t.vec_mut(h, r)
                .copy_from_slice(&x[r * d + h * head_dim..r * d + (h + 1) * head_dim]);
        }
    }
    t
}

fn merge_heads(t: &HeadTensor) -> Vec<f32> {
    let d = t.heads() * t.head_dim();
    let mut out = vec![0.0f32; t.seq() * d];
    for h in 0..t.heads() {
        for r in 0..t.seq() {
            out[r * d + h * t.head_dim()..r * d + (h + 1) * t.head_dim()]
                .copy_from_slice(t.vec(h, r));
        }
    }
    out
}

/// Head-mean of per-head weight matrices, one row extracted.
fn head_mean_row(weights: &[Matrix], row: usize) -> Vec<f32> {
    let mean = Matrix::mean_of(weights);
    mean.row(row).to_vec()
}

fn rotary_positions(mode: PositionMode, original: &[usize]) -> Vec<usize> {
    match mode {
        PositionMode::Gather => original.to_vec(),
        PositionMode::Reencode => (0..original.len()).collect(),
    }
}

impl Model {
    fn validate_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        for &t in tokens {
            if t as usize >= self.config.vocab {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab,
                });
            }
        }
        Ok(())
    }

    fn embed_rows(&self, tokens: &[u32]) -> Vec<f32> {
        let d = self.config.model_dim();
        let mut x = vec![0.0f32; tokens.len() * d];
        for (r, &t) in tokens.iter().enumerate() {
            x[r * d..(r + 1) * d]
                .copy_from_slice(&self.embed[t as usize * d..(t as usize + 1) * d]);
        }
        x
    }

    /// Logits of the last row of `x` through the final norm and the tied
    /// embedding projection.
    fn output_logits(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let d = self.config.model_dim();
        let normed = rms_norm_rows(&x[(rows - 1) * d..rows * d], 1, d, &self.final_norm);
        let mut logits = vec![0.0f32; self.config.vocab];
        for (t, l) in logits.iter_mut().enumerate() {
            let erow = &self.embed[t * d..(t + 1) * d];
            let mut acc = 0.0f32;
            for i in 0..d {
                acc += normed[i] * erow[i];
            }
            *l = acc;
        }
        logits
    }
}

/// Run the full prompt through the model, handing each layer's keys, values,
/// and attention weights to the policy, which decides what the layer's cache
/// retains. Returns the last-position logits and a [`Session`] holding the
/// compressed caches.
///
/// Policies that compress the prefill forward pass (pyramid) also gather the
/// hidden states between layers, so deeper layers compute attention over the
/// retained entries only. Baseline policies run the full causal forward and
/// evict from the computed caches.
pub fn prefill(
    model: &Model,
    tokens: &[u32],
    policy: &CachePolicy,
    capture_attn: bool,
) -> Result<(StepOutput, Session), ModelError> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    if tokens.len() > cfg.max_seq {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq,
        });
    }
    model.validate_tokens(tokens)?;
    policy.validate(cfg.layers)?;

    let d = cfg.model_dim();
    let hdim = cfg.mlp_dim();
    let n = tokens.len();
    let truncating = policy.compresses_prefill_forward();

    let mut state = PolicyRunState::new(policy, cfg.layers);
    let mut layer_caches = Vec::with_capacity(cfg.layers);
    let mut captured = capture_attn.then(Vec::new);

    let mut x = model.embed_rows(tokens);
    let mut positions: Vec<usize> = (0..n).collect();

    for (l, lw) in model.layers.iter().enumerate() {
        let m = positions.len();
        let normed = rms_norm_rows(&x, m, d, &lw.attn_norm);
        let q = matmul_rows(&normed, m, d, &lw.wq, d);
        let k = matmul_rows(&normed, m, d, &lw.wk, d);
        let v = matmul_rows(&normed, m, d, &lw.wv, d);
        let qh = split_heads(&q, m, cfg.heads, cfg.head_dim);
        let kh = split_heads(&k, m, cfg.heads, cfg.head_dim);
        let vh = split_heads(&v, m, cfg.heads, cfg.head_dim);

        let rot_pos = rotary_positions(cfg.position_mode, &positions);
        let q_rot = rotary_encode(&qh, &rot_pos)?;
        let k_rot = rotary_encode(&kh, &rot_pos)?;
        let (attn_out, weights) = attention_forward(&q_rot, &k_rot, &vh, 0)?;

        let proj = matmul_rows(&merge_heads(&attn_out), m, d, &lw.wo, d);
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi += pi;
        }
        let normed2 = rms_norm_rows(&x, m, d, &lw.mlp_norm);
        let mut inner = matmul_rows(&normed2, m, d, &lw.mlp_in, hdim);
        for v in &mut inner {
            *v = gelu(*v);
        }
        let mlp = matmul_rows(&inner, m, hdim, &lw.mlp_out, d);
        for (xi, pi) in x.iter_mut().zip(&mlp) {
            *xi += pi;
        }

        let full_cache = LayerKvCache::from_parts(kh, vh, positions.clone())?;
        let decision = policy.prefill_layer_decision(l, &weights, m, n, &mut state)?;
        let cache = match &decision {
            None => full_cache,
            Some(dec) => full_cache.gather(&dec.kept_indices)?,
        };
        policy.seed_layer_state(
            l,
            &weights,
            decision.as_ref().map(|d| &d.kept_indices[..]),
            &mut state,
        );

        if truncating {
            if let Some(dec) = &decision {
                x = gather_rows(&x, d, &dec.kept_indices);
                positions = dec.kept_indices.iter().map(|&i| positions[i]).collect();
            }
        }
        if let Some(cap) = captured.as_mut() {
            cap.push(weights);
        }
        layer_caches.push(cache);
    }

    let rows = positions.len();
    let logits = model.output_logits(&x, rows);
    let mut session = Session {
        caches: CacheSet::new(layer_caches),
        state,
        policy: policy.clone(),
        next_position: n,
        shape: (cfg.layers, cfg.heads, cfg.head_dim, cfg.vocab),
        stats: RunStats::default(),
    };
    // Attention cells: each layer computed a causal forward over its active
    // entry count at that layer.
    let mut active = n as u64;
    session.stats.attn_cells = 0;
    for l in 0..cfg.layers {
        session.stats.attn_cells += cfg.heads as u64 * active * (active + 1) / 2;
        active = session.caches.layer(l).len() as u64;
        if !truncating {
            active = n as u64;
        }
    }
    Ok((
        StepOutput {
            logits,
            attn: captured,
        },
        session,
    ))
}

fn gather_rows(x: &[f32], d: usize, indices: &[usize]) -> Vec<f32> {
    let mut out = vec![0.0f32; indices.len() * d];
    for (ni, &oi) in indices.iter().enumerate() {
        out[ni * d..(ni + 1) * d].copy_from_slice(&x[oi * d..(oi + 1) * d]);
    }
    out
}

/// Decode one token against the session's caches: compute its keys and
/// values per layer, attend over the cache plus itself, append, and let the
/// policy re-select what stays. Returns the next-token logits.
pub fn decode_step(
    model: &Model,
    token: u32,
    session: &mut Session,
) -> Result<StepOutput, ModelError> {
    let cfg = &model.config;
    if session.shape != (cfg.layers, cfg.heads, cfg.head_dim, cfg.vocab) {
        return Err(ModelError::CacheMismatch(format!(
            "session built for (layers, heads, head_dim, vocab) = {:?}, model has {:?}",
            session.shape,
            (cfg.layers, cfg.heads, cfg.head_dim, cfg.vocab)
        )));
    }
    model.validate_tokens(&[token])?;
    let pos = session.next_position;
    if pos + 1 > cfg.max_seq {
        return Err(ModelError::SequenceTooLong {
            len: pos + 1,
            max: cfg.max_seq,
        });
    }

    let d = cfg.model_dim();
    let hdim = cfg.mlp_dim();
    session.state.bump_step();
    let total_positions = pos + 1;
    let policy = session.policy.clone();

    let mut x = model.embed_rows(&[token]);
    for l in 0..cfg.layers {
        let lw = &model.layers[l];
        let normed = rms_norm_rows(&x, 1, d, &lw.attn_norm);
        let q = matmul_rows(&normed, 1, d, &lw.wq, d);
        let k = matmul_rows(&normed, 1, d, &lw.wk, d);
        let v = matmul_rows(&normed, 1, d, &lw.wv, d);
        let qh = split_heads(&q, 1, cfg.heads, cfg.head_dim);
        let kh = split_heads(&k, 1, cfg.heads, cfg.head_dim);
        let vh = split_heads(&v, 1, cfg.heads, cfg.head_dim);

        let cache = session.caches.layer(l);
        if let Some(&last) = cache.positions().last() {
            if last >= pos {
                return Err(ModelError::CacheMismatch(format!(
                    "cache already holds position {last}, cannot decode position {pos}"
                )));
            }
        }
        let k_all = cache.keys().concat_seq(&kh);
        let v_all = cache.values().concat_seq(&vh);
        let mut all_positions = cache.positions().to_vec();
        all_positions.push(pos);
        let len_all = all_positions.len();

        let rot_pos = rotary_positions(cfg.position_mode, &all_positions);
        let k_rot = rotary_encode(&k_all, &rot_pos)?;
        let q_rot = rotary_encode(&qh, &rot_pos[len_all - 1..])?;
        let (attn_out, weights) = attention_forward(&q_rot, &k_rot, &v_all, len_all - 1)?;
        session.stats.attn_cells += cfg.heads as u64 * len_all as u64;

        let proj = matmul_rows(&merge_heads(&attn_out), 1, d, &lw.wo, d);
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi += pi;
        }
        let normed2 = rms_norm_rows(&x, 1, d, &lw.mlp_norm);
        let mut inner = matmul_rows(&normed2, 1, d, &lw.mlp_in, hdim);
        for v in &mut inner {
            *v = gelu(*v);
        }
        let mlp = matmul_rows(&inner, 1, hdim, &lw.mlp_out, d);
        for (xi, pi) in x.iter_mut().zip(&mlp) {
            *xi += pi;
        }

        session.caches.layer_mut(l).append(&kh, &vh, pos)?;
        session
            .state
            .observe_decode_row(&policy, l, head_mean_row(&weights, 0));
        if let Some(dec) =
            policy.decode_layer_decision(l, len_all, total_positions, &mut session.state)?
        {
            let gathered = session.caches.layer(l).gather(&dec.kept_indices)?;
            *session.caches.layer_mut(l) = gathered;
            session.state.gather_layer(l, &dec.kept_indices);
        }
    }

    session.next_position = pos + 1;
    let logits = model.output_logits(&x, 1);
    Ok(StepOutput { logits, attn: None })
}

/// Greedy sampling: the smallest token id among the maxima.
pub fn greedy_token(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Temperature sampling over the softmax of `logits / temperature`.
pub fn sample_token<R: rand::Rng>(logits: &[f32], temperature: f32, rng: &mut R) -> u32 {
    assert!(temperature > 0.0, "temperature must be positive");
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| (((l - max) / temperature) as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i as u32;
        }
        r -= w;
    }
    (logits.len() - 1) as u32
}

/// Greedy generation: prefill the prompt, then decode `steps` tokens feeding
/// back the argmax. Returns the generated ids and the final session.
pub fn generate_greedy(
    model: &Model,
    prompt: &[u32],
    steps: usize,
    policy: &CachePolicy,
) -> Result<(Vec<u32>, Session), ModelError> {
    let (out, mut session) = prefill(model, prompt, policy, false)?;
    let mut generated = Vec::with_capacity(steps);
    let mut next = greedy_token(&out.logits);
    for _ in 0..steps {
        generated.push(next);
        let out = decode_step(model, next, &mut session)?;
        next = greedy_token(&out.logits);
    }
    Ok((generated, session))
}

/// Sample an evaluation sequence from the model itself: one seed token, then
/// temperature samples under the full cache. Self-generated text is the one
/// corpus a seeded random model can partly predict, which makes perplexity
/// sensitive to cache damage; sharper (lower) temperatures give more
/// predictable sequences.
pub fn sample_eval_text(
    model: &Model,
    seed: u64,
    len: usize,
    temperature: f32,
) -> Result<Vec<u32>, ModelError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = vec![(seed % model.config.vocab as u64) as u32];
    if len <= 1 {
        return Ok(tokens);
    }
    let (out, mut session) = prefill(model, &tokens, &CachePolicy::Full, false)?;
    let mut logits = out.logits;
    while tokens.len() < len {
        let next = sample_token(&logits, temperature, &mut rng);
        tokens.push(next);
        if tokens.len() < len {
            logits = decode_step(model, next, &mut session)?.logits;
        }
    }
    Ok(tokens)
}

/// Teacher-forced perplexity of `tokens[1..]`: each prediction sees exactly
/// the policy-compressed cache of everything before it. With the full-cache
/// policy this is standard causal perplexity.
pub fn perplexity(model: &Model, tokens: &[u32], policy: &CachePolicy) -> Result<f64, ModelError> {
    if tokens.len() < 2 {
        return Err(ModelError::SequenceTooShort(tokens.len()));
    }
    let (first, mut session) = prefill(model, &tokens[..1], policy, false)?;
    let mut nll = 0.0f64;
    let mut logits = first.logits;
    for i in 1..tokens.len() {
        nll += token_nll(&logits, tokens[i]);
        if i + 1 < tokens.len() {
            logits = decode_step(model, tokens[i], &mut session)?.logits;
        }
    }
    Ok((nll / (tokens.len() - 1) as f64).exp())
}

fn token_nll(logits: &[f32], token: u32) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut lse = 0.0f64;
    for &l in logits {
        lse += (l as f64 - max).exp();
    }
    let lse = max + lse.ln();
    lse - logits[token as usize] as f64
}
