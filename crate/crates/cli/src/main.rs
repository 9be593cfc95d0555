//! `pykv` command line: greedy generation, policy benchmarks, and the
//! attention-analysis reports, all driven by a flat engine config file.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pykv_core::analysis::{
    capture_trace, default_d_grid, icr_report, load_trace, nonshared_overlap, rac_heatmap,
    AttentionTrace, RacMode,
};
use pykv_core::bench::{run_bench, write_csv, BenchRecord};
use pykv_core::model::{decode_step, greedy_token, init_model, prefill, sample_eval_text, Model};
use pykv_core::policy::CachePolicy;

use config::{default_policy, parse_config, EngineConfig};

#[derive(Parser)]
#[command(
    name = "pykv",
    version,
    about = "Desk-scale transformer inference with KV-cache compression policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy generation from a prompt, printing token ids and cache stats.
    Generate {
        /// Engine config file (flat `section.key = value`).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        prompt: PromptSource,
        /// Decode steps to run after the prompt (0 prints prefill stats only).
        #[arg(long)]
        steps: usize,
        /// Override the config's policy by name (full, local, heavy_hitter, pyramid).
        #[arg(long)]
        policy: Option<String>,
        /// Print per-step cache sizes.
        #[arg(long)]
        verbose: bool,
    },
    /// Run policies through the benchmark harness and write a CSV.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Concurrent independent sequences.
        #[arg(long)]
        batch: usize,
        /// Prompt length of every sequence.
        #[arg(long)]
        prefill: usize,
        /// Decode steps per sequence.
        #[arg(long)]
        gen: usize,
        /// Comma-separated policy names; each produces one CSV row.
        #[arg(long, value_delimiter = ',')]
        policy: Vec<String>,
        /// Output CSV path.
        #[arg(long)]
        csv: PathBuf,
    },
    /// Attention analyses over live models or saved traces.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PromptSource {
    /// Read the prompt as raw bytes (token id = byte value).
    #[arg(long)]
    prompt_bytes: Option<PathBuf>,
    /// Generate a random prompt of this length from the run seed.
    #[arg(long)]
    prompt_random: Option<usize>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct TraceSource {
    /// Saved attention trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Engine config; the model captures a live trace over self-generated text.
    #[arg(long)]
    model_config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Per-layer retention sweep: perplexity while compressing one layer.
    Icr {
        #[arg(long)]
        model_config: PathBuf,
        /// Retention grid, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.4, 0.6, 0.8, 1.0])]
        retention_grid: Vec<f64>,
        /// Length of the self-generated evaluation text.
        #[arg(long, default_value_t = 96)]
        eval_len: usize,
        /// Sampling temperature of the evaluation text.
        #[arg(long, default_value_t = 0.25)]
        eval_temp: f32,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Recent-attention overlap heatmap against the last token's selection.
    Rac {
        #[command(flatten)]
        source: TraceSource,
        #[arg(long, default_value_t = 0.8)]
        top_p: f64,
        /// separate, ensemble, or both.
        #[arg(long, default_value = "both")]
        mode: String,
        /// Ensemble window span as a fraction of the sequence.
        #[arg(long, default_value_t = 0.10)]
        span: f64,
        /// Bucket left edges, comma separated.
        #[arg(long, value_delimiter = ',')]
        d_grid: Option<Vec<f64>>,
        /// Live-capture sequence length (model source only).
        #[arg(long, default_value_t = 128)]
        eval_len: usize,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Non-shared pivotal-context overlap study.
    Nonshared {
        #[command(flatten)]
        source: TraceSource,
        #[arg(long, default_value_t = 0.8)]
        top_p: f64,
        #[arg(long, default_value_t = 128)]
        eval_len: usize,
        #[arg(long)]
        csv: PathBuf,
    },
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_engine_config(path: &Path) -> Result<EngineConfig, CliError> {
    let mut cfg = parse_config(path).map_err(config_err)?;
    if let Ok(seed) = std::env::var("PYKV_SEED") {
        cfg.run.seed = seed
            .parse()
            .map_err(|_| CliError::Config(format!("PYKV_SEED must be an integer, got '{seed}'")))?;
    }
    Ok(cfg)
}

fn build_model(cfg: &EngineConfig) -> Result<Model, CliError> {
    init_model(&cfg.model).map_err(config_err)
}

fn resolve_policy(cfg: &EngineConfig, name: Option<&str>) -> Result<CachePolicy, CliError> {
    match name {
        None => Ok(cfg.policy.clone()),
        Some(name) if name == cfg.policy.name() => Ok(cfg.policy.clone()),
        Some(name) => default_policy(name, cfg.model.layers)
            .ok_or_else(|| CliError::Config(format!("unknown policy '{name}'"))),
    }
}

fn seeded_prompt(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    // splitmix-style stream; cheap and stable across platforms
    let mut state = seed.wrapping_add(0x9e3779b97f4a7c15);
    (0..len)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 33) % vocab as u64) as u32
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate {
            config,
            prompt,
            steps,
            policy,
            verbose,
        } => cmd_generate(&config, prompt, steps, policy.as_deref(), verbose),
        Command::Bench {
            config,
            batch,
            prefill,
            gen,
            policy,
            csv,
        } => cmd_bench(&config, batch, prefill, gen, &policy, &csv),
        Command::Analyze { what } => cmd_analyze(what),
    }
}

fn cmd_generate(
    config_path: &Path,
    prompt: PromptSource,
    steps: usize,
    policy_name: Option<&str>,
    verbose: bool,
) -> Result<(), CliError> {
    let cfg = load_engine_config(config_path)?;
    let policy = resolve_policy(&cfg, policy_name)?;
    let model = build_model(&cfg)?;

    let tokens: Vec<u32> = if let Some(path) = prompt.prompt_bytes {
        std::fs::read(&path)
            .map_err(|e| CliError::Runtime(format!("cannot read prompt file: {e}")))?
            .into_iter()
            .map(u32::from)
            .collect()
    } else {
        let len = prompt
            .prompt_random
            .expect("clap guarantees one prompt source");
        seeded_prompt(cfg.run.seed, len, model.config.vocab)
    };

    let (out, mut session) = prefill(&model, &tokens, &policy, false).map_err(runtime_err)?;
    println!(
        "policy={} prompt_len={} steps={}",
        policy.name(),
        tokens.len(),
        steps
    );
    if verbose {
        println!(
            "prefill: kv_entries={} lengths={}",
            session.caches().kv_entry_count(),
            lengths_csv(&session)
        );
    }
    let mut generated = Vec::with_capacity(steps);
    let mut next = greedy_token(&out.logits);
    for step in 0..steps {
        generated.push(next);
        let out = decode_step(&model, next, &mut session).map_err(runtime_err)?;
        if verbose {
            println!(
                "step {}: token={} kv_entries={} lengths={}",
                step + 1,
                next,
                session.caches().kv_entry_count(),
                lengths_csv(&session)
            );
        }
        next = greedy_token(&out.logits);
    }
    let rendered: Vec<String> = generated.iter().map(u32::to_string).collect();
    println!("tokens: {}", rendered.join(" "));
    println!(
        "kv_entries={} kv_bytes={} attn_cells={} sort_ops={}",
        session.caches().kv_entry_count(),
        session
            .caches()
            .kv_bytes(model.config.heads, model.config.head_dim, 4),
        session.stats.attn_cells,
        session.sort_ops()
    );
    Ok(())
}

fn lengths_csv(session: &pykv_core::model::Session) -> String {
    let lens: Vec<String> = session
        .caches()
        .lengths()
        .iter()
        .map(|l| l.to_string())
        .collect();
    lens.join(",")
}

fn cmd_bench(
    config_path: &Path,
    batch: usize,
    prefill_len: usize,
    gen_len: usize,
    policy_names: &[String],
    csv_path: &Path,
) -> Result<(), CliError> {
    let cfg = load_engine_config(config_path)?;
    if policy_names.is_empty() {
        return Err(CliError::Config(
            "at least one policy name is required".into(),
        ));
    }
    let model = build_model(&cfg)?;
    let csv_path = resolve_out(cfg.run.out_dir.as_deref(), csv_path)?;
    let mut records: Vec<BenchRecord> = Vec::new();
    for name in policy_names {
        let policy = resolve_policy(&cfg, Some(name))?;
        let record = run_bench(&model, &policy, batch, prefill_len, gen_len, cfg.run.seed)
            .map_err(runtime_err)?;
        records.push(record);
    }
    write_csv(&records, &csv_path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv_path.display())))?;
    println!("wrote {} records to {}", records.len(), csv_path.display());
    Ok(())
}

/// Resolve a relative output path against the config's `run.out_dir`.
fn resolve_out(out_dir: Option<&Path>, path: &Path) -> Result<PathBuf, CliError> {
    match out_dir {
        Some(dir) if path.is_relative() => {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
            Ok(dir.join(path))
        }
        _ => Ok(path.to_path_buf()),
    }
}

fn trace_from_source(
    source: &TraceSource,
    eval_len: usize,
) -> Result<(AttentionTrace, Option<PathBuf>), CliError> {
    if let Some(path) = &source.trace {
        let trace = load_trace(path).map_err(|e| CliError::Runtime(format!("trace error: {e}")))?;
        return Ok((trace, None));
    }
    let path = source
        .model_config
        .as_ref()
        .expect("clap guarantees one trace source");
    let cfg = load_engine_config(path)?;
    let model = build_model(&cfg)?;
    let text = sample_eval_text(&model, cfg.run.seed, eval_len, 0.25).map_err(runtime_err)?;
    let trace = capture_trace(&model, &text).map_err(runtime_err)?;
    Ok((trace, cfg.run.out_dir))
}

fn cmd_analyze(what: AnalyzeCommand) -> Result<(), CliError> {
    match what {
        AnalyzeCommand::Icr {
            model_config,
            retention_grid,
            eval_len,
            eval_temp,
            csv,
        } => {
            let cfg = load_engine_config(&model_config)?;
            let model = build_model(&cfg)?;
            let eval =
                sample_eval_text(&model, cfg.run.seed, eval_len, eval_temp).map_err(runtime_err)?;
            let report = icr_report(&model, &eval, &retention_grid).map_err(runtime_err)?;
            let csv = resolve_out(cfg.run.out_dir.as_deref(), &csv)?;
            std::fs::write(&csv, report.to_csv())
                .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv.display())))?;
            println!(
                "wrote {} rows to {}",
                model.config.layers * retention_grid.len(),
                csv.display()
            );
        }
        AnalyzeCommand::Rac {
            source,
            top_p,
            mode,
            span,
            d_grid,
            eval_len,
            csv,
        } => {
            let modes: Vec<RacMode> = match mode.as_str() {
                "separate" => vec![RacMode::Separate],
                "ensemble" => vec![RacMode::Ensemble],
                "both" => vec![RacMode::Separate, RacMode::Ensemble],
                other => {
                    return Err(CliError::Config(format!(
                        "mode must be separate, ensemble, or both, got '{other}'"
                    )))
                }
            };
            let (trace, out_dir) = trace_from_source(&source, eval_len)?;
            let csv = resolve_out(out_dir.as_deref(), &csv)?;
            let grid = d_grid.unwrap_or_else(default_d_grid);
            let mut out = String::from("layer,d_bucket,mode,overlap\n");
            let mut rows = 0usize;
            for mode in modes {
                let report = rac_heatmap(&trace, &grid, top_p, mode, span).map_err(runtime_err)?;
                for line in report.to_csv().lines().skip(1) {
                    out.push_str(line);
                    out.push('\n');
                    rows += 1;
                }
            }
            std::fs::write(&csv, out)
                .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv.display())))?;
            println!("wrote {rows} rows to {}", csv.display());
        }
        AnalyzeCommand::Nonshared {
            source,
            top_p,
            eval_len,
            csv,
        } => {
            let (trace, out_dir) = trace_from_source(&source, eval_len)?;
            let csv = resolve_out(out_dir.as_deref(), &csv)?;
            let report = nonshared_overlap(&trace, top_p).map_err(runtime_err)?;
            std::fs::write(&csv, report.to_csv())
                .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv.display())))?;
            println!("wrote {} rows to {}", report.rows.len(), csv.display());
        }
    }
    Ok(())
}
