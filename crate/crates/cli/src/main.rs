// SPDX-License-Identifier: MIT OR Apache-2.0

//! `attnscope precompute` builds an artifact cache; `attnscope serve`
//! exposes it over HTTP.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use attnscope_core::attribution::{LossKind, Reduction};
use attnscope_core::corpus::{FieldMap, Format};
use attnscope_core::model::Baseline;
use attnscope_core::pipeline::{missing_parts, precompute, PrecomputeConfig};
use attnscope_core::projection::Method;
use attnscope_core::store::{ArtifactStore, CreationParams};
use attnscope_server::{AppState, ServerError};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "attnscope", version, about = "Attention attribution workbench")]
struct Cli {
    /// Compute device. Only the CPU backend exists.
    #[arg(long, global = true, env = "ATTNSCOPE_DEVICE", default_value = "cpu", value_parser = ["cpu"])]
    device: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate outputs and precompute projections and head importance.
    Precompute(PrecomputeArgs),
    /// Serve a complete cache.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct PrecomputeArgs {
    /// Built-in model name or a local model directory.
    #[arg(long, env = "ATTNSCOPE_MODEL", default_value = "tiny-seq2seq")]
    model: String,
    /// Dataset file (jsonl or csv).
    #[arg(long)]
    dataset: PathBuf,
    /// Dataset format; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<Format>,
    /// Column mapping, e.g. `input=document,reference=summary,id=key`.
    #[arg(long, default_value = "input=input")]
    field_map: FieldMap,
    /// Cache directory to create or update.
    #[arg(long, default_value = "attnscope-cache")]
    output: PathBuf,
    #[arg(long, default_value_t = attnscope_core::attribution::DEFAULT_IG_STEPS)]
    ig_steps: usize,
    #[arg(long, default_value_t = attnscope_core::attribution::DEFAULT_ATTENTION_STEPS)]
    attn_steps: usize,
    /// `zero` or `pad`.
    #[arg(long, default_value = "zero")]
    baseline: Baseline,
    /// `task_loss` or `predicted_logit`.
    #[arg(long, default_value = "task_loss")]
    loss_target: LossKind,
    /// `max_abs` or `sum_abs`.
    #[arg(long, default_value = "max_abs")]
    reduction: Reduction,
    #[arg(long, default_value = "umap")]
    projection: Method,
    #[arg(long)]
    n_neighbors: Option<usize>,
    #[arg(long)]
    min_dist: Option<f64>,
    #[arg(long)]
    perplexity: Option<f64>,
    /// Seeds projection and any other randomness.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Keep only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
    /// Longest generated continuation.
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "ATTNSCOPE_CACHE_DIR")]
    cache_dir: PathBuf,
    #[arg(long, env = "ATTNSCOPE_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "ATTNSCOPE_HOST", default_value = "127.0.0.1")]
    host: IpAddr,
    /// Model to load instead of the one recorded in the manifest.
    #[arg(long, env = "ATTNSCOPE_MODEL")]
    model: Option<String>,
}

fn progress_line(value: serde_json::Value) {
    println!("{value}");
}

fn run_precompute(a: PrecomputeArgs) -> Result<(), String> {
    let mut params = CreationParams {
        attn_steps: a.attn_steps,
        ig_steps: a.ig_steps,
        baseline: a.baseline,
        loss: a.loss_target,
        reduction: a.reduction,
        limit: a.limit,
        seed: a.seed,
        ..Default::default()
    };
    params.projection.method = a.projection;
    params.projection.seed = a.seed;
    if let Some(k) = a.n_neighbors {
        params.projection.n_neighbors = k;
    }
    if let Some(d) = a.min_dist {
        params.projection.min_dist = d;
    }
    if let Some(p) = a.perplexity {
        params.projection.perplexity = p;
    }
    if let Some(t) = a.max_new_tokens {
        params.generation.max_new_tokens = t;
    }
    params.projection.validate().map_err(|e| e.to_string())?;
    params.generation.validate().map_err(|e| e.to_string())?;
    if a.attn_steps == 0 || a.ig_steps == 0 {
        return Err("step counts must be positive".into());
    }
    let cfg = PrecomputeConfig {
        model_id: a.model,
        dataset: a.dataset,
        format: a.format,
        field_map: a.field_map,
        output: a.output.clone(),
        params,
    };
    let started = std::time::Instant::now();
    let report = precompute(&cfg, &mut |stage| {
        log::info!("running stage {stage}");
        progress_line(json!({"event": "stage", "stage": stage}));
    })
    .map_err(|e| {
        let incomplete = ArtifactStore::open(&a.output).is_ok_and(|s| !s.manifest().complete);
        if incomplete {
            format!("{e} (cache in {} is marked incomplete)", a.output.display())
        } else {
            e.to_string()
        }
    })?;
    let ran: Vec<&str> = report
        .stages
        .iter()
        .filter(|(_, r)| *r)
        .map(|(s, _)| s.as_str())
        .collect();
    progress_line(json!({
        "event": "done",
        "examples": report.examples,
        "ran": ran,
        "output": a.output,
        "seconds": started.elapsed().as_secs_f64(),
    }));
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<(), String> {
    let missing =
        missing_parts(&a.cache_dir).map_err(|e| format!("cannot open cache {}: {e}", a.cache_dir.display()))?;
    if !missing.is_empty() {
        return Err(ServerError::Incomplete {
            dir: a.cache_dir.display().to_string(),
            missing,
        }
        .to_string()
            + "; rerun `attnscope precompute` with the same flags to finish it");
    }
    let state = AppState::open_with_model(&a.cache_dir, a.model.as_deref()).map_err(|e| e.to_string())?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let addr = SocketAddr::new(a.host, a.port);
        let listener = match tokio::net::TcpListener::bind(addr).await {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => {
                return Err(format!("port {} is already in use; choose another with --port", a.port));
            }
            Err(e) => return Err(format!("cannot listen on {addr}: {e}")),
        };
        let bound = listener.local_addr().map_err(|e| e.to_string())?;
        println!("serving {} on http://{bound}/", a.cache_dir.display());
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        attnscope_server::serve_on(state, listener, shutdown)
            .await
            .map_err(|e| e.to_string())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Precompute(a) => run_precompute(a),
        Command::Serve(a) => run_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
