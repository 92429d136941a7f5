//! `brickseq`: dataset generation, training, evaluation, ordering,
//! validation, benchmarking and the guidance server.
//!
//! Exit status is 0 on success, 1 when the command ran but the domain said
//! no (invalid sequence, unbuildable model, diverged training), and 2 for
//! usage errors. Results go to stdout as JSON; logs go to stderr.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use brickseq::datasets::{ingest_model, Dataset, DatasetSpec};
use brickseq::evaluation::{evaluate, Continuer, EvalConfig, TokenBasis};
use brickseq::generate::{generate_conditional, Decode};
use brickseq::metrics::{perplexity, RougeMode};
use brickseq::neural::{load_checkpoint, save_checkpoint, train, LMParams, Profile, TrainConfig};
use brickseq::oracle::{order_prepared, order_sequence, Strategy};
use brickseq::seed;
use brickseq::tokenize::{DiscretizationConfig, Vocabulary};
use brickseq::validity::validate_sequence;
use brickseq::BrickModel;
use brickseq_service::{AppState, LoadedCheckpoint, ServiceConfig, DEFAULT_CHECKPOINT};

#[derive(Debug, Parser)]
#[command(
    name = "brickseq",
    version,
    about = "Brick assembly sequencing: oracle, masked LM, metrics and guidance server"
)]
struct Cli {
    /// Root seed; every subsystem derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Model size profile.
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecodeArg {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Val,
    Test,
    /// Validation and test models together.
    HeldOut,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic models, oracle sequences and token corpora.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        models: usize,
        #[arg(long, default_value_t = 4)]
        seqs_per_model: usize,
        #[arg(long, default_value_t = 8)]
        min_n: usize,
        #[arg(long, default_value_t = 40)]
        max_n: usize,
        /// Oracle strategy used for the training sequences.
        #[arg(long, default_value = "local")]
        strategy: Strategy,
        #[arg(long, default_value_t = 8)]
        l_max: u32,
    },
    /// Train the masked sequence model on a dataset's training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Context length; defaults to the longest stream or 256, whichever is larger.
        #[arg(long)]
        max_seq_len: Option<usize>,
    },
    /// Score conditional generation with BLEU-4 and ROUGE-1/2/L.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Prefix lengths (repeat or comma-separate).
        #[arg(long, value_delimiter = ',', default_values_t = vec![10, 20, 30, 40])]
        prefix: Vec<usize>,
        #[arg(long, default_value_t = 80)]
        horizon: usize,
        #[arg(long, value_enum, default_value = "greedy")]
        decode: DecodeArg,
        /// Score brick tokens only instead of the interleaved stream.
        #[arg(long)]
        brick_only: bool,
        /// Report ROUGE as F1 instead of recall.
        #[arg(long)]
        f1: bool,
        /// Also score the uniform random valid-placement baseline.
        #[arg(long)]
        baseline: bool,
        #[arg(long, value_enum, default_value = "held-out")]
        split: Split,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Compute a valid assembly order for a model file.
    Order {
        model: PathBuf,
        #[arg(long, default_value = "det")]
        strategy: Strategy,
    },
    /// Check a sequence (JSON array file or comma list) against a model.
    Validate { model: PathBuf, sequence: String },
    /// Run the HTTP guidance server.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Offer the oracle frontier when the model has no legal candidate.
        #[arg(long)]
        fallback_oracle: bool,
        /// Restore sessions from and write them to this file on shutdown.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Time full oracle ordering against full model-driven generation.
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Trained checkpoint; without one, freshly initialized weights of the profile are timed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// A failure the domain reports, as opposed to a usage error.
#[derive(Debug)]
struct DomainFailure(Value);

impl std::fmt::Display for DomainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for DomainFailure {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match run(cli) {
        Ok(out) => {
            if !out.is_empty() {
                let _ = writeln!(std::io::stdout(), "{out}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let Some(DomainFailure(v)) = e.downcast_ref::<DomainFailure>() {
                let _ = writeln!(std::io::stdout(), "{v}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenDataset { out, models, seqs_per_model, min_n, max_n, strategy, l_max } => {
            if min_n == 0 || min_n > max_n {
                bail!("need 0 < min-n <= max-n");
            }
            let spec = DatasetSpec {
                models,
                min_n,
                max_n,
                sequences_per_model: seqs_per_model,
                seed: cli.seed,
                strategy,
                discretization: DiscretizationConfig { l_max, ..DiscretizationConfig::default() },
            };
            let ds = Dataset::generate(&spec)?;
            ds.save(&out)?;
            log::info!(
                "wrote {} models and {} sequences to {}",
                ds.models.len(),
                ds.corpus.records.len(),
                out.display()
            );
            Ok(pretty(&json!({
                "out": out,
                "models": ds.models.len(),
                "sequences": ds.corpus.records.len(),
                "vocab_size": ds.corpus.vocab.size(),
                "splits": ds.manifest.splits,
            })))
        }
        Command::Train { data, out, steps, lr, batch_size, max_seq_len } => {
            let ds = Dataset::load(&data)?;
            let vocab = &ds.corpus.vocab;
            let max_len = max_seq_len.unwrap_or_else(|| ds.max_stream_len().max(256));
            let cfg = cli.profile.lm_config(vocab.size(), max_len, seed::derive(cli.seed, "init", 0));
            let defaults = TrainConfig::default();
            let tc = TrainConfig {
                steps: steps.unwrap_or(defaults.steps),
                learning_rate: lr.unwrap_or(defaults.learning_rate),
                batch_size: batch_size.unwrap_or(defaults.batch_size),
                seed: seed::derive(cli.seed, "train", 0),
                ..defaults
            };
            let train_streams = ds.split_streams(&ds.manifest.splits.train);
            log::info!("training {:?} profile on {} streams for {} steps", cli.profile, train_streams.len(), tc.steps);
            let start = Instant::now();
            let (params, report) = train(LMParams::init(&cfg)?, &train_streams, vocab, &tc)?;
            save_checkpoint(&out, &params, Some(vocab))?;
            let val = ds.split_streams(&ds.manifest.splits.val);
            let val_ppl = if val.is_empty() { None } else { Some(perplexity(&params, &val, vocab, cli.seed)?) };
            Ok(pretty(&json!({
                "checkpoint": out,
                "parameters": params.num_parameters(),
                "steps": report.steps,
                "seconds": start.elapsed().as_secs_f64(),
                "train_perplexity": report.perplexity_trace.last(),
                "val_perplexity": val_ppl,
                "perplexity_trace": report.perplexity_trace,
            })))
        }
        Command::Eval { checkpoint, data, prefix, horizon, decode, brick_only, f1, baseline, split, format } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let vocab = Arc::new(ckpt.vocabulary.unwrap_or_else(|| ds.corpus.vocab.clone()));
            let splits = &ds.manifest.splits;
            let ids: Vec<usize> = match split {
                Split::Val => splits.val.clone(),
                Split::Test => splits.test.clone(),
                Split::HeldOut => splits.val.iter().chain(&splits.test).copied().collect(),
            };
            let models: Vec<BrickModel> = ids.iter().map(|&i| ds.models[i].clone()).collect();
            let cfg = EvalConfig {
                prefixes: prefix,
                horizon,
                decode: match decode {
                    DecodeArg::Greedy => Decode::Greedy,
                    DecodeArg::Sampled => Decode::Sampled(seed::derive(cli.seed, "decode", 0)),
                },
                basis: if brick_only { TokenBasis::BrickOnly } else { TokenBasis::Interleaved },
                rouge_mode: if f1 { RougeMode::F1 } else { RougeMode::Recall },
                reference_strategy: ds.manifest.strategy,
                seed: cli.seed,
            };
            let mut grids = vec![evaluate(Continuer::Model(&ckpt.params), &models, vocab.clone(), &cfg)?];
            if baseline {
                grids.push(evaluate(Continuer::RandomValid, &models, vocab, &cfg)?);
            }
            Ok(match format {
                Format::Json => pretty(&json!({ "models": models.len(), "grids": grids })),
                Format::Csv => {
                    let mut csv = grids[0].to_csv();
                    for g in &grids[1..] {
                        csv.extend(g.to_csv().lines().skip(1).map(|l| format!("{l}\n")));
                    }
                    csv.trim_end().to_string()
                }
            })
        }
        Command::Order { model, strategy } => {
            let m = load_model(&model)?;
            let seq = order_sequence(&m, cli.seed, strategy)?;
            Ok(serde_json::to_string(&json!({ "model": m.name, "strategy": strategy, "sequence": seq }))?)
        }
        Command::Validate { model, sequence } => {
            let m = load_model(&model)?;
            let seq = parse_sequence(&sequence)?;
            let report = validate_sequence(&seq, &m)?;
            let v = serde_json::to_value(&report)?;
            if report.ok {
                Ok(serde_json::to_string(&v)?)
            } else {
                Err(DomainFailure(v).into())
            }
        }
        Command::Serve { port, host, checkpoint, fallback_oracle, snapshot } => {
            let mut checkpoints = HashMap::new();
            if let Some(path) = &checkpoint {
                let loaded = LoadedCheckpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
                checkpoints.insert(DEFAULT_CHECKPOINT.to_string(), loaded);
            }
            let state =
                Arc::new(AppState::new(ServiceConfig { fallback_oracle, snapshot: snapshot.clone() }, checkpoints));
            if let Some(path) = snapshot.as_ref().filter(|p| p.exists()) {
                let n = state.restore_snapshot(path)?;
                log::info!("restored {n} sessions from {}", path.display());
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                log::info!("listening on http://{}", listener.local_addr()?);
                brickseq_service::serve(state, listener).await
            })?;
            Ok(String::new())
        }
        Command::Bench { model, checkpoint } => {
            let m = load_model(&model)?;
            let pm = Arc::new(ingest_model(&m)?);
            let (params, vocab) = match checkpoint {
                Some(path) => {
                    let c = load_checkpoint(&path)?;
                    let vocab = c.vocabulary.context("checkpoint carries no vocabulary")?;
                    (c.params, vocab)
                }
                None => {
                    let vocab = Vocabulary::from_models([&m], DiscretizationConfig::default())?;
                    let cfg = cli.profile.lm_config(vocab.size(), (2 * m.len() + 2).max(256), cli.seed);
                    (LMParams::init(&cfg)?, vocab)
                }
            };
            let mut oracle = serde_json::Map::new();
            for strategy in [Strategy::Deterministic, Strategy::Randomized, Strategy::Adversarial] {
                let start = Instant::now();
                let (_, stats) = order_prepared(&pm, cli.seed, strategy)?;
                oracle.insert(
                    strategy.to_string(),
                    json!({ "seconds": start.elapsed().as_secs_f64(), "expanded": stats.expanded, "backtracks": stats.backtracks }),
                );
            }
            let start = Instant::now();
            let g = generate_conditional(&params, pm.clone(), Arc::new(vocab), &[], m.len(), Decode::Greedy)?;
            let secs = start.elapsed().as_secs_f64();
            Ok(pretty(&json!({
                "bricks": m.len(),
                "oracle": oracle,
                "model": { "seconds": secs, "generated": g.continuation().len(), "truncated": g.truncated },
            })))
        }
    }
}

fn load_model(path: &Path) -> Result<BrickModel> {
    BrickModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

/// A sequence given inline as `0,1,2` / `[0,1,2]`, or as a path to a JSON array.
fn parse_sequence(arg: &str) -> Result<Vec<usize>> {
    let text = if Path::new(arg).is_file() { std::fs::read_to_string(arg)? } else { arg.to_string() };
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).context("sequence is not a JSON array of indices");
    }
    trimmed
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad index `{s}`")))
        .collect()
}
