//! Operator surface: subcommands for pretraining, finetuning, decoding,
//! evaluation, benchmarking, and mask rendering. Machine-readable output
//! goes to stdout as JSON lines; human logs go to stderr.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{
    bleu, measure_latency, metric_map, AblationConfig, Arm, BenchError, EvalReport, LatencyStats,
};
use crate::checkpoint;
use crate::data::{ingest_text, read_pairs, tokenize, ParallelPair, TaskKind, Vocabulary};
use crate::decoding::{ar_beam, ar_greedy, nar_decode, semi_nar_decode, DecodeResult};
use crate::masking::{render_mask_svg, render_mask_text, StreamLayout};
use crate::model::{encode_states, ModelConfig, Parameters};
use crate::objectives::{span_mask_batches, AdamState, TrainHyper, TrainMode};
use crate::train::{eval_loss, run_steps};

/// Full run configuration: model architecture plus training and decoding
/// settings. Every field has a default; unknown keys in a config file are
/// rejected. The effective value is serialized into each checkpoint
/// directory as run_config.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mode: String,
    pub lr: f32,
    pub warmup_steps: usize,
    pub smoothing: f32,
    pub clip_norm: f32,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub corpus: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub dev_data: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub beam: usize,
    pub length_penalty: f32,
    pub max_len: usize,
    pub n_ar: usize,
    pub n_nar: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            mode: "multi".into(),
            lr: 1e-4,
            warmup_steps: 1000,
            smoothing: 0.1,
            clip_norm: 1.0,
            batch_size: 8,
            max_steps: 1000,
            eval_every: 200,
            corpus: None,
            train_data: None,
            dev_data: None,
            input: None,
            checkpoint_dir: None,
            beam: 4,
            length_penalty: 1.0,
            max_len: 32,
            n_ar: 5,
            n_nar: 25,
        }
    }
}

impl RunConfig {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            smoothing: self.smoothing,
            clip_norm: self.clip_norm,
        }
    }
}

/// Overrides shared by all subcommands. Precedence: flag > config file
/// > default.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON config file (RunConfig shape)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ffn: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub n_streams: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub smoothing: Option<f32>,
    #[arg(long)]
    pub clip_norm: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub dev_data: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub length_penalty: Option<f32>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub n_ar: Option<usize>,
    #[arg(long)]
    pub n_nar: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Msg(format!("config {}: {e}", path.display())))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::Msg(format!("config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        macro_rules! ov {
            ($($field:ident => $slot:expr),* $(,)?) => {
                $(if let Some(v) = &self.$field { $slot = v.clone(); })*
            };
        }
        ov! {
            enc_layers => cfg.model.enc_layers,
            dec_layers => cfg.model.dec_layers,
            d_model => cfg.model.d_model,
            n_heads => cfg.model.n_heads,
            d_ffn => cfg.model.d_ffn,
            vocab_size => cfg.model.vocab_size,
            max_positions => cfg.model.max_positions,
            n_streams => cfg.model.n_streams,
            seed => cfg.model.seed,
            mode => cfg.mode,
            lr => cfg.lr,
            warmup_steps => cfg.warmup_steps,
            smoothing => cfg.smoothing,
            clip_norm => cfg.clip_norm,
            batch_size => cfg.batch_size,
            max_steps => cfg.max_steps,
            eval_every => cfg.eval_every,
            beam => cfg.beam,
            length_penalty => cfg.length_penalty,
            max_len => cfg.max_len,
            n_ar => cfg.n_ar,
            n_nar => cfg.n_nar,
        }
        if self.corpus.is_some() {
            cfg.corpus = self.corpus.clone();
        }
        if self.train_data.is_some() {
            cfg.train_data = self.train_data.clone();
        }
        if self.dev_data.is_some() {
            cfg.dev_data = self.dev_data.clone();
        }
        if self.input.is_some() {
            cfg.input = self.input.clone();
        }
        if self.checkpoint_dir.is_some() {
            cfg.checkpoint_dir = self.checkpoint_dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Msg(String),
    #[error("gate failed: {0}")]
    Gate(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Msg(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum LogLevel {
    Quiet,
    Info,
    Debug,
}

/// Log verbosity from the BANG_LOG environment variable; numeric
/// settings never come from the environment.
pub fn log_level() -> LogLevel {
    match std::env::var("BANG_LOG").as_deref() {
        Ok("quiet") | Ok("0") => LogLevel::Quiet,
        Ok("debug") | Ok("2") => LogLevel::Debug,
        _ => LogLevel::Info,
    }
}

fn log(level: LogLevel, msg: &str) {
    if level <= log_level() {
        eprintln!("{msg}");
    }
}

/// Exclusive lock on a checkpoint directory, released on drop. Guards
/// against two writer processes racing on the same checkpoint.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("LOCK");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Msg(format!(
                "checkpoint dir {} is locked (stale LOCK file?)",
                dir.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Parser, Debug)]
#[command(name = "bang", about = "n-stream seq2seq toolkit", version)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Span-mask pretraining on a plain-text corpus
    Pretrain(ConfigArgs),
    /// Finetune a checkpoint on parallel JSONL data
    Finetune {
        #[command(flatten)]
        args: ConfigArgs,
        /// Checkpoint to start from
        #[arg(long)]
        init_checkpoint: PathBuf,
    },
    /// Decode an input file line by line
    Decode {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// ar | nar | semi
        #[arg(long, default_value = "ar")]
        decode_mode: String,
    },
    /// Corpus metrics from hypothesis and reference token files
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        r#ref: PathBuf,
    },
    /// Latency benchmark or pretraining ablation
    Bench {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Apply pass/fail thresholds; exit 1 on failure
        #[arg(long)]
        gate: bool,
        /// Run the four-arm pretraining ablation instead of latency
        #[arg(long)]
        ablation: bool,
        /// Ablation task: copy | reverse | sort
        #[arg(long, default_value = "sort")]
        task: String,
        /// Comma-separated ablation seeds
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value_t = 1000)]
        pretrain_steps: usize,
        #[arg(long, default_value_t = 150)]
        finetune_steps: usize,
        #[arg(long, default_value_t = 50)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Render a visibility mask as text or SVG
    MaskRender {
        #[arg(long)]
        target_len: usize,
        #[arg(long)]
        streams: usize,
        /// Write SVG here instead of text to stdout
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

/// Entry point for the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let res = match cli.cmd {
        Cmd::Pretrain(args) => cmd_pretrain(&args),
        Cmd::Finetune {
            args,
            init_checkpoint,
        } => cmd_finetune(&args, &init_checkpoint),
        Cmd::Decode {
            args,
            checkpoint,
            decode_mode,
        } => cmd_decode(&args, &checkpoint, &decode_mode),
        Cmd::Eval { hyp, r#ref } => cmd_eval(&hyp, &r#ref),
        Cmd::Bench {
            args,
            checkpoint,
            gate,
            ablation,
            task,
            seeds,
            pretrain_steps,
            finetune_steps,
            reps,
            warmup,
        } => {
            if ablation {
                cmd_bench_ablation(
                    &args,
                    &task,
                    &seeds,
                    pretrain_steps,
                    finetune_steps,
                    gate,
                )
            } else {
                cmd_bench_latency(&args, checkpoint.as_deref(), reps, warmup, gate)
            }
        }
        Cmd::MaskRender {
            target_len,
            streams,
            svg,
        } => cmd_mask_render(target_len, streams, svg.as_deref()),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn log_effective_config(cfg: &RunConfig) {
    log(
        LogLevel::Info,
        &format!(
            "effective config: {}",
            serde_json::to_string(cfg).expect("config serializes")
        ),
    );
}

fn mean_part(sum: f32, terms: usize) -> f32 {
    if terms == 0 {
        0.0
    } else {
        sum / terms as f32
    }
}

#[derive(Serialize)]
struct StepLog<'a> {
    step: usize,
    mode: &'a str,
    lr: f32,
    loss_total: f32,
    loss_ar: f32,
    loss_bridge: f32,
    loss_nar: f32,
    wall_ms: f64,
}

fn corpus_to_pretrain_pairs(
    docs_ids: &[Vec<usize>],
    n_streams: usize,
    seed: u64,
) -> Result<Vec<ParallelPair>, CliError> {
    let examples = span_mask_batches(docs_ids, 64, 0.15, n_streams, seed)
        .map_err(|e| CliError::Msg(e.to_string()))?;
    Ok(examples
        .into_iter()
        .enumerate()
        .map(|(i, ex)| ParallelPair {
            id: format!("pre{i:06}"),
            src: ex.enc_input,
            tgt: {
                // the training loop appends [EOS] itself
                let mut t = ex.target;
                t.pop();
                t
            },
        })
        .collect())
}

pub fn cmd_pretrain(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    log_effective_config(&cfg);
    let corpus_path = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| CliError::Msg("--corpus is required".into()))?;
    let dir = cfg
        .checkpoint_dir
        .as_ref()
        .ok_or_else(|| CliError::Msg("--checkpoint-dir is required".into()))?;
    let _lock = DirLock::acquire(dir)?;

    let docs = ingest_text(corpus_path).map_err(|e| CliError::Msg(e.to_string()))?;

    // resume from an existing checkpoint in the directory, else start
    // fresh from the corpus
    let resume = dir.join("manifest.json").exists();
    let (model_cfg, mut params, vocab, mut adam) = if resume {
        let ck = checkpoint::load(dir).map_err(|e| CliError::Msg(e.to_string()))?;
        let adam = ck
            .adam
            .ok_or_else(|| CliError::Msg("checkpoint has no optimizer state to resume".into()))?;
        log(
            LogLevel::Info,
            &format!("resuming from step {}", adam.step),
        );
        (ck.config, ck.params, ck.vocab, adam)
    } else {
        let vocab =
            Vocabulary::build(&docs, cfg.model.vocab_size).map_err(|e| CliError::Msg(e.to_string()))?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.vocab_size = vocab.len();
        let params = Parameters::init(&model_cfg).map_err(|e| CliError::Msg(e.to_string()))?;
        let adam = AdamState::new(&params);
        (model_cfg, params, vocab, adam)
    };

    let docs_ids: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| d.iter().map(|w| vocab.id(w)).collect())
        .collect();
    let pairs = corpus_to_pretrain_pairs(&docs_ids, model_cfg.n_streams, model_cfg.seed)?;
    let hyper = cfg.hyper();

    std::fs::write(
        dir.join("run_config.json"),
        serde_json::to_string_pretty(&cfg).unwrap(),
    )?;

    let stdout = std::io::stdout();
    while adam.step < cfg.max_steps {
        let chunk = cfg
            .eval_every
            .min(cfg.max_steps - adam.step)
            .max(1);
        let wall = Instant::now();
        run_steps(
            &mut params,
            &mut adam,
            &model_cfg,
            &hyper,
            &pairs,
            TrainMode::Bang,
            cfg.batch_size,
            chunk,
            model_cfg.seed,
            |step, bd, lr| {
                let line = StepLog {
                    step,
                    mode: "bang",
                    lr,
                    loss_total: bd.per_token(),
                    loss_ar: mean_part(bd.ar_part, bd.ar_terms),
                    loss_bridge: mean_part(bd.bridging_part, bd.bridging_terms),
                    loss_nar: mean_part(bd.nar_part, bd.nar_terms),
                    wall_ms: wall.elapsed().as_secs_f64() * 1e3,
                };
                let mut out = stdout.lock();
                let _ = writeln!(out, "{}", serde_json::to_string(&line).unwrap());
            },
        )
        .map_err(|e| CliError::Msg(e.to_string()))?;
        checkpoint::save(dir, &model_cfg, &params, &vocab, Some(&adam))
            .map_err(|e| CliError::Msg(e.to_string()))?;
        log(
            LogLevel::Info,
            &format!("checkpoint written at step {}", adam.step),
        );
    }
    if adam.step == 0 {
        // a zero-step run still leaves a loadable checkpoint
        checkpoint::save(dir, &model_cfg, &params, &vocab, Some(&adam))
            .map_err(|e| CliError::Msg(e.to_string()))?;
    }
    Ok(())
}

pub fn cmd_finetune(args: &ConfigArgs, init: &Path) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    log_effective_config(&cfg);
    let dir = cfg
        .checkpoint_dir
        .as_ref()
        .ok_or_else(|| CliError::Msg("--checkpoint-dir is required".into()))?;
    let train_path = cfg
        .train_data
        .as_ref()
        .ok_or_else(|| CliError::Msg("--train-data is required".into()))?;
    let mode: TrainMode = cfg
        .mode
        .parse()
        .map_err(|e: String| CliError::Msg(e))?;

    let ck = checkpoint::load(init).map_err(|e| CliError::Msg(e.to_string()))?;
    let mut model_cfg = ck.config;
    // architecture is fixed by the checkpoint; only the stream count may
    // be raised for finetuning
    if let Some(n) = args.n_streams {
        model_cfg.n_streams = n;
    }
    model_cfg
        .validate()
        .map_err(|e| CliError::Msg(e.to_string()))?;
    let mut params = ck.params;
    let vocab = ck.vocab;

    let train = read_pairs(train_path, &vocab).map_err(|e| CliError::Msg(e.to_string()))?;
    if train.is_empty() {
        return Err(CliError::Msg("training data is empty".into()));
    }
    let dev = match &cfg.dev_data {
        Some(p) => Some(read_pairs(p, &vocab).map_err(|e| CliError::Msg(e.to_string()))?),
        None => None,
    };

    let _lock = DirLock::acquire(dir)?;
    std::fs::write(
        dir.join("run_config.json"),
        serde_json::to_string_pretty(&cfg).unwrap(),
    )?;

    let hyper = cfg.hyper();
    let mut adam = AdamState::new(&params);
    let mode_name = match mode {
        TrainMode::Bang => "multi",
        TrainMode::Ar => "ar",
        TrainMode::Nar => "nar",
    };
    let mut best: Option<(f32, Parameters)> = None;
    let stdout = std::io::stdout();
    while adam.step < cfg.max_steps {
        let chunk = cfg.eval_every.min(cfg.max_steps - adam.step).max(1);
        let wall = Instant::now();
        run_steps(
            &mut params,
            &mut adam,
            &model_cfg,
            &hyper,
            &train,
            mode,
            cfg.batch_size,
            chunk,
            model_cfg.seed,
            |step, bd, lr| {
                let line = StepLog {
                    step,
                    mode: mode_name,
                    lr,
                    loss_total: bd.per_token(),
                    loss_ar: mean_part(bd.ar_part, bd.ar_terms),
                    loss_bridge: mean_part(bd.bridging_part, bd.bridging_terms),
                    loss_nar: mean_part(bd.nar_part, bd.nar_terms),
                    wall_ms: wall.elapsed().as_secs_f64() * 1e3,
                };
                let mut out = stdout.lock();
                let _ = writeln!(out, "{}", serde_json::to_string(&line).unwrap());
            },
        )
        .map_err(|e| CliError::Msg(e.to_string()))?;
        if let Some(dev) = &dev {
            let loss = eval_loss(&params, &model_cfg, &hyper, dev, mode)
                .map_err(|e| CliError::Msg(e.to_string()))?;
            log(
                LogLevel::Info,
                &format!("step {} dev loss {loss:.4}", adam.step),
            );
            if best.as_ref().map_or(true, |(b, _)| loss < *b) {
                best = Some((loss, params.clone()));
            }
        }
    }
    let final_params = match best {
        Some((loss, p)) => {
            log(LogLevel::Info, &format!("best dev loss {loss:.4}"));
            p
        }
        None => params,
    };
    checkpoint::save(dir, &model_cfg, &final_params, &vocab, None)
        .map_err(|e| CliError::Msg(e.to_string()))?;
    Ok(())
}

// no wall-clock field: identical invocations must produce identical
// output bytes; timings live in the bench subcommand
#[derive(Serialize)]
struct DecodeLog {
    id: usize,
    mode: String,
    tokens: Vec<usize>,
    detokenized: String,
    score: f32,
    forward_passes: usize,
}

pub fn cmd_decode(args: &ConfigArgs, ckpt: &Path, decode_mode: &str) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    log_effective_config(&cfg);
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| CliError::Msg("--input is required".into()))?;
    let ck = checkpoint::load(ckpt).map_err(|e| CliError::Msg(e.to_string()))?;
    let text = std::fs::read_to_string(input)?;
    let stdout = std::io::stdout();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let src = ck.vocab.encode_line(line);
        if src.len() > ck.config.max_positions {
            // report and keep going; one bad line must not kill the run
            log(
                LogLevel::Info,
                &format!(
                    "line {}: input length {} exceeds max_positions {}, skipped",
                    i + 1,
                    src.len(),
                    ck.config.max_positions
                ),
            );
            continue;
        }
        let r = decode_one(&ck.params, &ck.config, &src, &cfg, decode_mode)?;
        let out = DecodeLog {
            id: i + 1,
            mode: decode_mode.into(),
            detokenized: ck.vocab.decode(&r.tokens),
            tokens: r.tokens,
            score: r.score,
            forward_passes: r.forward_passes,
        };
        let mut w = stdout.lock();
        writeln!(w, "{}", serde_json::to_string(&out).unwrap())?;
    }
    Ok(())
}

fn decode_one(
    params: &Parameters,
    model_cfg: &ModelConfig,
    src: &[usize],
    cfg: &RunConfig,
    mode: &str,
) -> Result<DecodeResult, CliError> {
    let enc = encode_states(params, model_cfg, src).map_err(|e| CliError::Msg(e.to_string()))?;
    let r = match mode {
        "ar" => {
            if cfg.beam > 1 {
                ar_beam(
                    &enc,
                    params,
                    model_cfg,
                    cfg.beam,
                    cfg.length_penalty,
                    cfg.max_len,
                )
            } else {
                ar_greedy(&enc, params, model_cfg, cfg.max_len)
            }
        }
        "nar" => nar_decode(&enc, params, model_cfg, cfg.max_len),
        "semi" => semi_nar_decode(&enc, params, model_cfg, cfg.n_ar, cfg.n_nar),
        other => return Err(CliError::Msg(format!("unknown decode mode '{other}'"))),
    };
    r.map_err(|e| CliError::Msg(e.to_string()))
}

/// Token files: one whitespace-tokenized sequence per line, hypothesis
/// and reference aligned by line number.
pub fn cmd_eval(hyp_path: &Path, ref_path: &Path) -> Result<(), CliError> {
    let read = |p: &Path| -> Result<Vec<Vec<String>>, CliError> {
        let text = std::fs::read_to_string(p)?;
        Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(tokenize)
            .collect())
    };
    let hyps_s = read(hyp_path)?;
    let refs_s = read(ref_path)?;
    if hyps_s.len() != refs_s.len() {
        return Err(CliError::Msg(format!(
            "hypothesis count {} != reference count {}",
            hyps_s.len(),
            refs_s.len()
        )));
    }
    // shared string-to-id map; metrics only compare ids for equality
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut to_ids = |seqs: &[Vec<String>]| -> Vec<Vec<usize>> {
        seqs.iter()
            .map(|s| {
                s.iter()
                    .map(|w| {
                        let next = ids.len();
                        *ids.entry(w.clone()).or_insert(next)
                    })
                    .collect()
            })
            .collect()
    };
    let hyps = to_ids(&hyps_s);
    let refs = to_ids(&refs_s);
    let metrics = metric_map(&hyps, &refs).map_err(map_bench_err)?;
    let report = EvalReport {
        metrics,
        latency: None,
        config_hash: String::new(),
        seed: 0,
        revision: env!("CARGO_PKG_VERSION").into(),
        bleu_smoothing: "add-one for n>=2".into(),
    };
    println!("{}", serde_json::to_string(&report).unwrap());
    Ok(())
}

fn map_bench_err(e: BenchError) -> CliError {
    CliError::Msg(e.to_string())
}

#[derive(Serialize)]
struct LatencyReport {
    mode: String,
    stats: LatencyStats,
    max_forward_passes: usize,
}

pub fn cmd_bench_latency(
    args: &ConfigArgs,
    ckpt: Option<&Path>,
    reps: usize,
    warmup: usize,
    gate: bool,
) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    log_effective_config(&cfg);
    let ckpt = ckpt.ok_or_else(|| CliError::Msg("--checkpoint is required".into()))?;
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| CliError::Msg("--input is required".into()))?;
    let ck = checkpoint::load(ckpt).map_err(|e| CliError::Msg(e.to_string()))?;
    let text = std::fs::read_to_string(input)?;
    let srcs: Vec<Vec<usize>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| ck.vocab.encode_line(l))
        .collect();
    if srcs.is_empty() {
        return Err(CliError::Msg("empty input".into()));
    }
    // the ar arm is timed greedy so forward passes equal output length
    let mut greedy_cfg = cfg.clone();
    greedy_cfg.beam = 1;
    let mut reports: BTreeMap<&str, LatencyStats> = BTreeMap::new();
    // checked inside the timed closure so warmup calls don't skew the
    // alignment of lengths to reps
    let mut ar_long_output = false;
    let mut ar_fp_mismatch: Option<(usize, usize)> = None;
    for mode in ["ar", "nar", "semi"] {
        let mode_cfg = if mode == "ar" { &greedy_cfg } else { &cfg };
        let stats = measure_latency(
            |i| {
                let r = decode_one(&ck.params, &ck.config, &srcs[i], mode_cfg, mode)
                    .expect("decode succeeds");
                if mode == "ar" {
                    let emitted = r.per_position_logprobs.len();
                    if emitted >= 16 {
                        ar_long_output = true;
                    }
                    if r.forward_passes != emitted {
                        ar_fp_mismatch = Some((r.forward_passes, emitted));
                    }
                }
                r
            },
            srcs.len(),
            warmup,
            reps,
        );
        let report = LatencyReport {
            mode: mode.into(),
            max_forward_passes: stats.forward_passes.iter().copied().max().unwrap_or(0),
            stats,
        };
        println!("{}", serde_json::to_string(&report).unwrap());
        reports.insert(mode, report.stats);
    }
    if gate {
        let nar = &reports["nar"];
        let ar = &reports["ar"];
        let semi = &reports["semi"];
        if nar.forward_passes.iter().any(|&p| p != 1) {
            return Err(CliError::Gate("nar forward_passes != 1".into()));
        }
        if semi
            .forward_passes
            .iter()
            .any(|&p| p > cfg.n_ar + 1)
        {
            return Err(CliError::Gate("semi forward_passes > n_ar + 1".into()));
        }
        if let Some((passes, len)) = ar_fp_mismatch {
            return Err(CliError::Gate(format!(
                "ar forward_passes {passes} != emitted length {len}"
            )));
        }
        if ar_long_output && nar.median_ms >= ar.median_ms {
            return Err(CliError::Gate(format!(
                "nar median {:.2}ms not below ar median {:.2}ms",
                nar.median_ms, ar.median_ms
            )));
        }
        log(LogLevel::Info, "latency gate passed");
    }
    Ok(())
}

pub fn cmd_bench_ablation(
    args: &ConfigArgs,
    task: &str,
    seeds: &str,
    pretrain_steps: usize,
    finetune_steps: usize,
    gate: bool,
) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    log_effective_config(&cfg);
    let task: TaskKind = task.parse().map_err(|e: String| CliError::Msg(e))?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Msg(format!("bad --seeds: {e}")))?;
    let ab = AblationConfig {
        task,
        seeds,
        pretrain_steps,
        finetune_steps,
        batch_size: cfg.batch_size,
        payload_vocab: 32,
        len_range: (4, 12),
        n_pairs: 2000,
        model: cfg.model.clone(),
        hyper: cfg.hyper(),
    };
    let table = crate::bench::ablation_run(&ab).map_err(map_bench_err)?;
    println!("{}", serde_json::to_string(&table).unwrap());
    log(LogLevel::Info, &table.summary_text());
    if gate {
        let (bang, _) = table.mean_std(Arm::BangPretrain, "BLEU-4");
        let (none, _) = table.mean_std(Arm::NoPretrain, "BLEU-4");
        if bang < none + 3.0 {
            return Err(CliError::Gate(format!(
                "multi-stream pretrain BLEU-4 {bang:.2} not >= no-pretrain {none:.2} + 3"
            )));
        }
        log(LogLevel::Info, "ablation gate passed");
    }
    Ok(())
}

pub fn cmd_mask_render(target_len: usize, streams: usize, svg: Option<&Path>) -> Result<(), CliError> {
    let layout =
        StreamLayout::new(target_len, streams).map_err(|e| CliError::Msg(e.to_string()))?;
    match svg {
        Some(path) => {
            let s = render_mask_svg(&layout).map_err(|e| CliError::Msg(e.to_string()))?;
            std::fs::write(path, s)?;
            log(LogLevel::Info, &format!("wrote {}", path.display()));
        }
        None => {
            let s = render_mask_text(&layout).map_err(|e| CliError::Msg(e.to_string()))?;
            print!("{s}");
        }
    }
    Ok(())
}

/// One-line smoke for the empty-corpus path used by tests.
pub fn eval_is_empty_corpus(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> bool {
    bleu(hyps, refs, 4).is_err()
}
