//! Quality metrics, latency measurement, and the pretraining-strategy
//! ablation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{synth_task, ParallelPair, TaskKind, EOS};
use crate::decoding::{nar_decode, DecodeResult};
use crate::model::{encode_states, ModelConfig, Parameters};
use crate::objectives::{span_mask_batches, AdamState, TrainHyper, TrainMode};
use crate::train::run_steps;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("hypothesis/reference count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("ablation arms must use identical step budgets")]
    MismatchedBudgets,
    #[error("training failed: {0}")]
    Train(String),
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Corpus-level BLEU with uniform weights up to `max_n`, clipped n-gram
/// counts, brevity penalty, and add-one smoothing on the n >= 2
/// precisions (short toy outputs would otherwise zero out constantly).
pub fn bleu(
    hypotheses: &[Vec<usize>],
    references: &[Vec<usize>],
    max_n: usize,
) -> Result<f64, BenchError> {
    if hypotheses.is_empty() {
        return Err(BenchError::EmptyCorpus);
    }
    if hypotheses.len() != references.len() {
        return Err(BenchError::CountMismatch(hypotheses.len(), references.len()));
    }
    let mut clipped = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, rf) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=max_n {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(rf, n);
            for (gram, count) in &h {
                clipped[n - 1] += (*count).min(*r.get(gram).unwrap_or(&0));
                totals[n - 1] += count;
            }
        }
    }
    let mut log_sum = 0.0f64;
    for n in 1..=max_n {
        let (c, t) = (clipped[n - 1] as f64, totals[n - 1] as f64);
        let p = if n == 1 {
            if t == 0.0 || c == 0.0 {
                return Ok(0.0);
            }
            c / t
        } else {
            (c + 1.0) / (t + 1.0)
        };
        log_sum += p.ln() / max_n as f64;
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len.max(1) as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_sum.exp() * 100.0)
}

fn lcs(a: &[usize], b: &[usize]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for &x in a {
        let mut prev = 0;
        for (j, &y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// Mean per-pair LCS F-measure with the beta = 1.2 convention.
pub fn rouge_l(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64, BenchError> {
    if hypotheses.is_empty() {
        return Err(BenchError::EmptyCorpus);
    }
    if hypotheses.len() != references.len() {
        return Err(BenchError::CountMismatch(hypotheses.len(), references.len()));
    }
    let beta2 = 1.2f64 * 1.2;
    let mut sum = 0.0;
    for (hyp, rf) in hypotheses.iter().zip(references) {
        if hyp.is_empty() || rf.is_empty() {
            continue; // scored 0
        }
        let l = lcs(hyp, rf) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / hyp.len() as f64;
        let r = l / rf.len() as f64;
        sum += (1.0 + beta2) * p * r / (r + beta2 * p);
    }
    Ok(sum / hypotheses.len() as f64 * 100.0)
}

/// Unique n-grams across all hypotheses over total n-grams, times 100.
pub fn distinct_n(hypotheses: &[Vec<usize>], n: usize) -> Result<f64, BenchError> {
    if hypotheses.is_empty() {
        return Err(BenchError::EmptyCorpus);
    }
    let mut unique: HashSet<&[usize]> = HashSet::new();
    let mut total = 0usize;
    for hyp in hypotheses {
        if hyp.len() >= n {
            for w in hyp.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(unique.len() as f64 / total as f64 * 100.0)
}

pub fn exact_match(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64, BenchError> {
    if hypotheses.is_empty() {
        return Err(BenchError::EmptyCorpus);
    }
    if hypotheses.len() != references.len() {
        return Err(BenchError::CountMismatch(hypotheses.len(), references.len()));
    }
    let hits = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| h == r)
        .count();
    Ok(hits as f64 / hypotheses.len() as f64 * 100.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p90_ms: f64,
    pub reps: usize,
    pub forward_passes: Vec<usize>,
}

/// Per-sample wall-clock at batch size 1: `warmup` calls are discarded,
/// then `reps` timed calls cycle through the samples round-robin. Only
/// the decode call itself is timed.
pub fn measure_latency<F>(mut decode_fn: F, n_samples: usize, warmup: usize, reps: usize) -> LatencyStats
where
    F: FnMut(usize) -> DecodeResult,
{
    assert!(n_samples >= 1 && reps >= 1);
    for i in 0..warmup {
        let _ = decode_fn(i % n_samples);
    }
    let mut times = Vec::with_capacity(reps);
    let mut passes = Vec::with_capacity(reps);
    for i in 0..reps {
        let start = Instant::now();
        let r = decode_fn(i % n_samples);
        times.push(start.elapsed().as_secs_f64() * 1e3);
        passes.push(r.forward_passes);
    }
    let mut sorted = times.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let p90 = sorted[(sorted.len() as f64 * 0.9) as usize..]
        .first()
        .copied()
        .unwrap_or(*sorted.last().unwrap());
    LatencyStats {
        median_ms: median,
        p90_ms: p90,
        reps,
        forward_passes: passes,
    }
}

/// Per-mode metric map plus latency stats and run metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub latency: Option<LatencyStats>,
    pub config_hash: String,
    pub seed: u64,
    pub revision: String,
    /// BLEU n >= 2 precisions use add-one smoothing; recorded so numbers
    /// stay comparable across runs.
    pub bleu_smoothing: String,
}

pub fn metric_map(
    hypotheses: &[Vec<usize>],
    references: &[Vec<usize>],
) -> Result<BTreeMap<String, f64>, BenchError> {
    let mut m = BTreeMap::new();
    for n in 1..=4usize {
        m.insert(format!("BLEU-{n}"), bleu(hypotheses, references, n)?);
    }
    m.insert("ROUGE-L".into(), rouge_l(hypotheses, references)?);
    m.insert("Distinct-1".into(), distinct_n(hypotheses, 1)?);
    m.insert("Distinct-2".into(), distinct_n(hypotheses, 2)?);
    m.insert("ExactMatch".into(), exact_match(hypotheses, references)?);
    Ok(m)
}

pub fn config_hash(cfg: &ModelConfig) -> String {
    // FNV-1a over the canonical JSON; a stable fingerprint, not crypto.
    let json = serde_json::to_string(cfg).unwrap();
    let mut h: u64 = 0xcbf29ce484222325;
    for b in json.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

pub fn report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let width = report.metrics.keys().map(|k| k.len()).max().unwrap_or(8);
    for (k, v) in &report.metrics {
        out.push_str(&format!("{k:<width$}  {v:>8.2}\n"));
    }
    if let Some(l) = &report.latency {
        out.push_str(&format!("{:<width$}  {:>8.2}\n", "median-ms", l.median_ms));
        out.push_str(&format!("{:<width$}  {:>8.2}\n", "p90-ms", l.p90_ms));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    NoPretrain,
    ArPretrain,
    NarPretrain,
    BangPretrain,
}

impl Arm {
    pub const ALL: [Arm; 4] = [
        Arm::NoPretrain,
        Arm::ArPretrain,
        Arm::NarPretrain,
        Arm::BangPretrain,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Arm::NoPretrain => "no-pretrain",
            Arm::ArPretrain => "ar-pretrain",
            Arm::NarPretrain => "nar-pretrain",
            Arm::BangPretrain => "bang-pretrain",
        }
    }

    fn mode(&self) -> Option<TrainMode> {
        match self {
            Arm::NoPretrain => None,
            Arm::ArPretrain => Some(TrainMode::Ar),
            Arm::NarPretrain => Some(TrainMode::Nar),
            Arm::BangPretrain => Some(TrainMode::Bang),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    pub task: TaskKind,
    pub seeds: Vec<u64>,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub payload_vocab: usize,
    pub len_range: (usize, usize),
    pub n_pairs: usize,
    pub model: ModelConfig,
    pub hyper: TrainHyper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn mean_std(&self, arm: Arm, metric: &str) -> (f64, f64) {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.arm == arm.name())
            .map(|r| r.metrics[metric])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / vals.len() as f64;
        (mean, var.sqrt())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,metric,value\n");
        for r in &self.rows {
            for (k, v) in &r.metrics {
                out.push_str(&format!("{},{},{},{:.4}\n", r.arm, r.seed, k, v));
            }
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        for arm in Arm::ALL {
            if !self.rows.iter().any(|r| r.arm == arm.name()) {
                continue;
            }
            let (m, s) = self.mean_std(arm, "BLEU-4");
            out.push_str(&format!("{:<14} BLEU-4 {m:6.2} +/- {s:5.2}\n", arm.name()));
        }
        out
    }
}

/// Toy unlabeled corpus for pretraining: documents made of target-side
/// sequences of the same task family (disjoint generation seed), so
/// every arm sees identical in-domain text.
pub fn ablation_corpus(
    task: TaskKind,
    payload_vocab: usize,
    len_range: (usize, usize),
    max_positions: usize,
) -> Result<Vec<Vec<usize>>, BenchError> {
    const CORPUS_SEED: u64 = 0xC0FFEE;
    let ds = synth_task(task, payload_vocab, len_range, 600, CORPUS_SEED, max_positions)
        .map_err(|e| BenchError::Train(e.to_string()))?;
    // pack target sequences into ~128-token documents
    let mut docs = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for p in &ds.pairs {
        cur.extend_from_slice(&p.tgt);
        if cur.len() >= 128 {
            docs.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    Ok(docs)
}

/// Four-arm pretraining-strategy comparison: identical corpus, matched
/// step budgets, NAR finetuning and NAR decoding for every arm.
pub fn ablation_run(cfg: &AblationConfig) -> Result<AblationTable, BenchError> {
    if cfg.seeds.is_empty() {
        return Err(BenchError::MismatchedBudgets);
    }
    let corpus = ablation_corpus(
        cfg.task,
        cfg.payload_vocab,
        cfg.len_range,
        cfg.model.max_positions,
    )?;
    let pretrain_pairs: Vec<ParallelPair> =
        span_mask_batches(&corpus, 64, 0.15, cfg.model.n_streams, 0xC0FFEE)
            .map_err(|e| BenchError::Train(e.to_string()))?
            .into_iter()
            .enumerate()
            .map(|(i, ex)| ParallelPair {
                id: format!("pre{i:05}"),
                src: ex.enc_input,
                tgt: {
                    // span_mask targets already carry [EOS]; the train
                    // loop appends one, so strip it here
                    let mut t = ex.target;
                    t.pop();
                    t
                },
            })
            .collect();

    let mut rows = Vec::new();
    for arm in Arm::ALL {
        for &seed in &cfg.seeds {
            let mut model_cfg = cfg.model.clone();
            model_cfg.seed = seed;
            model_cfg.vocab_size = crate::data::SPECIALS.len() + cfg.payload_vocab;
            let ds = synth_task(
                cfg.task,
                cfg.payload_vocab,
                cfg.len_range,
                cfg.n_pairs,
                seed,
                model_cfg.max_positions,
            )
            .map_err(|e| BenchError::Train(e.to_string()))?;
            let mut params =
                Parameters::init(&model_cfg).map_err(|e| BenchError::Train(e.to_string()))?;
            let mut adam = AdamState::new(&params);
            if let Some(mode) = arm.mode() {
                run_steps(
                    &mut params,
                    &mut adam,
                    &model_cfg,
                    &cfg.hyper,
                    &pretrain_pairs,
                    mode,
                    cfg.batch_size,
                    cfg.pretrain_steps,
                    seed ^ 0x5050,
                    |_, _, _| {},
                )
                .map_err(|e| BenchError::Train(e.to_string()))?;
            }
            // identical finetune budget for every arm
            let mut adam_ft = AdamState::new(&params);
            run_steps(
                &mut params,
                &mut adam_ft,
                &model_cfg,
                &cfg.hyper,
                ds.train(),
                TrainMode::Nar,
                cfg.batch_size,
                cfg.finetune_steps,
                seed ^ 0xF17E,
                |_, _, _| {},
            )
            .map_err(|e| BenchError::Train(e.to_string()))?;

            let mut hyps = Vec::new();
            let mut refs = Vec::new();
            for pair in ds.test() {
                let enc = encode_states(&params, &model_cfg, &pair.src)
                    .map_err(|e| BenchError::Train(e.to_string()))?;
                let max_len = (pair.src.len() + 4).min(model_cfg.max_positions);
                let r = nar_decode(&enc, &params, &model_cfg, max_len)
                    .map_err(|e| BenchError::Train(e.to_string()))?;
                hyps.push(r.tokens);
                refs.push(pair.tgt.clone());
            }
            let metrics = metric_map(&hyps, &refs)?;
            rows.push(AblationRow {
                arm: arm.name().into(),
                seed,
                metrics,
                pretrain_steps: cfg.pretrain_steps,
                finetune_steps: cfg.finetune_steps,
            });
        }
    }
    Ok(AblationTable { rows })
}

/// Decode targets end at the first [EOS]; exposed for eval plumbing.
pub fn truncate_at_eos(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .copied()
        .collect()
}
