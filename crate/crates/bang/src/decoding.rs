//! The three inference engines: autoregressive (greedy and beam, with
//! per-layer KV caching), one-shot non-autoregressive, and semi-NAR
//! (a sequential prefix followed by one parallel step).

use std::time::Instant;

use ndarray::Array1;
use thiserror::Error;

use crate::autodiff::Graph;
use crate::data::{BOS, EOS, MASK, PAD, SEP};
use crate::model::{
    bind, single_stream_forward, EncoderStates, ModelConfig, ModelError, Parameters,
};

pub use crate::model::KVCache;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("max_len must be at least 1")]
    BadMaxLen,
    #[error("beam must be at least 1")]
    BadBeam,
    #[error("n_ar + n_nar = {0} exceeds max_positions {1}")]
    TooLong(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Output tokens plus decode statistics.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub score: f32,
    pub forward_passes: usize,
    pub latency_ms: f64,
    pub per_position_logprobs: Vec<f32>,
}

fn log_softmax(row: &Array1<f32>) -> Array1<f32> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
    row.mapv(|v| v - lse)
}

fn argmax(row: &Array1<f32>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn strip_specials(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .copied()
        .filter(|t| !matches!(*t, PAD | BOS | EOS | MASK | SEP))
        .collect()
}

/// Maximal runs of identical adjacent tokens reduced to one.
pub fn collapse_repeats(tokens: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

/// One incremental decoder invocation: run `new_tokens` (positions
/// `start_pos..`) against the cache, appending the first `n_append`
/// rows' keys/values, and return the final row's logits.
fn step_logits(
    params: &Parameters,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    new_tokens: &[usize],
    start_pos: usize,
    cache: &mut KVCache,
    n_append: usize,
) -> Result<ndarray::Array2<f32>, ModelError> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let enc_idx = g.leaf(enc.h.clone(), false);
    let logits = single_stream_forward(
        &mut g,
        &bound,
        cfg,
        new_tokens,
        start_pos,
        enc_idx,
        &enc.pad,
        Some((cache, n_append)),
        None,
    )?;
    Ok(g.value(logits).clone())
}

/// Left-to-right greedy decoding with KV caching: step t feeds the
/// previous golden token (appended to the cache) and a [MASK] query at
/// position t. One forward pass per emitted token.
pub fn ar_greedy(
    enc: &EncoderStates,
    params: &Parameters,
    cfg: &ModelConfig,
    max_len: usize,
) -> Result<DecodeResult, DecodeError> {
    if max_len < 1 {
        return Err(DecodeError::BadMaxLen);
    }
    let start = Instant::now();
    let mut cache = KVCache::new(cfg.dec_layers, cfg.d_model);
    let mut emitted: Vec<usize> = Vec::new();
    let mut logprobs: Vec<f32> = Vec::new();
    let mut passes = 0usize;
    for t in 0..max_len {
        let (new_tokens, start_pos, n_append) = if t == 0 {
            (vec![MASK], 0, 0)
        } else {
            (vec![emitted[t - 1], MASK], t - 1, 1)
        };
        let logits = step_logits(params, cfg, enc, &new_tokens, start_pos, &mut cache, n_append)?;
        passes += 1;
        let row = logits.row(logits.nrows() - 1).to_owned();
        let lp = log_softmax(&row);
        let next = argmax(&row);
        logprobs.push(lp[next]);
        emitted.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(DecodeResult {
        tokens: strip_specials(&emitted),
        score: logprobs.iter().sum(),
        forward_passes: passes,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        per_position_logprobs: logprobs,
    })
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    logprobs: Vec<f32>,
    sum_logp: f32,
    cache: KVCache,
    beam_index: usize,
}

struct Finished {
    tokens: Vec<usize>,
    logprobs: Vec<f32>,
    score: f32,
    finish_step: usize,
    beam_index: usize,
}

/// Standard beam search. A finished hypothesis scores
/// `sum_logp / len^length_penalty` with `len` counting the emitted
/// tokens including [EOS]; ties break toward the earlier finishing step,
/// then the lower beam index.
pub fn ar_beam(
    enc: &EncoderStates,
    params: &Parameters,
    cfg: &ModelConfig,
    beam: usize,
    length_penalty: f32,
    max_len: usize,
) -> Result<DecodeResult, DecodeError> {
    if beam < 1 {
        return Err(DecodeError::BadBeam);
    }
    if max_len < 1 {
        return Err(DecodeError::BadMaxLen);
    }
    let start = Instant::now();
    let mut passes = 0usize;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprobs: Vec::new(),
        sum_logp: 0.0,
        cache: KVCache::new(cfg.dec_layers, cfg.d_model),
        beam_index: 0,
    }];
    let mut finished: Vec<Finished> = Vec::new();
    for step in 0..max_len {
        let mut candidates: Vec<(f32, usize, usize, f32)> = Vec::new(); // (sum, hyp, token, logp)
        let mut step_lps: Vec<Array1<f32>> = Vec::with_capacity(live.len());
        for (hi, hyp) in live.iter_mut().enumerate() {
            let (new_tokens, start_pos, n_append) = if step == 0 {
                (vec![MASK], 0, 0)
            } else {
                (vec![hyp.tokens[step - 1], MASK], step - 1, 1)
            };
            let logits = step_logits(
                params, cfg, enc, &new_tokens, start_pos, &mut hyp.cache, n_append,
            )?;
            passes += 1;
            let lp = log_softmax(&logits.row(logits.nrows() - 1).to_owned());
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap().then(a.cmp(&b)));
            for &tok in order.iter().take(beam) {
                candidates.push((hyp.sum_logp + lp[tok], hi, tok, lp[tok]));
            }
            step_lps.push(lp);
        }
        // Stable by (score desc, hyp index, token index) so beam=1
        // reproduces greedy argmax exactly.
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next_live: Vec<Hypothesis> = Vec::with_capacity(beam);
        for &(sum, hi, tok, lp) in &candidates {
            if next_live.len() >= beam {
                break;
            }
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            let mut logprobs = live[hi].logprobs.clone();
            logprobs.push(lp);
            if tok == EOS {
                let len = tokens.len() as f32;
                finished.push(Finished {
                    tokens,
                    logprobs,
                    score: sum / len.powf(length_penalty),
                    finish_step: step,
                    beam_index: next_live.len(),
                });
            } else {
                next_live.push(Hypothesis {
                    tokens,
                    logprobs,
                    sum_logp: sum,
                    cache: live[hi].cache.clone(),
                    beam_index: next_live.len(),
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    let best = finished
        .into_iter()
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap()
                .then(b.finish_step.cmp(&a.finish_step))
                .then(b.beam_index.cmp(&a.beam_index))
        })
        .map(|f| (f.tokens, f.logprobs, f.score));
    let (tokens, logprobs, score) = match best {
        Some(t) => t,
        None => {
            // nothing finished: best unfinished hypothesis at max_len
            let h = live
                .into_iter()
                .max_by(|a, b| {
                    let sa = a.sum_logp / (a.tokens.len() as f32).powf(length_penalty);
                    let sb = b.sum_logp / (b.tokens.len() as f32).powf(length_penalty);
                    sa.partial_cmp(&sb).unwrap().then(b.beam_index.cmp(&a.beam_index))
                })
                .expect("at least one hypothesis");
            let score = h.sum_logp / (h.tokens.len() as f32).powf(length_penalty);
            (h.tokens, h.logprobs, score)
        }
    };
    Ok(DecodeResult {
        tokens: strip_specials(&tokens),
        score,
        forward_passes: passes,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        per_position_logprobs: logprobs,
    })
}

/// One decoder pass over `max_len` [MASK] inputs under the causal
/// self-inclusive mask; argmax per position, truncated at the first
/// [EOS], with adjacent duplicates collapsed.
pub fn nar_decode(
    enc: &EncoderStates,
    params: &Parameters,
    cfg: &ModelConfig,
    max_len: usize,
) -> Result<DecodeResult, DecodeError> {
    if max_len < 1 {
        return Err(DecodeError::BadMaxLen);
    }
    if max_len > cfg.max_positions {
        return Err(DecodeError::TooLong(max_len, cfg.max_positions));
    }
    let start = Instant::now();
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let enc_idx = g.leaf(enc.h.clone(), false);
    let masks = vec![MASK; max_len];
    let logits = single_stream_forward(
        &mut g, &bound, cfg, &masks, 0, enc_idx, &enc.pad, None, None,
    )?;
    let logits = g.value(logits);
    let mut emitted = Vec::new();
    let mut logprobs = Vec::new();
    for i in 0..max_len {
        let row = logits.row(i).to_owned();
        let lp = log_softmax(&row);
        let tok = argmax(&row);
        logprobs.push(lp[tok]);
        emitted.push(tok);
        if tok == EOS {
            break;
        }
    }
    let score = logprobs.iter().sum();
    let tokens = strip_specials(&collapse_repeats(&emitted));
    Ok(DecodeResult {
        tokens,
        score,
        forward_passes: 1,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        per_position_logprobs: logprobs,
    })
}

/// Greedy-generate up to `n_ar` tokens, then predict `n_nar` appended
/// [MASK]s in one pass; the parallel phase never rewrites the prefix.
/// An [EOS] during the sequential phase skips the parallel phase.
pub fn semi_nar_decode(
    enc: &EncoderStates,
    params: &Parameters,
    cfg: &ModelConfig,
    n_ar: usize,
    n_nar: usize,
) -> Result<DecodeResult, DecodeError> {
    if n_nar < 1 {
        return Err(DecodeError::BadMaxLen);
    }
    if n_ar + n_nar > cfg.max_positions {
        return Err(DecodeError::TooLong(n_ar + n_nar, cfg.max_positions));
    }
    let start = Instant::now();
    let mut cache = KVCache::new(cfg.dec_layers, cfg.d_model);
    let mut prefix: Vec<usize> = Vec::new();
    let mut logprobs: Vec<f32> = Vec::new();
    let mut passes = 0usize;
    let mut hit_eos = false;
    for t in 0..n_ar {
        let (new_tokens, start_pos, n_append) = if t == 0 {
            (vec![MASK], 0, 0)
        } else {
            (vec![prefix[t - 1], MASK], t - 1, 1)
        };
        let logits = step_logits(params, cfg, enc, &new_tokens, start_pos, &mut cache, n_append)?;
        passes += 1;
        let row = logits.row(logits.nrows() - 1).to_owned();
        let lp = log_softmax(&row);
        let tok = argmax(&row);
        logprobs.push(lp[tok]);
        prefix.push(tok);
        if tok == EOS {
            hit_eos = true;
            break;
        }
    }
    let mut nar_part: Vec<usize> = Vec::new();
    if !hit_eos {
        // one parallel pass over the appended masks; the last prefix
        // token rides along to enter the cache-visible context
        let mut new_tokens: Vec<usize> = Vec::new();
        let (start_pos, n_append) = if prefix.is_empty() {
            (0, 0)
        } else {
            new_tokens.push(prefix[prefix.len() - 1]);
            (prefix.len() - 1, 1)
        };
        new_tokens.extend(std::iter::repeat(MASK).take(n_nar));
        let logits = step_logits(params, cfg, enc, &new_tokens, start_pos, &mut cache, n_append)?;
        passes += 1;
        let offset = logits.nrows() - n_nar;
        for i in 0..n_nar {
            let row = logits.row(offset + i).to_owned();
            let lp = log_softmax(&row);
            let tok = argmax(&row);
            logprobs.push(lp[tok]);
            nar_part.push(tok);
            if tok == EOS {
                break;
            }
        }
        nar_part = collapse_repeats(&nar_part);
        // boundary duplicate with the untouched prefix tail
        if let (Some(&last), Some(&first)) = (prefix.last(), nar_part.first()) {
            if last == first {
                nar_part.remove(0);
            }
        }
    }
    let mut emitted = prefix;
    emitted.extend(nar_part);
    Ok(DecodeResult {
        tokens: strip_specials(&emitted),
        score: logprobs.iter().sum(),
        forward_passes: passes,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        per_position_logprobs: logprobs,
    })
}
