//! Training objectives: the unified loss with its AR / bridging / NAR
//! decomposition, the span-mask pretraining batcher, and the optimizer
//! with its warmup/inverse-sqrt schedule.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Idx};
use crate::data::{ParallelPair, EOS, MASK};
use crate::masking::StreamLayout;
use crate::model::{
    bind, encode, nstream_decoder_forward, single_stream_forward, ModelConfig, ModelError,
    Parameters,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("smoothing epsilon {0} outside [0,1)")]
    BadEps(f32),
    #[error("logits rows {got} do not cover layout rows {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("NaN loss at batch index {index}")]
    NanLoss { index: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty corpus")]
    EmptyCorpus,
}

/// Total negative log-likelihood split into the AR, bridging, and NAR
/// sums, with term counts and per-cell values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f32,
    pub ar_part: f32,
    pub bridging_part: f32,
    pub nar_part: f32,
    pub ar_terms: usize,
    pub bridging_terms: usize,
    pub nar_terms: usize,
    /// (stream, position, loss) for every valid predicting cell.
    pub per_cell: Vec<(usize, usize, f32)>,
}

impl LossBreakdown {
    pub fn terms(&self) -> usize {
        self.ar_terms + self.bridging_terms + self.nar_terms
    }

    pub fn per_token(&self) -> f32 {
        self.total / self.terms() as f32
    }
}

/// Which of the three sums a valid predicting cell belongs to. The
/// (1, 1) cell is simultaneously the first AR and first NAR term as the
/// sums are written; it is counted once, in the AR part.
pub fn cell_part(s: usize, t: usize) -> Part {
    if s == 1 {
        Part::Ar
    } else if s == t {
        Part::Nar
    } else {
        Part::Bridging
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Ar,
    Bridging,
    Nar,
}

/// Label-smoothed cross-entropy over every valid predicting cell of the
/// layout, partitioned into the three sums. Returns the breakdown and
/// the graph node holding the mean per-cell loss (the training
/// objective).
pub fn bang_loss(
    g: &mut Graph,
    logits: Idx,
    golden_tokens: &[usize],
    layout: &StreamLayout,
    smoothing: f32,
) -> Result<(LossBreakdown, Idx), ObjectiveError> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(ObjectiveError::BadEps(smoothing));
    }
    if g.value(logits).nrows() != layout.rows() {
        return Err(ObjectiveError::ShapeMismatch {
            got: g.value(logits).nrows(),
            want: layout.rows(),
        });
    }
    let cells: Vec<(usize, usize)> = layout.valid_predicting_cells().collect();
    let rows: Vec<usize> = cells.iter().map(|&(s, t)| layout.row_index(s, t)).collect();
    let targets: Vec<usize> = cells.iter().map(|&(_, t)| golden_tokens[t - 1]).collect();
    let sel = g.gather_rows(logits, rows);
    let nll = g.smoothed_nll_rows(sel, targets, smoothing);

    let weights_for = |part: Part| -> Vec<f32> {
        cells
            .iter()
            .map(|&(s, t)| if cell_part(s, t) == part { 1.0 } else { 0.0 })
            .collect()
    };
    let ar = g.dot_const_col(nll, weights_for(Part::Ar));
    let bridge = g.dot_const_col(nll, weights_for(Part::Bridging));
    let nar = g.dot_const_col(nll, weights_for(Part::Nar));
    let total = {
        let ab = g.add(ar, bridge);
        g.add(ab, nar)
    };
    let mean = g.scale(total, 1.0 / cells.len() as f32);

    let per_cell: Vec<(usize, usize, f32)> = cells
        .iter()
        .enumerate()
        .map(|(i, &(s, t))| (s, t, g.value(nll)[(i, 0)]))
        .collect();
    let count = |part: Part| cells.iter().filter(|&&(s, t)| cell_part(s, t) == part).count();
    let breakdown = LossBreakdown {
        total: g.value(total)[(0, 0)],
        ar_part: g.value(ar)[(0, 0)],
        bridging_part: g.value(bridge)[(0, 0)],
        nar_part: g.value(nar)[(0, 0)],
        ar_terms: count(Part::Ar),
        bridging_terms: count(Part::Bridging),
        nar_terms: count(Part::Nar),
        per_cell,
    };
    Ok((breakdown, mean))
}

/// Teacher-forced NLL: the unified loss restricted to a single
/// predicting stream.
pub fn ar_loss(
    g: &mut Graph,
    logits: Idx,
    golden_tokens: &[usize],
    smoothing: f32,
) -> Result<(LossBreakdown, Idx), ObjectiveError> {
    let layout = StreamLayout::new(golden_tokens.len(), 1).expect("nonempty target");
    bang_loss(g, logits, golden_tokens, &layout, smoothing)
}

/// Per-position smoothed cross-entropy for an all-mask causal pass:
/// `logits` row t scores target position t.
pub fn nar_loss(
    g: &mut Graph,
    logits: Idx,
    golden_tokens: &[usize],
    smoothing: f32,
) -> Result<(f32, Idx), ObjectiveError> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(ObjectiveError::BadEps(smoothing));
    }
    if g.value(logits).nrows() != golden_tokens.len() {
        return Err(ObjectiveError::ShapeMismatch {
            got: g.value(logits).nrows(),
            want: golden_tokens.len(),
        });
    }
    let nll = g.smoothed_nll_rows(logits, golden_tokens.to_vec(), smoothing);
    let sum = g.dot_const_col(nll, vec![1.0; golden_tokens.len()]);
    let value = g.value(sum)[(0, 0)];
    let mean = g.scale(sum, 1.0 / golden_tokens.len() as f32);
    Ok((value, mean))
}

/// One span-mask pretraining example: a token block with a contiguous
/// span replaced by [MASK]s, and the original span (plus [EOS]) as the
/// decoder target.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub enc_input: Vec<usize>,
    pub target: Vec<usize>,
    pub span_start: usize,
    pub doc_id: usize,
    pub block_index: usize,
}

/// Split documents into consecutive `block`-token blocks (a final short
/// block is kept when it has at least 16 tokens) and mask one contiguous
/// span per block: length `min(max_span, floor(ratio * block_len))`,
/// at least 1, start offset uniform. Deterministic given the seed.
pub fn span_mask_batches(
    docs: &[Vec<usize>],
    block: usize,
    ratio: f32,
    max_span: usize,
    seed: u64,
) -> Result<Vec<PretrainExample>, ObjectiveError> {
    if docs.iter().all(|d| d.is_empty()) {
        return Err(ObjectiveError::EmptyCorpus);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (doc_id, doc) in docs.iter().enumerate() {
        for (block_index, chunk) in doc.chunks(block).enumerate() {
            if chunk.len() < block && chunk.len() < 16 {
                continue;
            }
            let blen = chunk.len();
            let span = ((ratio * blen as f32).floor() as usize)
                .min(max_span)
                .max(1);
            let start = rng.gen_range(0..=blen - span);
            let mut enc_input = chunk.to_vec();
            let mut target: Vec<usize> = enc_input[start..start + span].to_vec();
            for slot in enc_input[start..start + span].iter_mut() {
                *slot = MASK;
            }
            target.push(EOS);
            out.push(PretrainExample {
                enc_input,
                target,
                span_start: start,
                doc_id,
                block_index,
            });
        }
    }
    if out.is_empty() {
        return Err(ObjectiveError::EmptyCorpus);
    }
    Ok(out)
}

/// Linear warmup to the peak rate, then inverse-sqrt decay.
pub fn lr_at(step: usize, peak: f32, warmup: usize) -> f32 {
    let s = step.max(1) as f32;
    let w = warmup.max(1) as f32;
    peak * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Bang,
    Ar,
    Nar,
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bang" | "multi" => Ok(TrainMode::Bang),
            "ar" => Ok(TrainMode::Ar),
            "nar" => Ok(TrainMode::Nar),
            other => Err(format!("unknown train mode {other}")),
        }
    }
}

/// Adam moments plus the step counter; exclusively owned by the
/// training loop.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: usize,
    pub m: IndexMap<String, Array2<f32>>,
    pub v: IndexMap<String, Array2<f32>>,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let zeros = |p: &Parameters| {
            p.tensors
                .iter()
                .map(|(k, t)| (k.clone(), Array2::zeros(t.raw_dim())))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f32,
    pub warmup_steps: usize,
    pub smoothing: f32,
    pub clip_norm: f32,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-4,
            warmup_steps: 1000,
            smoothing: 0.1,
            clip_norm: 1.0,
        }
    }
}

/// Forward/backward on one (source, target) pair. Returns the loss
/// breakdown and accumulates parameter gradients scaled by `weight`.
#[allow(clippy::too_many_arguments)]
fn sample_grads(
    params: &Parameters,
    cfg: &ModelConfig,
    src: &[usize],
    tgt_with_eos: &[usize],
    mode: TrainMode,
    smoothing: f32,
    weight: f32,
    rng: &mut ChaCha20Rng,
    grads: &mut IndexMap<String, Array2<f32>>,
) -> Result<LossBreakdown, ObjectiveError> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, true);
    let pad = vec![false; src.len()];
    let mut rng_enc = rng.clone();
    let enc = encode(&mut g, &bound, cfg, src, &pad, Some(&mut rng_enc))?;
    let t_len = tgt_with_eos.len();
    let (breakdown, mean) = match mode {
        TrainMode::Bang | TrainMode::Ar => {
            let n = if mode == TrainMode::Ar {
                1
            } else {
                cfg.n_streams.min(t_len)
            };
            let layout = StreamLayout::new(t_len, n).expect("valid layout");
            let logits = nstream_decoder_forward(
                &mut g,
                &bound,
                cfg,
                tgt_with_eos,
                MASK,
                enc,
                &pad,
                &layout,
                Some(rng),
            )?;
            bang_loss(&mut g, logits, tgt_with_eos, &layout, smoothing)?
        }
        TrainMode::Nar => {
            let masks = vec![MASK; t_len];
            let logits = single_stream_forward(
                &mut g, &bound, cfg, &masks, 0, enc, &pad, None, Some(rng),
            )?;
            let (value, mean) = nar_loss(&mut g, logits, tgt_with_eos, smoothing)?;
            let bd = LossBreakdown {
                total: value,
                ar_part: 0.0,
                bridging_part: 0.0,
                nar_part: value,
                ar_terms: 0,
                bridging_terms: 0,
                nar_terms: t_len,
                per_cell: Vec::new(),
            };
            (bd, mean)
        }
    };
    let objective = g.scale(mean, weight);
    g.backward(objective);
    for (name, _) in &params.tensors {
        if let Some(grad) = g.grad(bound.idx(name)) {
            match grads.get_mut(name) {
                Some(acc) => *acc += grad,
                None => {
                    grads.insert(name.clone(), grad.clone());
                }
            }
        }
    }
    Ok(breakdown)
}

/// One optimizer step over a batch: per-mode forward, mean loss over
/// valid cells, backward, global-norm clip, Adam update under the
/// warmup / inverse-sqrt schedule.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut Parameters,
    adam: &mut AdamState,
    cfg: &ModelConfig,
    hyper: &TrainHyper,
    batch: &[ParallelPair],
    mode: TrainMode,
    seed: u64,
) -> Result<LossBreakdown, ObjectiveError> {
    let mut grads: IndexMap<String, Array2<f32>> = IndexMap::new();
    let weight = 1.0 / batch.len() as f32;
    let mut agg: Option<LossBreakdown> = None;
    for (i, pair) in batch.iter().enumerate() {
        let mut tgt = pair.tgt.clone();
        tgt.push(EOS);
        let mut rng =
            ChaCha20Rng::seed_from_u64(seed ^ (adam.step as u64).wrapping_mul(0x9e3779b97f4a7c15)
                ^ (i as u64).wrapping_mul(0xd1b54a32d192ed03));
        let bd = sample_grads(
            params, cfg, &pair.src, &tgt, mode, hyper.smoothing, weight, &mut rng, &mut grads,
        )?;
        if !bd.total.is_finite() {
            return Err(ObjectiveError::NanLoss { index: i });
        }
        agg = Some(match agg {
            None => bd,
            Some(mut a) => {
                a.ar_part += bd.ar_part;
                a.bridging_part += bd.bridging_part;
                a.nar_part += bd.nar_part;
                a.total = a.ar_part + a.bridging_part + a.nar_part;
                a.ar_terms += bd.ar_terms;
                a.bridging_terms += bd.bridging_terms;
                a.nar_terms += bd.nar_terms;
                a.per_cell.extend(bd.per_cell);
                a
            }
        });
    }

    // global-norm clip
    let norm: f32 = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f32>())
        .sum::<f32>()
        .sqrt();
    let scale = if norm > hyper.clip_norm {
        hyper.clip_norm / norm
    } else {
        1.0
    };

    adam.step += 1;
    let lr = lr_at(adam.step, hyper.lr, hyper.warmup_steps);
    let b1c = 1.0 - ADAM_BETA1.powi(adam.step as i32);
    let b2c = 1.0 - ADAM_BETA2.powi(adam.step as i32);
    for (name, grad) in &grads {
        let g = grad * scale;
        let m = adam.m.get_mut(name).unwrap();
        let v = adam.v.get_mut(name).unwrap();
        m.zip_mut_with(&g, |m, &gi| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi);
        v.zip_mut_with(&g, |v, &gi| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi);
        let p = params.tensors.get_mut(name).unwrap();
        ndarray::Zip::from(p)
            .and(&*m)
            .and(&*v)
            .for_each(|p, &m, &v| {
                *p -= lr * (m / b1c) / ((v / b2c).sqrt() + ADAM_EPS);
            });
    }
    Ok(agg.expect("non-empty batch"))
}
