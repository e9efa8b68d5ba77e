//! Transformer encoder plus the cross-stream visible n-stream decoder,
//! with a single-stream causal decoder over literal prefixes serving as
//! the slow reference path.

use std::rc::Rc;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Idx};
use crate::masking::{build_mask, StreamLayout};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input length {len} exceeds max_positions {max}")]
    Overlong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    BadToken { id: usize, vocab: usize },
    #[error("layout has {layout_n} streams but config allows {config_n}")]
    LayoutMismatch { layout_n: usize, config_n: usize },
    #[error("golden token count {got} does not match layout target_len {want}")]
    TargetMismatch { got: usize, want: usize },
    #[error("prefix must contain at least one token")]
    EmptyPrefix,
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Architecture hyperparameters. `seed` drives deterministic
/// initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub n_streams: usize,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
    pub dropout: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; a full-size 6/6/768 configuration is
    /// expressible but not exercised by tests.
    fn default() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            vocab_size: 64,
            max_positions: 128,
            n_streams: 8,
            rel_buckets: 32,
            rel_max_distance: 64,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_streams > self.max_positions {
            return Err(ModelError::BadConfig(
                "n_streams exceeds max_positions".into(),
            ));
        }
        for (name, v) in [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("n_streams", self.n_streams),
            ("rel_buckets", self.rel_buckets),
            ("rel_max_distance", self.rel_max_distance),
        ] {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig("dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Ordered name -> tensor weight store.
#[derive(Debug, Clone)]
pub struct Parameters {
    pub tensors: IndexMap<String, Array2<f32>>,
}

impl Parameters {
    /// Deterministic initialization from `config.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut t: IndexMap<String, Array2<f32>> = IndexMap::new();
        let d = cfg.d_model;
        let normal = |shape: (usize, usize), rng: &mut ChaCha20Rng| {
            Array2::from_shape_fn(shape, |_| {
                // Box-Muller; only the deterministic stream matters.
                let u1: f32 = rng.gen_range(1e-7f32..1.0);
                let u2: f32 = rng.gen_range(0.0f32..1.0);
                0.02 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
            })
        };
        t.insert("emb.tok".into(), normal((cfg.vocab_size, d), &mut rng));
        t.insert("emb.pos_enc".into(), normal((cfg.max_positions, d), &mut rng));
        t.insert("emb.pos_dec".into(), normal((cfg.max_positions, d), &mut rng));
        let linear = |t: &mut IndexMap<String, Array2<f32>>,
                          prefix: &str,
                          din: usize,
                          dout: usize,
                          rng: &mut ChaCha20Rng| {
            t.insert(format!("{prefix}.w"), normal((din, dout), rng));
            t.insert(format!("{prefix}.b"), Array2::zeros((1, dout)));
        };
        let ln = |t: &mut IndexMap<String, Array2<f32>>, prefix: &str| {
            t.insert(format!("{prefix}.g"), Array2::from_elem((1, d), 1.0));
            t.insert(format!("{prefix}.b"), Array2::zeros((1, d)));
        };
        let attn = |t: &mut IndexMap<String, Array2<f32>>, prefix: &str, rng: &mut ChaCha20Rng| {
            for part in ["q", "k", "v", "o"] {
                t.insert(format!("{prefix}.w{part}"), normal((d, d), rng));
                t.insert(format!("{prefix}.b{part}"), Array2::zeros((1, d)));
            }
        };
        for l in 0..cfg.enc_layers {
            let p = format!("enc.{l}");
            ln(&mut t, &format!("{p}.ln1"));
            attn(&mut t, &format!("{p}.attn"), &mut rng);
            ln(&mut t, &format!("{p}.ln2"));
            linear(&mut t, &format!("{p}.ffn.fc1"), d, cfg.d_ffn, &mut rng);
            linear(&mut t, &format!("{p}.ffn.fc2"), cfg.d_ffn, d, &mut rng);
        }
        ln(&mut t, "enc.final_ln");
        for l in 0..cfg.dec_layers {
            let p = format!("dec.{l}");
            ln(&mut t, &format!("{p}.ln1"));
            attn(&mut t, &format!("{p}.self_attn"), &mut rng);
            ln(&mut t, &format!("{p}.ln2"));
            attn(&mut t, &format!("{p}.cross_attn"), &mut rng);
            ln(&mut t, &format!("{p}.ln3"));
            linear(&mut t, &format!("{p}.ffn.fc1"), d, cfg.d_ffn, &mut rng);
            linear(&mut t, &format!("{p}.ffn.fc2"), cfg.d_ffn, d, &mut rng);
        }
        ln(&mut t, "dec.final_ln");
        t.insert(
            "dec.rel_bias".into(),
            normal((cfg.n_heads, cfg.rel_buckets), &mut rng),
        );
        Ok(Parameters { tensors: t })
    }

    pub fn get(&self, name: &str) -> &Array2<f32> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// Signed-distance bucketing for the relative positional bias: exact for
/// small distances, logarithmic out to `max_distance`, clamped beyond.
pub fn relative_bucket(rel: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let max_exact = half / 2;
    let (base, n) = if rel > 0 {
        (half, rel as usize)
    } else {
        (0, (-rel) as usize)
    };
    let b = if n < max_exact {
        n
    } else {
        let v = max_exact as f32
            + (n as f32 / max_exact as f32).ln()
                / (max_distance as f32 / max_exact as f32).ln()
                * (half - max_exact) as f32;
        (v as usize).min(half - 1)
    };
    base + b
}

/// Bias scalar for one (query position, key position, head) triple.
/// Positions are target positions; stream identity does not enter.
pub fn relative_bias(
    q_pos: usize,
    k_pos: usize,
    head: usize,
    params: &Parameters,
    cfg: &ModelConfig,
) -> f32 {
    let bucket = relative_bucket(
        k_pos as i64 - q_pos as i64,
        cfg.rel_buckets,
        cfg.rel_max_distance,
    );
    params.get("dec.rel_bias")[(head, bucket)]
}

/// Encoder output captured outside a graph, for reuse across decode
/// steps.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub h: Array2<f32>,
    pub pad: Vec<bool>,
}

/// Per-layer appended key/value tensors for already-generated decoder
/// positions. Appending is the only mutation.
#[derive(Debug, Clone)]
pub struct KVCache {
    pub layers: Vec<(Array2<f32>, Array2<f32>)>,
    pub positions: Vec<usize>,
}

impl KVCache {
    pub fn new(dec_layers: usize, d_model: usize) -> Self {
        KVCache {
            layers: vec![
                (Array2::zeros((0, d_model)), Array2::zeros((0, d_model)));
                dec_layers
            ],
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn append(&mut self, layer: usize, k: &Array2<f32>, v: &Array2<f32>) {
        let (ck, cv) = &mut self.layers[layer];
        *ck = ndarray::concatenate(ndarray::Axis(0), &[ck.view(), k.view()]).unwrap();
        *cv = ndarray::concatenate(ndarray::Axis(0), &[cv.view(), v.view()]).unwrap();
    }
}

/// Parameter leaves bound into one graph.
pub struct Bound {
    map: IndexMap<String, Idx>,
    pub train: bool,
}

impl Bound {
    pub fn idx(&self, name: &str) -> Idx {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}

/// Insert every parameter tensor as a graph leaf. `train` enables
/// gradients and dropout.
pub fn bind(g: &mut Graph, params: &Parameters, train: bool) -> Bound {
    let mut map = IndexMap::new();
    for (name, tensor) in &params.tensors {
        map.insert(name.clone(), g.leaf(tensor.clone(), train));
    }
    Bound { map, train }
}

struct AttnWeights {
    wq: Idx,
    bq: Idx,
    wk: Idx,
    bk: Idx,
    wv: Idx,
    bv: Idx,
    wo: Idx,
    bo: Idx,
}

fn attn_weights(bound: &Bound, prefix: &str) -> AttnWeights {
    AttnWeights {
        wq: bound.idx(&format!("{prefix}.wq")),
        bq: bound.idx(&format!("{prefix}.bq")),
        wk: bound.idx(&format!("{prefix}.wk")),
        bk: bound.idx(&format!("{prefix}.bk")),
        wv: bound.idx(&format!("{prefix}.wv")),
        bv: bound.idx(&format!("{prefix}.bv")),
        wo: bound.idx(&format!("{prefix}.wo")),
        bo: bound.idx(&format!("{prefix}.bo")),
    }
}

fn layer_norm(g: &mut Graph, bound: &Bound, prefix: &str, x: Idx) -> Idx {
    let n = g.layer_norm_rows(x);
    let n = g.mul_row(n, bound.idx(&format!("{prefix}.g")));
    g.add_row(n, bound.idx(&format!("{prefix}.b")))
}

fn dropout(
    g: &mut Graph,
    x: Idx,
    p: f32,
    train: bool,
    rng: Option<&mut ChaCha20Rng>,
) -> Idx {
    if !train || p == 0.0 {
        return x;
    }
    let rng = rng.expect("training forward needs an rng for dropout");
    let keep = 1.0 - p;
    let dim = g.value(x).raw_dim();
    let mask = Array2::from_shape_fn(dim, |_| {
        if rng.gen_range(0.0f32..1.0) < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    g.mul_const(x, mask)
}

fn ffn(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    x: Idx,
    p_drop: f32,
    rng: &mut Option<&mut ChaCha20Rng>,
) -> Idx {
    let h = g.matmul(x, bound.idx(&format!("{prefix}.fc1.w")));
    let h = g.add_row(h, bound.idx(&format!("{prefix}.fc1.b")));
    let h = g.gelu(h);
    let h = dropout(g, h, p_drop, bound.train, rng.as_deref_mut());
    let h = g.matmul(h, bound.idx(&format!("{prefix}.fc2.w")));
    g.add_row(h, bound.idx(&format!("{prefix}.fc2.b")))
}

/// Multi-head attention. `bias_for_head` may add a learned bias matrix
/// per head; `mask` is an additive constant (0 / -1e9) over
/// `[q_rows x k_rows]`. When `extra_kv` is given, its rows are
/// prepended to the keys/values of every head.
#[allow(clippy::too_many_arguments)]
fn mha(
    g: &mut Graph,
    cfg: &ModelConfig,
    w: &AttnWeights,
    q_in: Idx,
    kv_in: Idx,
    mask: Option<&Array2<f32>>,
    bias_for_head: &mut dyn FnMut(&mut Graph, usize) -> Option<Idx>,
    p_drop: f32,
    train: bool,
    rng: &mut Option<&mut ChaCha20Rng>,
) -> Idx {
    let dh = cfg.d_head();
    let q = g.matmul(q_in, w.wq);
    let q = g.add_row(q, w.bq);
    let k = g.matmul(kv_in, w.wk);
    let k = g.add_row(k, w.bk);
    let v = g.matmul(kv_in, w.wv);
    let v = g.add_row(v, w.bv);
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let mut scores = g.matmul_nt(qh, kh);
        scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
        if let Some(b) = bias_for_head(g, h) {
            scores = g.add(scores, b);
        }
        if let Some(m) = mask {
            scores = g.add_const(scores, m);
        }
        let probs = g.softmax_rows(scores);
        let probs = dropout(g, probs, p_drop, train, rng.as_deref_mut());
        heads.push(g.matmul(probs, vh));
    }
    let cat = g.concat_cols(heads);
    let out = g.matmul(cat, w.wo);
    g.add_row(out, w.bo)
}

fn pad_mask_const(q_rows: usize, pad: &[bool]) -> Array2<f32> {
    Array2::from_shape_fn((q_rows, pad.len()), |(_, k)| {
        if pad[k] {
            crate::masking::MASKED
        } else {
            0.0
        }
    })
}

fn check_tokens(tokens: &[usize], cfg: &ModelConfig) -> Result<(), ModelError> {
    if tokens.is_empty() || tokens.len() > cfg.max_positions {
        return Err(ModelError::Overlong {
            len: tokens.len(),
            max: cfg.max_positions,
        });
    }
    for &id in tokens {
        if id >= cfg.vocab_size {
            return Err(ModelError::BadToken {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

fn embed(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    table: &str,
    ids: Vec<usize>,
    positions: Vec<usize>,
    rng: &mut Option<&mut ChaCha20Rng>,
) -> Idx {
    let tok = g.gather_rows(bound.idx("emb.tok"), ids);
    let tok = g.scale(tok, (cfg.d_model as f32).sqrt());
    let pos = g.gather_rows(bound.idx(table), positions);
    let x = g.add(tok, pos);
    dropout(g, x, cfg.dropout, bound.train, rng.as_deref_mut())
}

/// Stacked pre-norm encoder with full bidirectional visibility over
/// non-pad positions. `pad_id`-marked tail positions are masked out of
/// attention.
pub fn encode(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    source_tokens: &[usize],
    pad: &[bool],
    mut rng: Option<&mut ChaCha20Rng>,
) -> Result<Idx, ModelError> {
    check_tokens(source_tokens, cfg)?;
    let len = source_tokens.len();
    let mut x = embed(
        g,
        bound,
        cfg,
        "emb.pos_enc",
        source_tokens.to_vec(),
        (0..len).collect(),
        &mut rng,
    );
    let mask = pad_mask_const(len, pad);
    for l in 0..cfg.enc_layers {
        let p = format!("enc.{l}");
        let ln1 = layer_norm(g, bound, &format!("{p}.ln1"), x);
        let w = attn_weights(bound, &format!("{p}.attn"));
        let a = mha(
            g,
            cfg,
            &w,
            ln1,
            ln1,
            Some(&mask),
            &mut |_, _| None,
            cfg.dropout,
            bound.train,
            &mut rng,
        );
        x = g.add(x, a);
        let ln2 = layer_norm(g, bound, &format!("{p}.ln2"), x);
        let f = ffn(g, bound, &format!("{p}.ffn"), ln2, cfg.dropout, &mut rng);
        x = g.add(x, f);
    }
    Ok(layer_norm(g, bound, "enc.final_ln", x))
}

/// Convenience wrapper: run the encoder in a throwaway graph and capture
/// the hidden states for decode-time reuse.
pub fn encode_states(
    params: &Parameters,
    cfg: &ModelConfig,
    source_tokens: &[usize],
) -> Result<EncoderStates, ModelError> {
    let pad = vec![false; source_tokens.len()];
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let h = encode(&mut g, &bound, cfg, source_tokens, &pad, None)?;
    Ok(EncoderStates {
        h: g.value(h).clone(),
        pad,
    })
}

fn tied_logits(g: &mut Graph, bound: &Bound, x: Idx) -> Idx {
    g.matmul_nt(x, bound.idx("emb.tok"))
}

/// Full n-stream decoder forward over a [`StreamLayout`].
///
/// Main-stream row (0, t) embeds golden token `y_t`; predicting row
/// (s, t) embeds `mask_id`, both at position t. Stream self-attention
/// iterates blocks in order main, 1, .., n against a growing key/value
/// cache; only previous streams are visible so the cache is always a
/// row prefix. Returns logits over all layout rows.
#[allow(clippy::too_many_arguments)]
pub fn nstream_decoder_forward(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    golden_tokens: &[usize],
    mask_id: usize,
    enc: Idx,
    enc_pad: &[bool],
    layout: &StreamLayout,
    mut rng: Option<&mut ChaCha20Rng>,
) -> Result<Idx, ModelError> {
    let t_len = layout.target_len;
    if golden_tokens.len() != t_len {
        return Err(ModelError::TargetMismatch {
            got: golden_tokens.len(),
            want: t_len,
        });
    }
    if t_len > cfg.max_positions {
        return Err(ModelError::Overlong {
            len: t_len,
            max: cfg.max_positions,
        });
    }
    if layout.n_streams > cfg.n_streams {
        return Err(ModelError::LayoutMismatch {
            layout_n: layout.n_streams,
            config_n: cfg.n_streams,
        });
    }
    check_tokens(golden_tokens, cfg)?;
    let rows = layout.rows();
    let mut ids = Vec::with_capacity(rows);
    let mut positions = Vec::with_capacity(rows);
    for r in 0..rows {
        let (s, t) = layout.cell(r);
        ids.push(if s == 0 { golden_tokens[t - 1] } else { mask_id });
        positions.push(t - 1);
    }
    let vis = build_mask(layout);
    // bucket grid over target positions, shared by all heads and layers
    let bucket_grid: Rc<Vec<usize>> = Rc::new(
        (0..rows)
            .flat_map(|q| {
                let tq = positions[q];
                (0..rows).map(move |k| (q, tq, k))
            })
            .map(|(_, tq, k)| {
                relative_bucket(
                    positions[k] as i64 - tq as i64,
                    cfg.rel_buckets,
                    cfg.rel_max_distance,
                )
            })
            .collect(),
    );
    let rel_param = bound.idx("dec.rel_bias");
    let cross_mask = pad_mask_const(rows, enc_pad);
    let dh = cfg.d_head();

    let mut x = embed(g, bound, cfg, "emb.pos_dec", ids, positions, &mut rng);
    for l in 0..cfg.dec_layers {
        let p = format!("dec.{l}");
        // (a) cross-stream visible n-stream self-attention
        let ln1 = layer_norm(g, bound, &format!("{p}.ln1"), x);
        let w = attn_weights(bound, &format!("{p}.self_attn"));
        let q = g.matmul(ln1, w.wq);
        let q = g.add_row(q, w.bq);
        let k = g.matmul(ln1, w.wk);
        let k = g.add_row(k, w.bk);
        let v = g.matmul(ln1, w.wv);
        let v = g.add_row(v, w.bv);
        let mut block_outs = Vec::with_capacity(layout.n_streams + 1);
        for blk in 0..=layout.n_streams {
            let q_start = blk * t_len;
            let cache_len = (blk + 1) * t_len;
            let mask_sub = vis
                .bias
                .slice(ndarray::s![q_start..q_start + t_len, ..cache_len])
                .to_owned();
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = g.slice_cols(q, h * dh, dh);
                let qh = g.slice_rows(qh, q_start, t_len);
                let kh = g.slice_cols(k, h * dh, dh);
                let kh = g.slice_rows(kh, 0, cache_len);
                let vh = g.slice_cols(v, h * dh, dh);
                let vh = g.slice_rows(vh, 0, cache_len);
                let mut scores = g.matmul_nt(qh, kh);
                scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
                let sub_idx: Rc<Vec<usize>> = Rc::new(
                    (q_start..q_start + t_len)
                        .flat_map(|qr| {
                            let grid = &bucket_grid;
                            (0..cache_len).map(move |kr| grid[qr * rows + kr])
                        })
                        .collect(),
                );
                let bias = g.bias_lookup(rel_param, h, sub_idx, (t_len, cache_len));
                scores = g.add(scores, bias);
                scores = g.add_const(scores, &mask_sub);
                let probs = g.softmax_rows(scores);
                let probs = dropout(g, probs, cfg.dropout, bound.train, rng.as_deref_mut());
                heads.push(g.matmul(probs, vh));
            }
            let cat = g.concat_cols(heads);
            block_outs.push(cat);
        }
        let attn_cat = g.concat_rows(block_outs);
        let attn_out = g.matmul(attn_cat, w.wo);
        let attn_out = g.add_row(attn_out, w.bo);
        x = g.add(x, attn_out);
        // (b) encoder-decoder cross-attention
        let ln2 = layer_norm(g, bound, &format!("{p}.ln2"), x);
        let cw = attn_weights(bound, &format!("{p}.cross_attn"));
        let c = mha(
            g,
            cfg,
            &cw,
            ln2,
            enc,
            Some(&cross_mask),
            &mut |_, _| None,
            cfg.dropout,
            bound.train,
            &mut rng,
        );
        x = g.add(x, c);
        // (c) feed-forward
        let ln3 = layer_norm(g, bound, &format!("{p}.ln3"), x);
        let f = ffn(g, bound, &format!("{p}.ffn"), ln3, cfg.dropout, &mut rng);
        x = g.add(x, f);
    }
    let xf = layer_norm(g, bound, "dec.final_ln", x);
    Ok(tied_logits(g, bound, xf))
}

/// Single-stream causal decoder over a literal token sequence.
///
/// With `cache = None` this is the slow reference pass: every position
/// attends to positions at or before itself. With a cache, `tokens`
/// are new rows appended after the cached positions; the first
/// `n_append` of them have their per-layer keys/values pushed into the
/// cache for later steps.
#[allow(clippy::too_many_arguments)]
pub fn single_stream_forward(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    tokens: &[usize],
    start_pos: usize,
    enc: Idx,
    enc_pad: &[bool],
    mut cache: Option<(&mut KVCache, usize)>,
    mut rng: Option<&mut ChaCha20Rng>,
) -> Result<Idx, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    if start_pos + tokens.len() > cfg.max_positions {
        return Err(ModelError::Overlong {
            len: start_pos + tokens.len(),
            max: cfg.max_positions,
        });
    }
    check_tokens(tokens, cfg)?;
    let m = tokens.len();
    let cached = cache.as_ref().map_or(0, |(c, _)| c.len());
    let k_total = cached + m;
    let positions: Vec<usize> = (start_pos..start_pos + m).collect();
    let key_positions: Vec<usize> = cache
        .as_ref()
        .map_or(Vec::new(), |(c, _)| c.positions.clone())
        .into_iter()
        .chain(positions.iter().copied())
        .collect();
    // causal self-inclusive mask: new row i sees all cached rows and new
    // rows <= i
    let mask = Array2::from_shape_fn((m, k_total), |(i, j)| {
        if j < cached || j - cached <= i {
            0.0
        } else {
            crate::masking::MASKED
        }
    });
    let bucket_grid: Rc<Vec<usize>> = Rc::new(
        (0..m)
            .flat_map(|i| {
                let qp = positions[i] as i64;
                key_positions
                    .iter()
                    .map(move |&kp| {
                        relative_bucket(kp as i64 - qp, cfg.rel_buckets, cfg.rel_max_distance)
                    })
                    .collect::<Vec<_>>()
            })
            .collect(),
    );
    let rel_param = bound.idx("dec.rel_bias");
    let cross_mask = pad_mask_const(m, enc_pad);
    let dh = cfg.d_head();

    let mut x = embed(
        g,
        bound,
        cfg,
        "emb.pos_dec",
        tokens.to_vec(),
        positions,
        &mut rng,
    );
    for l in 0..cfg.dec_layers {
        let p = format!("dec.{l}");
        let ln1 = layer_norm(g, bound, &format!("{p}.ln1"), x);
        let w = attn_weights(bound, &format!("{p}.self_attn"));
        let q = g.matmul(ln1, w.wq);
        let q = g.add_row(q, w.bq);
        let k_new = g.matmul(ln1, w.wk);
        let k_new = g.add_row(k_new, w.bk);
        let v_new = g.matmul(ln1, w.wv);
        let v_new = g.add_row(v_new, w.bv);
        let (k_all, v_all) = if let Some((c, _)) = cache.as_ref() {
            if c.len() > 0 {
                let ck = g.leaf(c.layers[l].0.clone(), false);
                let cv = g.leaf(c.layers[l].1.clone(), false);
                (g.concat_rows(vec![ck, k_new]), g.concat_rows(vec![cv, v_new]))
            } else {
                (k_new, v_new)
            }
        } else {
            (k_new, v_new)
        };
        if let Some((c, n_append)) = cache.as_mut() {
            if *n_append > 0 {
                let kv = g.value(k_new).slice(ndarray::s![..*n_append, ..]).to_owned();
                let vv = g.value(v_new).slice(ndarray::s![..*n_append, ..]).to_owned();
                c.append(l, &kv, &vv);
            }
        }
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k_all, h * dh, dh);
            let vh = g.slice_cols(v_all, h * dh, dh);
            let mut scores = g.matmul_nt(qh, kh);
            scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
            let bias = g.bias_lookup(rel_param, h, bucket_grid.clone(), (m, k_total));
            scores = g.add(scores, bias);
            scores = g.add_const(scores, &mask);
            let probs = g.softmax_rows(scores);
            let probs = dropout(g, probs, cfg.dropout, bound.train, rng.as_deref_mut());
            heads.push(g.matmul(probs, vh));
        }
        let cat = g.concat_cols(heads);
        let a = g.matmul(cat, w.wo);
        let a = g.add_row(a, w.bo);
        x = g.add(x, a);
        let ln2 = layer_norm(g, bound, &format!("{p}.ln2"), x);
        let cw = attn_weights(bound, &format!("{p}.cross_attn"));
        let c = mha(
            g,
            cfg,
            &cw,
            ln2,
            enc,
            Some(&cross_mask),
            &mut |_, _| None,
            cfg.dropout,
            bound.train,
            &mut rng,
        );
        x = g.add(x, c);
        let ln3 = layer_norm(g, bound, &format!("{p}.ln3"), x);
        let f = ffn(g, bound, &format!("{p}.ffn"), ln3, cfg.dropout, &mut rng);
        x = g.add(x, f);
    }
    if let Some((c, n_append)) = cache.as_mut() {
        if *n_append > 0 {
            let new_pos: Vec<usize> = (start_pos..start_pos + *n_append).collect();
            c.positions.extend(new_pos);
        }
    }
    let xf = layer_norm(g, bound, "dec.final_ln", x);
    Ok(tied_logits(g, bound, xf))
}

/// Reference forward embodying the per-prefix decoder definition: a
/// causal pass over `g` golden tokens followed by `m >= 1` mask tokens,
/// returning the final position's logit row as a plain array.
pub fn oracle_forward(
    params: &Parameters,
    cfg: &ModelConfig,
    prefix_tokens_with_masks: &[usize],
    enc: &EncoderStates,
) -> Result<ndarray::Array1<f32>, ModelError> {
    if prefix_tokens_with_masks.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let enc_idx = g.leaf(enc.h.clone(), false);
    let logits = single_stream_forward(
        &mut g,
        &bound,
        cfg,
        prefix_tokens_with_masks,
        0,
        enc_idx,
        &enc.pad,
        None,
        None,
    )?;
    let v = g.value(logits);
    Ok(v.row(v.nrows() - 1).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            vocab_size: 12,
            max_positions: 16,
            n_streams: 4,
            rel_buckets: 8,
            rel_max_distance: 8,
            dropout: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn bucket_properties() {
        let cfg = ModelConfig::default();
        assert_eq!(relative_bucket(0, cfg.rel_buckets, cfg.rel_max_distance), 0);
        let plus = relative_bucket(1, cfg.rel_buckets, cfg.rel_max_distance);
        let minus = relative_bucket(-1, cfg.rel_buckets, cfg.rel_max_distance);
        assert_ne!(plus, minus);
        // exact below rel_buckets / 4
        for d in 1..(cfg.rel_buckets / 4) as i64 {
            assert_ne!(
                relative_bucket(d, cfg.rel_buckets, cfg.rel_max_distance),
                relative_bucket(d + 1, cfg.rel_buckets, cfg.rel_max_distance)
            );
        }
        // clamped beyond rel_max_distance
        let at_max = relative_bucket(
            cfg.rel_max_distance as i64,
            cfg.rel_buckets,
            cfg.rel_max_distance,
        );
        for k in 1..5 {
            assert_eq!(
                relative_bucket(
                    (cfg.rel_max_distance + k) as i64,
                    cfg.rel_buckets,
                    cfg.rel_max_distance,
                ),
                at_max
            );
        }
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let cfg = tiny_cfg();
        let params = Parameters::init(&cfg).unwrap();
        let src = vec![6, 7, 8, 9];
        let a = encode_states(&params, &cfg, &src).unwrap();
        let b = encode_states(&params, &cfg, &src).unwrap();
        assert_eq!(a.h.dim(), (4, cfg.d_model));
        assert_eq!(a.h, b.h);
    }

    #[test]
    fn encoder_pad_rows_do_not_affect_content() {
        let cfg = tiny_cfg();
        let params = Parameters::init(&cfg).unwrap();
        let mut g = Graph::new();
        let bound = bind(&mut g, &params, false);
        let h1 = encode(
            &mut g,
            &bound,
            &cfg,
            &[6, 7, 0, 0],
            &[false, false, true, true],
            None,
        )
        .unwrap();
        let h1 = g.value(h1).clone();
        let mut g2 = Graph::new();
        let bound2 = bind(&mut g2, &params, false);
        let h2 = encode(
            &mut g2,
            &bound2,
            &cfg,
            &[6, 7, 1, 5],
            &[false, false, true, true],
            None,
        )
        .unwrap();
        let h2 = g2.value(h2).clone();
        for i in 0..2 {
            for j in 0..cfg.d_model {
                assert_eq!(h1[(i, j)], h2[(i, j)], "non-pad row changed");
            }
        }
    }

    #[test]
    fn encoder_rejects_bad_tokens() {
        let cfg = tiny_cfg();
        let params = Parameters::init(&cfg).unwrap();
        assert!(matches!(
            encode_states(&params, &cfg, &[99]),
            Err(ModelError::BadToken { .. })
        ));
        let long: Vec<usize> = vec![6; cfg.max_positions + 1];
        assert!(matches!(
            encode_states(&params, &cfg, &long),
            Err(ModelError::Overlong { .. })
        ));
    }

    #[test]
    fn oracle_rejects_empty_prefix() {
        let cfg = tiny_cfg();
        let params = Parameters::init(&cfg).unwrap();
        let enc = encode_states(&params, &cfg, &[6, 7]).unwrap();
        assert!(matches!(
            oracle_forward(&params, &cfg, &[], &enc),
            Err(ModelError::EmptyPrefix)
        ));
    }

    #[test]
    fn nstream_stream1_matches_oracle_small() {
        let cfg = tiny_cfg();
        let params = Parameters::init(&cfg).unwrap();
        let enc = encode_states(&params, &cfg, &[6, 7, 8]).unwrap();
        let golden = vec![9, 10, 11];
        let layout = StreamLayout::new(3, 3).unwrap();
        let mut g = Graph::new();
        let bound = bind(&mut g, &params, false);
        let enc_idx = g.leaf(enc.h.clone(), false);
        let logits = nstream_decoder_forward(
            &mut g, &bound, &cfg, &golden, 4, enc_idx, &enc.pad, &layout, None,
        )
        .unwrap();
        let logits = g.value(logits).clone();
        for (s, t) in layout.valid_predicting_cells() {
            let mut prefix: Vec<usize> = golden[..t - s].to_vec();
            prefix.extend(std::iter::repeat(4).take(s));
            let reference = oracle_forward(&params, &cfg, &prefix, &enc).unwrap();
            let row = logits.row(layout.row_index(s, t));
            for (a, b) in row.iter().zip(reference.iter()) {
                let denom = a.abs().max(b.abs()).max(1e-3);
                assert!(
                    (a - b).abs() / denom < 1e-5,
                    "mismatch at (s={s},t={t}): {a} vs {b}"
                );
            }
        }
    }
}
