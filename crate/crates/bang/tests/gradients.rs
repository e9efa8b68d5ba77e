//! Finite-difference certification of the training gradient: every
//! parameter tensor of a small model, checked against central
//! differences of the full loss on random batches.

use bang::autodiff::Graph;
use bang::data::{EOS, MASK};
use bang::masking::StreamLayout;
use bang::model::{bind, encode, nstream_decoder_forward, ModelConfig, Parameters};
use bang::objectives::bang_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: 24,
        max_positions: 32,
        n_streams: 4,
        rel_buckets: 8,
        rel_max_distance: 16,
        dropout: 0.0,
        seed: 3,
    }
}

fn batch_loss(params: &Parameters, cfg: &ModelConfig, batch: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let mut total = 0.0f64;
    for (src, tgt) in batch {
        let mut g = Graph::new();
        let bound = bind(&mut g, params, true);
        let pad = vec![false; src.len()];
        let enc = encode(&mut g, &bound, cfg, src, &pad, None).unwrap();
        let n = cfg.n_streams.min(tgt.len());
        let layout = StreamLayout::new(tgt.len(), n).unwrap();
        let logits =
            nstream_decoder_forward(&mut g, &bound, cfg, tgt, MASK, enc, &pad, &layout, None)
                .unwrap();
        let (bd, _) = bang_loss(&mut g, logits, tgt, &layout, 0.1).unwrap();
        // per-sample mean keeps the value small, which keeps f32
        // round-off out of the finite differences
        total += bd.total as f64 / layout.valid_predicting_count() as f64;
    }
    total
}

fn batch_grads(
    params: &Parameters,
    cfg: &ModelConfig,
    batch: &[(Vec<usize>, Vec<usize>)],
) -> indexmap::IndexMap<String, ndarray::Array2<f32>> {
    let mut acc: indexmap::IndexMap<String, ndarray::Array2<f32>> = params
        .tensors
        .iter()
        .map(|(k, v)| (k.clone(), ndarray::Array2::zeros(v.dim())))
        .collect();
    for (src, tgt) in batch {
        let mut g = Graph::new();
        let bound = bind(&mut g, params, true);
        let pad = vec![false; src.len()];
        let enc = encode(&mut g, &bound, cfg, src, &pad, None).unwrap();
        let n = cfg.n_streams.min(tgt.len());
        let layout = StreamLayout::new(tgt.len(), n).unwrap();
        let logits =
            nstream_decoder_forward(&mut g, &bound, cfg, tgt, MASK, enc, &pad, &layout, None)
                .unwrap();
        let (_, mean_idx) = bang_loss(&mut g, logits, tgt, &layout, 0.1).unwrap();
        g.backward(mean_idx);
        for (name, slot) in acc.iter_mut() {
            if let Some(grad) = g.grad(bound.idx(name)) {
                *slot += grad;
            }
        }
    }
    acc
}

#[test]
fn every_tensor_matches_finite_differences() {
    let cfg = small_config();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for batch_idx in 0..5 {
        let mut params = Parameters::init(&cfg).unwrap();
        let batch: Vec<(Vec<usize>, Vec<usize>)> = (0..2)
            .map(|_| {
                let src: Vec<usize> =
                    (0..rng.gen_range(2..=5usize)).map(|_| rng.gen_range(6..24)).collect();
                let mut tgt: Vec<usize> =
                    (0..rng.gen_range(1..=4usize)).map(|_| rng.gen_range(6..24)).collect();
                tgt.push(EOS);
                (src, tgt)
            })
            .collect();
        let grads = batch_grads(&params, &cfg, &batch);
        let names: Vec<String> = params.tensors.keys().cloned().collect();
        let h = 1e-2f32;
        for name in names {
            let dim = params.tensors[&name].dim();
            // two random coordinates per tensor
            for _ in 0..2 {
                let i = rng.gen_range(0..dim.0);
                let j = rng.gen_range(0..dim.1);
                let orig = params.tensors[&name][[i, j]];
                params.tensors.get_mut(&name).unwrap()[[i, j]] = orig + h;
                let lp = batch_loss(&params, &cfg, &batch);
                params.tensors.get_mut(&name).unwrap()[[i, j]] = orig - h;
                let lm = batch_loss(&params, &cfg, &batch);
                params.tensors.get_mut(&name).unwrap()[[i, j]] = orig;
                let fd = ((lp - lm) / (2.0 * h as f64)) as f32;
                let g = grads[&name][[i, j]];
                let err = (g - fd).abs();
                let tol = 1e-4f32 + 1e-2 * g.abs().max(fd.abs());
                assert!(
                    err <= tol,
                    "batch {batch_idx} tensor {name}[{i},{j}]: grad {g} vs fd {fd} (err {err})"
                );
            }
        }
    }
}
