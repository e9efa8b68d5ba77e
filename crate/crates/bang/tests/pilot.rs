//! Scratch pilot for tuning training budgets; run explicitly with
//! --ignored. Not part of the regular suite.

use bang::data::{synth_task, TaskKind};
use bang::decoding::{ar_greedy, nar_decode};
use bang::model::{encode_states, ModelConfig, Parameters};
use bang::objectives::{AdamState, TrainHyper, TrainMode};
use bang::train::run_steps;
use bang::bench::{ablation_run, AblationConfig};

#[test]
#[ignore]
fn pilot_copy_lr() {
    for lr in [3e-4f32, 1e-3] {
        let mut cfg = ModelConfig::default();
        cfg.seed = 7;
        cfg.vocab_size = 6 + 32;
        cfg.n_streams = 13;
        let ds = synth_task(TaskKind::Copy, 32, (4, 12), 5000, 7, cfg.max_positions).unwrap();
        let mut params = Parameters::init(&cfg).unwrap();
        let mut adam = AdamState::new(&params);
        let hyper = TrainHyper {
            lr,
            warmup_steps: 100,
            smoothing: 0.1,
            clip_norm: 1.0,
        };
        for chunk in 0..6 {
            run_steps(
                &mut params, &mut adam, &cfg, &hyper, ds.train(), TrainMode::Bang, 8, 500, 7,
                |step, bd, _| {
                    if step % 250 == 0 {
                        eprintln!("lr {lr} step {step} loss {:.3}", bd.per_token());
                    }
                },
            )
            .unwrap();
            let test: Vec<_> = ds.test().iter().take(60).collect();
            let mut ar_hits = 0;
            let mut nar_hits = 0;
            for p in &test {
                let enc = encode_states(&params, &cfg, &p.src).unwrap();
                if ar_greedy(&enc, &params, &cfg, 16).unwrap().tokens == p.tgt {
                    ar_hits += 1;
                }
                if nar_decode(&enc, &params, &cfg, 16).unwrap().tokens == p.tgt {
                    nar_hits += 1;
                }
            }
            eprintln!(
                "lr {lr} after {} steps: ar {}/60 nar {}/60",
                (chunk + 1) * 500,
                ar_hits,
                nar_hits
            );
        }
    }
}

#[test]
#[ignore]
fn pilot_ablation() {
    for (p, f, lr) in [(1000usize, 150usize, 1e-3f32)] {
        let cfg = AblationConfig {
            task: TaskKind::Sort,
            seeds: vec![0, 1, 2],
            pretrain_steps: p,
            finetune_steps: f,
            batch_size: 8,
            payload_vocab: 32,
            len_range: (4, 12),
            n_pairs: 2000,
            model: ModelConfig::default(),
            hyper: TrainHyper { lr, warmup_steps: 100, smoothing: 0.1, clip_norm: 1.0 },
        };
        let t = std::time::Instant::now();
        let table = ablation_run(&cfg).unwrap();
        for row in &table.rows {
            eprintln!(
                "p{p} f{f} lr{lr} {} seed{}: BLEU-4 {:.2} EM {:.2} ROUGE-L {:.2}",
                row.arm, row.seed, row.metrics["BLEU-4"], row.metrics["ExactMatch"], row.metrics["ROUGE-L"]
            );
        }
        eprintln!("elapsed {:.1}s", t.elapsed().as_secs_f64());
    }
}

#[test]
#[ignore]
fn pilot_curriculum() {
    use bang::autodiff::Graph;
    use bang::data::{EOS, MASK};
    use bang::masking::StreamLayout;
    use bang::model::{bind, encode, nstream_decoder_forward};
    use bang::objectives::bang_loss;

    let mut cfg = ModelConfig::default();
    cfg.seed = 11;
    cfg.vocab_size = 6 + 32;
    let ds = synth_task(TaskKind::Sort, 32, (4, 12), 2000, 11, cfg.max_positions).unwrap();
    let mut params = Parameters::init(&cfg).unwrap();
    let mut adam = AdamState::new(&params);
    let hyper = TrainHyper { lr: 1e-3, warmup_steps: 100, smoothing: 0.1, clip_norm: 1.0 };
    let mut done = 0usize;
    for stop in [150usize, 300, 600, 1200] {
        run_steps(
            &mut params, &mut adam, &cfg, &hyper, ds.train(), TrainMode::Bang, 8,
            stop - done, 11, |_, _, _| {},
        )
        .unwrap();
        done = stop;
        let mut sums: Vec<(f64, usize)> = vec![(0.0, 0); cfg.n_streams + 1];
        for p in ds.dev().iter().take(100) {
            let mut tgt = p.tgt.clone();
            tgt.push(EOS);
            let mut g = Graph::new();
            let bound = bind(&mut g, &params, false);
            let pad = vec![false; p.src.len()];
            let enc = encode(&mut g, &bound, &cfg, &p.src, &pad, None).unwrap();
            let layout = StreamLayout::new(tgt.len(), cfg.n_streams.min(tgt.len())).unwrap();
            let logits =
                nstream_decoder_forward(&mut g, &bound, &cfg, &tgt, MASK, enc, &pad, &layout, None)
                    .unwrap();
            let (bd, _) = bang_loss(&mut g, logits, &tgt, &layout, 0.1).unwrap();
            for &(s, t, loss) in &bd.per_cell {
                if t >= cfg.n_streams {
                    sums[s].0 += loss as f64;
                    sums[s].1 += 1;
                }
            }
        }
        let means: Vec<f64> = sums
            .iter()
            .skip(1)
            .filter(|(_, c)| *c > 0)
            .map(|(l, c)| l / *c as f64)
            .collect();
        let n = means.len() as f64;
        let mut order: Vec<usize> = (0..means.len()).collect();
        order.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap());
        let mut rank = vec![0.0f64; means.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r as f64;
        }
        let d2: f64 =
            rank.iter().enumerate().map(|(i, &r)| (i as f64 - r) * (i as f64 - r)).sum();
        let rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        eprintln!("sort {stop} steps: rho {rho:.3} means {means:?}");
    }
}
