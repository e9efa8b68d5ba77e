//! Metric implementations checked against straight-line reference
//! computations written independently of the library code.

use bang::bench::{bleu, distinct_n, exact_match, rouge_l};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU, written from the definition: clipped n-gram precision
/// with add-one smoothing for n >= 2, geometric mean, brevity penalty.
fn ref_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize) -> f64 {
    let mut log_sum = 0.0f64;
    for n in 1..=max_n {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (h, r) in hyps.iter().zip(refs) {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, c) in &hc {
                clipped += (*c).min(*rc.get(gram).unwrap_or(&0));
            }
            total += h.len().saturating_sub(n - 1);
        }
        let p = if n >= 2 {
            (clipped + 1) as f64 / (total + 1) as f64
        } else if total == 0 || clipped == 0 {
            return 0.0;
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln() / max_n as f64;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    bp * log_sum.exp() * 100.0
}

fn lcs(a: &[usize], b: &[usize]) -> usize {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp[a.len()][b.len()]
}

fn ref_rouge_l(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let beta2 = 1.44f64;
    let mut sum = 0.0f64;
    for (h, r) in hyps.iter().zip(refs) {
        let l = lcs(h, r) as f64;
        if l == 0.0 || h.is_empty() || r.is_empty() {
            continue;
        }
        let p = l / h.len() as f64;
        let rec = l / r.len() as f64;
        sum += (1.0 + beta2) * p * rec / (rec + beta2 * p);
    }
    sum / hyps.len() as f64 * 100.0
}

fn ref_distinct(hyps: &[Vec<usize>], n: usize) -> f64 {
    let mut seen = std::collections::HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        if h.len() >= n {
            for w in h.windows(n) {
                seen.insert(w.to_vec());
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64 * 100.0
    }
}

#[test]
fn metrics_agree_with_reference_on_random_corpora() {
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    for case in 0..100 {
        let n_pairs = rng.gen_range(1..=6usize);
        let vocab = rng.gen_range(2..=8usize);
        let mk = |rng: &mut ChaCha20Rng| -> Vec<Vec<usize>> {
            (0..n_pairs)
                .map(|_| {
                    (0..rng.gen_range(1..=8usize))
                        .map(|_| rng.gen_range(0..vocab))
                        .collect()
                })
                .collect()
        };
        let hyps = mk(&mut rng);
        let refs = mk(&mut rng);
        for max_n in 1..=4usize {
            let got = bleu(&hyps, &refs, max_n).unwrap();
            let want = ref_bleu(&hyps, &refs, max_n);
            assert!(
                (got - want).abs() <= 1e-9,
                "case {case} BLEU-{max_n}: {got} vs {want}\nh={hyps:?}\nr={refs:?}"
            );
        }
        let got = rouge_l(&hyps, &refs).unwrap();
        let want = ref_rouge_l(&hyps, &refs);
        assert!(
            (got - want).abs() <= 1e-9,
            "case {case} ROUGE-L: {got} vs {want}"
        );
        for n in 1..=2usize {
            let got = distinct_n(&hyps, n).unwrap();
            let want = ref_distinct(&hyps, n);
            assert!(
                (got - want).abs() <= 1e-9,
                "case {case} Distinct-{n}: {got} vs {want}"
            );
        }
        let em = exact_match(&hyps, &refs).unwrap();
        let want = hyps
            .iter()
            .zip(&refs)
            .filter(|(h, r)| h == r)
            .count() as f64
            / n_pairs as f64
            * 100.0;
        assert!((em - want).abs() <= 1e-9, "case {case} ExactMatch");
    }
}
