use std::collections::BTreeMap;

use proptest::collection::vec;
use proptest::prelude::*;
use vilora::autodiff::Tape;
use vilora::data::{make_corpus, parse_speakers, CorpusSpec, Split};
use vilora::elbo::{aggregate_finite_kl, kl_diag_gaussian, KlAggregate};
use vilora::metrics::{edit_distance, score};
use vilora::model::{collapse, decode_greedy};
use vilora::par::Parallelism;
use vilora::prior::layer_std;
use vilora::vocab::Vocab;
use vilora::Matrix;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

/// Plain exponential recursion, for short inputs only.
fn naive_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive_distance(ra, rb) + usize::from(x != y);
            let del = naive_distance(ra, b) + 1;
            let ins = naive_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn short_seq() -> impl Strategy<Value = Vec<u8>> {
    vec(0u8..4, 0..7)
}

proptest! {
    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5)
            .prop_flat_map(|(m, n, p, q)| (matrix(m, n), matrix(n, p), matrix(p, q)))
    ) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(close(&left, &right, 1e-12));
    }

    #[test]
    fn transpose_reverses_products((a, b) in (1usize..5, 1usize..5, 1usize..5)
        .prop_flat_map(|(m, n, p)| (matrix(m, n), matrix(n, p))))
    {
        let lhs = a.matmul(&b).unwrap().transpose();
        let rhs = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-14));
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_itself(
        mu in vec(-3.0f64..3.0, 1..8),
        log_sigma in vec(-3.0f64..1.0, 8),
        mu_p in -1.0f64..1.0,
        sigma_p in 0.05f64..3.0,
    ) {
        let n = mu.len();
        let m = Matrix::from_vec(1, n, mu.clone()).unwrap();
        let s = Matrix::from_vec(1, n, log_sigma[..n].iter().map(|x| x.exp()).collect()).unwrap();
        let kl = kl_diag_gaussian(&m, &s, mu_p, sigma_p).unwrap();
        prop_assert!(kl >= -1e-12, "kl {kl}");
        let same = kl_diag_gaussian(&Matrix::filled(1, n, mu_p), &Matrix::filled(1, n, sigma_p), mu_p, sigma_p).unwrap();
        prop_assert!(same.abs() < 1e-12);
    }

    #[test]
    fn kl_grows_with_mean_offset(d1 in 0.0f64..3.0, extra in 0.01f64..3.0, sigma_q in 0.05f64..2.0, sigma_p in 0.05f64..2.0) {
        let kl = |d: f64| kl_diag_gaussian(&Matrix::scalar(d), &Matrix::scalar(sigma_q), 0.0, sigma_p).unwrap();
        prop_assert!(kl(d1 + extra) > kl(d1));
    }

    #[test]
    fn finite_kl_mean_ignores_non_finite(
        values in vec(prop_oneof![4 => 0.0f64..100.0, 1 => Just(f64::INFINITY), 1 => Just(f64::NAN)], 1..10)
    ) {
        let map: BTreeMap<String, f64> = values.iter().enumerate().map(|(i, v)| (format!("l{i}"), *v)).collect();
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let r = aggregate_finite_kl(&map, KlAggregate::Mean).unwrap();
        prop_assert_eq!(r.all_non_finite, finite.is_empty());
        prop_assert!(r.value.is_finite());
        if !finite.is_empty() {
            let mean = finite.iter().sum::<f64>() / finite.len() as f64;
            prop_assert!((r.value - mean).abs() <= 1e-12 * mean.max(1.0));
        }
        for (k, v) in &map {
            prop_assert_eq!(r.mask[k], v.is_finite());
        }
    }

    #[test]
    fn edit_distance_matches_recursion(a in short_seq(), b in short_seq()) {
        let e = edit_distance(&a, &b);
        prop_assert_eq!(e.distance, naive_distance(&a, &b));
        prop_assert_eq!(e.substitutions + e.insertions + e.deletions, e.distance);
        prop_assert_eq!(e.insertions + a.len(), e.deletions + b.len());
    }

    #[test]
    fn edit_distance_is_a_metric(a in short_seq(), b in short_seq(), c in short_seq()) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y).distance;
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn pooled_scores_ignore_order(
        pairs in vec((vec(1usize..6, 1..6), vec(1usize..6, 0..6)), 1..8),
        seed in any::<u64>(),
    ) {
        let vocab = Vocab::synthetic(6);
        let (refs, hyps): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        vilora::rng::RngStream::new(seed, 0).shuffle(&mut idx);
        let r2: Vec<_> = idx.iter().map(|&i| refs[i].clone()).collect();
        let h2: Vec<_> = idx.iter().map(|&i| hyps[i].clone()).collect();
        let a = score(&refs, &hyps, &vocab).unwrap();
        let b = score(&r2, &h2, &vocab).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn layer_std_is_shift_and_order_invariant(
        w in vec(-1.0f64..1.0, 2..40),
        shift in -5.0f64..5.0,
        scale in 0.1f64..10.0,
        seed in any::<u64>(),
    ) {
        let n = w.len();
        let base = layer_std("l", &Matrix::from_vec(1, n, w.clone()).unwrap()).unwrap().sigma_hat;
        let shifted = layer_std("l", &Matrix::from_vec(1, n, w.iter().map(|x| x + shift).collect()).unwrap()).unwrap().sigma_hat;
        let scaled = layer_std("l", &Matrix::from_vec(1, n, w.iter().map(|x| x * scale).collect()).unwrap()).unwrap().sigma_hat;
        let mut p = w.clone();
        vilora::rng::RngStream::new(seed, 0).shuffle(&mut p);
        let permuted = layer_std("l", &Matrix::from_vec(n, 1, p).unwrap()).unwrap().sigma_hat;
        prop_assert!((shifted - base).abs() <= 1e-9 * (1.0 + base));
        prop_assert!((scaled - scale * base).abs() <= 1e-12 * (1.0 + scale * base));
        prop_assert!((permuted - base).abs() <= 1e-12 * (1.0 + base));
    }

    #[test]
    fn cross_entropy_is_non_negative(logits in vec(-30.0f64..30.0, 2..8), pick in any::<prop::sample::Index>()) {
        let n = logits.len();
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, n, logits).unwrap());
        let ce = tape.softmax_cross_entropy(x, pick.index(n)).unwrap();
        prop_assert!(tape.scalar(ce) >= 0.0);
    }

    #[test]
    fn backward_is_repeatable((a, b) in (1usize..4, 1usize..4, 1usize..4)
        .prop_flat_map(|(m, n, p)| (matrix(m, n), matrix(n, p))))
    {
        let mut tape = Tape::new();
        let va = tape.leaf(a);
        let vb = tape.leaf(b);
        let prod = tape.matmul(va, vb).unwrap();
        let act = tape.tanh(prod);
        let loss = tape.sum(act);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        prop_assert_eq!(g1.get(va), g2.get(va));
        prop_assert_eq!(g1.get(vb), g2.get(vb));
    }

    #[test]
    fn collapse_output_has_no_blanks_or_runs(labels in vec(0usize..4, 0..30)) {
        let c = collapse(&labels);
        prop_assert!(c.iter().all(|&t| t != 0));
        // Decoding a one-hot score matrix agrees with collapsing its labels.
        let scores = Matrix::from_fn(labels.len(), 4, |r, c| if labels[r] == c { 1.0 } else { 0.0 });
        prop_assert_eq!(decode_greedy(&scores), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn generated_corpora_are_consistent(seed in any::<u64>()) {
        let spec = CorpusSpec {
            pretrain: 20,
            norm_test: 5,
            adapt_train: 16,
            nonnorm_test: 5,
            speakers: parse_speakers("very-low,medium").unwrap(),
            ..CorpusSpec::default()
        };
        let corpus = make_corpus(&spec, seed, Parallelism::Sequential).unwrap();
        for u in &corpus.utterances {
            prop_assert_eq!(collapse(&u.frame_labels), u.reference.clone());
            prop_assert_eq!(u.features.rows(), u.frame_labels.len());
        }
        for speaker in ["very-low", "medium"] {
            let mut prev: Vec<String> = Vec::new();
            for f in [0.25, 0.5, 0.75, 1.0] {
                let ids: Vec<String> = corpus.adapt_subset(speaker, f).unwrap().iter().map(|u| u.id.clone()).collect();
                prop_assert!(ids.starts_with(&prev), "fraction {} does not extend the previous one", f);
                prev = ids;
            }
            prop_assert_eq!(prev.len(), 16);
            let test: Vec<&str> = corpus.split(Split::NonnormTest, Some(speaker)).iter().map(|u| u.id.as_str()).collect();
            prop_assert!(prev.iter().all(|id| !test.contains(&id.as_str())));
        }
    }
}
