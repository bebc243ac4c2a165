mod common;

use ndarray::{Array2, Axis};
use proptest::prelude::*;

use common::cross;
use sonalign::embedding::{
    l2_normalize, normalize_rows, pairwise_similarity, row_softmax, EmbeddingBatch, EmbeddingVector, Modality,
    SimilarityKind, SimilarityMatrix,
};
use sonalign::encoders::{featurize_text, TextItem};
use sonalign::loss::{clap_loss, soft_label_loss, soft_targets, SoftLabelConfig, SoftTargets};
use sonalign::trainer::subset_indices;

fn square(max_n: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_n).prop_flat_map(|n| {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
    })
}

fn rows(max_n: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_n).prop_flat_map(move |n| {
        prop::collection::vec(-3.0f64..3.0, n * d)
            .prop_filter("non-degenerate rows", move |v| v.chunks(d).all(|r| r.iter().any(|x| x.abs() > 1e-3)))
            .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let u = l2_normalize(&EmbeddingVector::new(v).unwrap()).unwrap();
        let norm = u.values().dot(&u.values()).sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        prop_assert!(u.is_normalized());
    }

    #[test]
    fn similarities_of_unit_rows_are_cosines(x in rows(6, 5), y in rows(6, 5)) {
        let xs = EmbeddingBatch::new(x, Modality::Text).unwrap().normalized().unwrap();
        let ys = EmbeddingBatch::new(y, Modality::Audio).unwrap().normalized().unwrap();
        let c = pairwise_similarity(&xs, &ys).unwrap();
        prop_assert_eq!(c.kind(), SimilarityKind::CrossModal);
        prop_assert!(c.entries().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let self_sim = pairwise_similarity(&xs, &xs).unwrap();
        prop_assert_eq!(self_sim.kind(), SimilarityKind::IntraModal);
        for i in 0..xs.len() {
            prop_assert!((self_sim.entries()[[i, i]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(m in square(8), temp in 0.01f64..5.0) {
        let p = row_softmax(&m.view(), temp).unwrap();
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn clap_loss_is_nonnegative_and_bounded(m in square(8), tau in 0.05f64..3.0) {
        let n = m.nrows() as f64;
        let v = clap_loss(&cross(m), tau).unwrap().value;
        prop_assert!(v >= -1e-12);
        // |C| <= 1 bounds each log-probability below by -(2 / tau + ln n)
        prop_assert!(v <= 2.0 / tau + n.ln() + 1e-9);
    }

    #[test]
    fn clap_loss_is_invariant_to_joint_permutation(m in square(7), tau in 0.1f64..2.0, seed in any::<u64>()) {
        let n = m.nrows();
        let mut shuffled: Vec<usize> = (0..n).collect();
        shuffled.rotate_left(seed as usize % n.max(1));
        let p = m.select(Axis(0), &shuffled).select(Axis(1), &shuffled);
        let a = clap_loss(&cross(m), tau).unwrap().value;
        let b = clap_loss(&cross(p), tau).unwrap().value;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn clap_gradient_sums_to_zero(m in square(8), tau in 0.1f64..2.0) {
        let g = clap_loss(&cross(m), tau).unwrap().grad_c;
        let total: f64 = g.sum();
        prop_assert!(total.abs() < 1e-10);
    }

    #[test]
    fn soft_targets_are_row_stochastic(ct in square(6), beta in 0.0f64..=1.0, s in 0.1f64..3.0) {
        let n = ct.nrows();
        let ca = ct.t().to_owned();
        let ct = SimilarityMatrix::new(ct, SimilarityKind::IntraModal).unwrap();
        let ca = SimilarityMatrix::new(ca, SimilarityKind::IntraModal).unwrap();
        let t = soft_targets(&ct, &ca, &SoftLabelConfig::new(beta, s).unwrap()).unwrap();
        for m in [&t.a2t, &t.t2a] {
            for (i, row) in m.rows().into_iter().enumerate() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                prop_assert!(row[i] >= 1.0 - beta - 1e-12);
            }
        }
        prop_assert_eq!(t.len(), n);
    }

    #[test]
    fn zero_beta_soft_loss_is_the_hard_loss(m in square(8), tau in 0.05f64..3.0, ct in square(8)) {
        let n = m.nrows();
        prop_assume!(ct.nrows() == n);
        let sim = SimilarityMatrix::new(ct, SimilarityKind::IntraModal).unwrap();
        let t = soft_targets(&sim, &sim, &SoftLabelConfig::new(0.0, 1.0).unwrap()).unwrap();
        prop_assert_eq!(&t, &SoftTargets::hard(n));
        let a = clap_loss(&cross(m.clone()), tau).unwrap();
        let b = soft_label_loss(&cross(m), tau, &t).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-10);
        prop_assert!((&a.grad_c - &b.grad_c).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn text_features_ignore_token_order(tokens in prop::collection::vec("[a-z]{1,6}", 1..8), seed in any::<u64>()) {
        let mut rev = tokens.clone();
        rev.reverse();
        let a = featurize_text(&TextItem { id: "a".into(), tokens }, 64, seed).unwrap();
        let b = featurize_text(&TextItem { id: "b".into(), tokens: rev }, 64, seed).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-12);
    }

    #[test]
    fn subset_size_and_order(n in 1usize..500, frac in 0.01f64..=1.0, seed in any::<u64>()) {
        let idx = subset_indices(n, frac, seed);
        let expected = ((frac * n as f64).round() as usize).clamp(1, n);
        prop_assert_eq!(idx.len(), if frac >= 1.0 { n } else { expected });
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        prop_assert_eq!(idx, subset_indices(n, frac, seed));
    }

    #[test]
    fn normalize_rows_is_idempotent(x in rows(6, 4)) {
        let once = normalize_rows(&x.view()).unwrap();
        let twice = normalize_rows(&once.view()).unwrap();
        prop_assert!((&once - &twice).iter().all(|d| d.abs() < 1e-12));
    }
}
