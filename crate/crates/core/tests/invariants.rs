use std::collections::HashSet;
use std::path::Path;

use proptest::collection::vec;
use proptest::prelude::*;
use tsvr_core::data::{decode_mtxb, encode_mtxb};
use tsvr_core::inference::{knn_affinity, propagate};
use tsvr_core::layers::DsbnLayer;
use tsvr_core::numerics::{bilinear_equivalence, sigmoid_scalar, softmax_rows};
use tsvr_core::training::EpochSampler;
use tsvr_core::{mca, predict_argmax, DomainTag, Matrix};

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Matrix> {
    vec(-range..range, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize, range: f64) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| matrix(r, c, range))
}

proptest! {
    #[test]
    fn bilinear_matches_tensor_form(
        (x, a, w) in (1usize..=8, 1usize..=8).prop_flat_map(|(d, r)| {
            (vec(-5.0..5.0f64, d), vec(-5.0..5.0f64, r), matrix(d, r, 5.0))
        })
    ) {
        let (lhs, rhs) = bilinear_equivalence(&x, &a, &w).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn softmax_rows_are_distributions(m in sized_matrix(6, 7, 50.0), shift in -100.0..100.0f64) {
        let p = softmax_rows(&m).unwrap();
        let shifted = softmax_rows(&m.map(|v| v + shift)).unwrap();
        for r in 0..p.rows() {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (u, v) in row.iter().zip(shifted.row(r)) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(m, k, l, n)| (matrix(m, k, 3.0), matrix(k, l, 3.0), matrix(l, n, 3.0)))
    ) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = 1.0 + left.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn mtxb_round_trip_is_bit_exact(
        (rows, cols, bits) in (0usize..6, 0usize..6)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), vec(any::<u64>(), r * c)))
    ) {
        let m = Matrix::from_vec(rows, cols, bits.iter().map(|&b| f64::from_bits(b)).collect()).unwrap();
        let back = decode_mtxb(&encode_mtxb(&m).unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.shape(), (rows, cols));
        let got: Vec<u64> = back.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);
    }

    /// Repeating every image of one class leaves MCA unchanged.
    #[test]
    fn mca_ignores_class_sizes(
        pairs in vec((0usize..4, 0usize..4), 1..40),
        class in 0usize..4,
        copies in 1usize..5,
    ) {
        let mut truth: Vec<usize> = (0..4).collect();
        let mut pred: Vec<usize> = (0..4).collect();
        for &(t, p) in &pairs {
            truth.push(t);
            pred.push(p);
        }
        let base = mca(&pred, &truth, 4).unwrap().mca;
        let (mut t2, mut p2) = (truth.clone(), pred.clone());
        for (&t, &p) in truth.iter().zip(&pred) {
            if t == class {
                for _ in 0..copies {
                    t2.push(t);
                    p2.push(p);
                }
            }
        }
        prop_assert!((mca(&p2, &t2, 4).unwrap().mca - base).abs() < 1e-12);
    }

    #[test]
    fn argmax_of_scores_equals_argmax_of_logits(logits in sized_matrix(8, 6, 15.0)) {
        let scores = logits.map(sigmoid_scalar);
        prop_assert_eq!(predict_argmax(&scores), predict_argmax(&logits));
    }

    #[test]
    fn propagation_without_smoothing_is_identity(
        (features, y0) in (3usize..12, 2usize..5)
            .prop_flat_map(|(n, k)| (matrix(n, 4, 2.0), matrix(n, k, 1.0))),
        neighbours in 1usize..4,
        iters in 0usize..6,
    ) {
        let s = knn_affinity(&features, neighbours).unwrap().normalized();
        let f = propagate(&s, &y0, 0.0, iters).unwrap();
        prop_assert_eq!(f, y0);
    }

    /// Within an epoch batches never repeat an index; an epoch yields
    /// `len / batch` batches and then reshuffles.
    #[test]
    fn sampler_epochs_are_permutation_prefixes(len in 1usize..60, batch in 1usize..20, seed in any::<u64>()) {
        prop_assume!(batch <= len);
        let mut s = EpochSampler::new(len, seed, 7);
        let per_epoch = len / batch;
        for epoch in 0..3u64 {
            let mut seen = HashSet::new();
            for _ in 0..per_epoch {
                let b = s.next_batch(batch).unwrap();
                prop_assert_eq!(s.state().0, epoch);
                prop_assert!(b.iter().all(|&i| i < len && seen.insert(i)));
            }
        }
    }

    #[test]
    fn running_mean_contracts_towards_batch_mean(
        batch in matrix(5, 3, 4.0),
        momentum in 0.0..0.99f64,
        n in 1usize..40,
    ) {
        let mut layer = DsbnLayer::new(3, momentum, 1e-5).unwrap();
        for _ in 0..n {
            layer.forward_train(&batch, DomainTag::Target).unwrap();
        }
        for c in 0..3 {
            let mu = (0..5).map(|r| batch.get(r, c)).sum::<f64>() / 5.0;
            let got = layer.running(DomainTag::Target).mean.get(0, c);
            prop_assert!((got - mu).abs() <= momentum.powi(n as i32) * mu.abs() + 1e-12);
        }
        prop_assert!(!layer.running(DomainTag::Source).seen);
    }
}
