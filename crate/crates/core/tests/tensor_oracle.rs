mod common;

use common::*;
use delta_attn::{dense_attention, matmul, row_softmax, CausalMask, DenseMatrix};
use proptest::prelude::*;

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(11);
    let a = gaussian(&mut r, 5, 7);
    let b = gaussian(&mut r, 7, 3);
    let got = matmul(&a, &b).unwrap();
    let want = naive_matmul(&to_f64(&a), &to_f64(&b));
    assert!(max_abs_diff64(&got, &want) < 1e-5);
}

#[test]
fn softmax_against_extended_precision() {
    let s = DenseMatrix::from_rows(&[[1.0f32, 2.0, 3.0]]).unwrap();
    let p = row_softmax(&s, None).unwrap();
    let want = softmax64(&[1.0, 2.0, 3.0]);
    for (a, b) in p.row(0).iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-7, "{a} vs {b}");
    }
}

#[test]
fn causal_attention_against_extended_precision() {
    let mut r = rng(5);
    let (q, k, v) = (
        gaussian(&mut r, 6, 4),
        gaussian(&mut r, 6, 4),
        gaussian(&mut r, 6, 4),
    );
    let got = dense_attention(&q, &k, &v, true).unwrap();
    let want = attention64(&q, &k, &v, true);
    assert!(max_abs_diff64(&got, &want) < 1e-5);
}

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f32..10.0, r * c)
            .prop_map(move |d| DenseMatrix::new(r, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn identity_is_bit_exact(a in matrix(8, 8)) {
        let left = matmul(&DenseMatrix::identity(a.rows()), &a).unwrap();
        let right = matmul(&a, &DenseMatrix::identity(a.cols())).unwrap();
        for ((x, y), z) in a.data().iter().zip(left.data()).zip(right.data()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
            prop_assert_eq!(x.to_bits(), z.to_bits());
        }
    }

    #[test]
    fn softmax_rows_are_distributions(a in matrix(8, 8), causal in any::<bool>()) {
        let n = a.rows().min(a.cols());
        let sq = DenseMatrix::new(n, n, (0..n * n).map(|e| a.data()[e]).collect()).unwrap();
        let p = row_softmax(&sq, causal.then(|| CausalMask::new(n))).unwrap();
        for i in 0..n {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            if causal {
                prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn causal_row_zero_is_first_value(seed in any::<u64>(), n in 1usize..12, d in 1usize..9) {
        let mut r = rng(seed);
        let (q, k, v) = (gaussian(&mut r, n, d), gaussian(&mut r, n, d), gaussian(&mut r, n, d));
        let out = dense_attention(&q, &k, &v, true).unwrap();
        prop_assert_eq!(out.row(0), v.row(0));
    }
}
