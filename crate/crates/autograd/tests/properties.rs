use proptest::prelude::*;

use phdiff_autograd::{Graph, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..6, 1usize..6, 1usize..6)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in (1usize..5, 1usize..7).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let s = g.softmax_rows(v);
        let out = g.value(s);
        let cols = x.shape()[1];
        for row in out.data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_naive_product(
        (a, b) in dims().prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))
    ) {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut g = Graph::inference();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb);
        let got = g.value(c).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
                prop_assert!((got[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_matmul_matches_naive((a, b) in dims().prop_flat_map(|(m, k, n)| (matrix(k, m), matrix(n, k)))) {
        let (k, m, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        let mut g = Graph::inference();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul_t(va, true, vb, true);
        let got = g.value(c).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.data()[p * m + i] * b.data()[j * k + p]).sum();
                prop_assert!((got[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_sum_is_ones(x in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::new();
        let v = g.leaf(std::sync::Arc::new(x.clone()), true);
        let s = g.sum(v);
        g.backward(s);
        let grad = g.grad(v).unwrap();
        prop_assert!(grad.data().iter().all(|&d| d == 1.0));
    }
}
