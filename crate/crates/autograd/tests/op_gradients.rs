//! Every tape op against central finite differences in f64.

use std::sync::Arc;

use phdiff_autograd::check::{max_rel_err, numeric_grad};
use phdiff_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Contract the op output with fixed random weights, then compare the
/// gradient of every input against finite differences.
fn check(inputs: Vec<Tensor<f64>>, build: &Build, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |ins: &[Tensor<f64>], want_grad: bool, rng_w: &Option<Tensor<f64>>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(Arc::new(t.clone()), want_grad)).collect();
        let out = build(&mut g, &vars);
        let w = rng_w.clone().unwrap();
        let wv = g.constant(w);
        let prod = g.mul(out, wv);
        let loss = g.sum(prod);
        (g, vars, loss)
    };
    // Output shape for the weights.
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.shape(out).to_vec()
    };
    let weights = Some(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let (mut g, vars, loss) = eval(&inputs, true, &weights);
    g.backward(loss);
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let numeric = numeric_grad(
            |probe| {
                let mut ins = inputs.clone();
                ins[k] = probe.clone();
                let (g, _, loss) = eval(&ins, false, &weights);
                g.item(loss)
            },
            &inputs[k],
            1e-6,
        );
        let err = max_rel_err(&analytic, &numeric, 1e-3);
        assert!(err < tol, "input {k}: rel err {err}\nanalytic {analytic:?}\nnumeric {numeric:?}");
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_binary() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    check(vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]), 1e-7);
    check(vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]), 1e-7);
    check(vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]), 1e-7);
    check(vec![a.clone()], &|g, v| g.scale(v[0], -2.5), 1e-7);
    check(vec![a], &|g, v| g.shift(v[0], 0.3), 1e-7);
}

#[test]
fn unary_ops() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let pos = rand_tensor(&mut r, &[3, 4], 0.2, 2.0);
    check(vec![a.clone()], &|g, v| g.silu(v[0]), 1e-6);
    // Keep relu inputs away from the kink.
    let away = a.map(|x| if x.abs() < 0.05 { 0.5 } else { x });
    check(vec![away], &|g, v| g.relu(v[0]), 1e-7);
    check(vec![a.clone()], &|g, v| g.exp(v[0]), 1e-6);
    check(vec![a.clone()], &|g, v| g.square(v[0]), 1e-6);
    check(vec![pos.clone()], &|g, v| g.ln(v[0]), 1e-6);
    check(vec![pos.clone()], &|g, v| g.sqrt(v[0]), 1e-6);
    check(vec![pos], &|g, v| g.recip(v[0]), 1e-6);
}

#[test]
fn broadcasts() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[3, 2, 2], -1.0, 1.0);
    let row = rand_tensor(&mut r, &[3], -1.0, 1.0);
    let col = rand_tensor(&mut r, &[4], -1.0, 1.0);
    let s = rand_tensor(&mut r, &[1], 0.5, 1.5);
    check(vec![x.clone(), row.clone()], &|g, v| g.add_per_row(v[0], v[1]), 1e-7);
    check(vec![x.clone(), row], &|g, v| g.mul_per_row(v[0], v[1]), 1e-7);
    check(vec![x.clone(), col.clone()], &|g, v| g.add_per_col(v[0], v[1]), 1e-7);
    check(vec![x.clone(), col], &|g, v| g.mul_per_col(v[0], v[1]), 1e-7);
    check(vec![x, s], &|g, v| g.mul_scalar_var(v[0], v[1]), 1e-7);
}

#[test]
fn matmul_all_transposes() {
    let mut r = rng();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand_tensor(&mut r, &[4, 3], -1.0, 1.0) } else { rand_tensor(&mut r, &[3, 4], -1.0, 1.0) };
        let b = if tb { rand_tensor(&mut r, &[5, 4], -1.0, 1.0) } else { rand_tensor(&mut r, &[4, 5], -1.0, 1.0) };
        check(vec![a, b], &move |g, v| g.matmul_t(v[0], ta, v[1], tb), 1e-7);
    }
}

#[test]
fn conv_variants() {
    let mut r = rng();
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let x = rand_tensor(&mut r, &[2, 5, 6], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[3, 2, k, k], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[3], -1.0, 1.0);
        check(vec![x, w, b], &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad), 1e-6);
    }
}

#[test]
fn reductions_and_softmax() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
    check(vec![x.clone()], &|g, v| g.sum(v[0]), 1e-7);
    check(vec![x.clone()], &|g, v| g.mean(v[0]), 1e-7);
    check(vec![x.clone()], &|g, v| g.sum_cols(v[0]), 1e-7);
    check(vec![x.clone()], &|g, v| g.sum_rows(v[0]), 1e-7);
    check(vec![x], &|g, v| g.softmax_rows(v[0]), 1e-6);
}

#[test]
fn normalizations() {
    let mut r = rng();
    let tokens = rand_tensor(&mut r, &[3, 6], -2.0, 2.0);
    let gamma = rand_tensor(&mut r, &[6], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[6], -0.5, 0.5);
    check(vec![tokens, gamma, beta], &|g, v| g.layer_norm_rows(v[0], v[1], v[2], 1e-5), 1e-5);
    let map = rand_tensor(&mut r, &[4, 2, 3], -2.0, 2.0);
    let gamma = rand_tensor(&mut r, &[4], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[4], -0.5, 0.5);
    check(vec![map, gamma, beta], &|g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5), 1e-5);
}

#[test]
fn index_ops() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let idx = Arc::new(vec![5, 0, 0, 3]);
    let i2 = idx.clone();
    check(vec![x.clone()], &move |g, v| g.gather(v[0], i2.clone(), &[2, 2]), 1e-7);
    let y = rand_tensor(&mut r, &[4], -1.0, 1.0);
    check(vec![y], &move |g, v| g.scatter_add(v[0], idx.clone(), &[6]), 1e-7);
    let a = rand_tensor(&mut r, &[2, 3, 2], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 1, 2], -1.0, 1.0);
    check(vec![a.clone(), b], &|g, v| g.concat(&[v[0], v[1]], 1), 1e-7);
    let c = rand_tensor(&mut r, &[1, 3, 2], -1.0, 1.0);
    check(vec![a.clone(), c], &|g, v| g.concat(&[v[0], v[1]], 0), 1e-7);
    check(vec![a], &|g, v| g.reshape(v[0], &[3, 4]), 1e-7);
}

#[test]
fn composite_chain_accumulates_shared_inputs() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 4, 4], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[2, 2, 3, 3], -0.5, 0.5);
    check(
        vec![x, w],
        &|g, v| {
            let h = g.conv2d(v[0], v[1], None, 1, 1);
            let h = g.silu(h);
            let h2 = g.conv2d(h, v[1], None, 1, 1);
            g.add(h2, v[0])
        },
        1e-6,
    );
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Arc::new(Tensor::full(&[2], 1.0)), false);
    let b = g.leaf(Arc::new(Tensor::full(&[2], 2.0)), true);
    let c = g.mul(a, b);
    let s = g.sum(c);
    g.backward(s);
    assert!(g.grad(a).is_none());
    assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0]);

    let mut inf = Graph::<f64>::inference();
    let b = inf.leaf(Arc::new(Tensor::full(&[2], 2.0)), true);
    let s = inf.sum(b);
    inf.backward(s);
    assert!(inf.grad(b).is_none());
}
