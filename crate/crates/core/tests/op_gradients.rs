//! Every arithmetic primitive against central finite differences.

use csvmasr_core::numerics::{
    compare_gradients, finite_diff_grad, value_and_grad, Graph, ParamStore, SoftmaxMask, Tensor, Var,
};
use csvmasr_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;
const FLOOR: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Projects an op output onto fixed random weights so the check sees every
/// output entry.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w);
    g.sum(p)
}

fn check<F>(params: &ParamStore, program: F)
where
    F: Fn(&mut Graph) -> Result<Var, Error>,
{
    let (_, analytic) = value_and_grad(params, &program).unwrap();
    let numeric = finite_diff_grad(params, EPS, &program).unwrap();
    let cmp = compare_gradients(&analytic, &numeric, FLOOR);
    assert!(cmp.compared > 0);
    assert!(cmp.max_rel_error < TOL, "{cmp:?}");
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(*n, t.clone(), true).unwrap();
    }
    s
}

fn unary(seed: u64, rows: usize, cols: usize, out_cols: usize, op: impl Fn(&mut Graph, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&mut rng, rows, cols, 2.0);
    let w = random(&mut rng, rows, out_cols, 1.0);
    let params = store(&[("x", x)]);
    let id = params.id("x").unwrap();
    check(&params, |g| {
        let out = op(g, g.param(id));
        Ok(project(g, out, &w))
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = store(&[("a", random(&mut rng, m, k, 1.0)), ("b", random(&mut rng, k, n, 1.0))]);
        let w = random(&mut rng, m, n, 1.0);
        let (a, b) = (params.id("a").unwrap(), params.id("b").unwrap());
        check(&params, |g| {
            let out = g.matmul(g.param(a), g.param(b));
            Ok(project(g, out, &w))
        });
    }

    #[test]
    fn broadcast_add_and_mul(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5, full in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let other_rows = if full { rows } else { 1 };
        let params = store(&[("x", random(&mut rng, rows, cols, 1.5)), ("y", random(&mut rng, other_rows, cols, 1.5))]);
        let w = random(&mut rng, rows, cols, 1.0);
        let (x, y) = (params.id("x").unwrap(), params.id("y").unwrap());
        check(&params, |g| {
            let s = g.add(g.param(x), g.param(y));
            Ok(project(g, s, &w))
        });
        check(&params, |g| {
            let s = g.mul(g.param(x), g.param(y));
            Ok(project(g, s, &w))
        });
    }

    #[test]
    fn layer_norm(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..7) {
        unary(seed, rows, cols, cols, |g, x| g.layer_norm(x));
    }

    #[test]
    fn masked_softmax(seed in any::<u64>(), rows in 1usize..4, cols in 1usize..6, bits in any::<u32>()) {
        let mut flags: Vec<bool> = (0..cols).map(|c| bits >> c & 1 == 1).collect();
        flags[(bits as usize) % cols] = true;
        let mask = SoftmaxMask::Columns(flags);
        unary(seed, rows, cols, cols, |g, x| g.masked_softmax(x, &mask));
        unary(seed ^ 1, cols, cols, cols, |g, x| g.masked_softmax(x, &SoftmaxMask::Causal));
    }

    #[test]
    fn log_sum_exp(seed in any::<u64>(), rows in 1usize..4, cols in 1usize..6) {
        unary(seed, rows, cols, 1, |g, x| g.log_sum_exp(x));
    }

    #[test]
    fn depthwise_conv1d(seed in any::<u64>(), t in 1usize..8, c in 1usize..4, half in 0usize..3) {
        let k = 2 * half + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = store(&[("x", random(&mut rng, t, c, 1.0)), ("w", random(&mut rng, k, c, 1.0))]);
        let w = random(&mut rng, t, c, 1.0);
        let (xi, wi) = (params.id("x").unwrap(), params.id("w").unwrap());
        check(&params, |g| {
            let out = g.depthwise_conv1d(g.param(xi), g.param(wi));
            Ok(project(g, out, &w))
        });
    }

    #[test]
    fn swish(seed in any::<u64>(), rows in 1usize..4, cols in 1usize..6) {
        unary(seed, rows, cols, cols, |g, x| g.swish(x));
    }

    #[test]
    fn glu(seed in any::<u64>(), rows in 1usize..4, half in 1usize..4) {
        unary(seed, rows, 2 * half, half, |g, x| g.glu(x));
    }

    #[test]
    fn gather(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..4, picks in proptest::collection::vec(any::<usize>(), 1..7)) {
        let indices: Vec<usize> = picks.iter().map(|p| p % rows).collect();
        let n = indices.len();
        unary(seed, rows, cols, cols, |g, x| {
            let out = g.gather(x, &indices);
            // fold the n gathered rows back to `rows` via a fixed projection
            let mut acc = g.slice_rows(out, 0, 1);
            for i in 1..n {
                let r = g.slice_rows(out, i, 1);
                let r = g.scale(r, 1.0 + i as f64);
                acc = g.add(acc, r);
            }
            let ones = g.constant(Tensor::filled(rows, 1, 1.0));
            g.matmul(ones, acc)
        });
    }

    #[test]
    fn cross_entropy(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..6, t in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = store(&[("x", random(&mut rng, rows, cols, 3.0))]);
        let targets: Vec<usize> = (0..rows).map(|r| ((t >> (r * 3)) as usize) % cols).collect();
        let id = params.id("x").unwrap();
        check(&params, |g| Ok(g.cross_entropy(g.param(id), &targets)));
    }
}

#[test]
fn square_at_three() {
    let params = store(&[("x", Tensor::scalar(3.0))]);
    let id = params.id("x").unwrap();
    let program = |g: &mut Graph| -> Result<Var, Error> {
        let x = g.param(id);
        Ok(g.mul(x, x))
    };
    let (v, grads) = value_and_grad(&params, program).unwrap();
    assert_eq!(v, 9.0);
    assert_eq!(grads.by_name("x").unwrap().data(), &[6.0]);
    let fd = finite_diff_grad(&params, 1e-4, program).unwrap();
    assert!((fd.by_name("x").unwrap().data()[0] - 6.0).abs() < 1e-7);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    let params = store(&[("x", Tensor::row_vector(&[0.3, -1.2, 2.0, 0.0]))]);
    let id = params.id("x").unwrap();
    let (v, grads) = value_and_grad(&params, |g| {
        let s = g.softmax(g.param(id));
        Ok::<_, Error>(g.sum(s))
    })
    .unwrap();
    assert!((v - 1.0).abs() < 1e-15);
    assert!(grads.by_name("x").unwrap().data().iter().all(|d| d.abs() < 1e-15));
}

#[test]
fn constant_program_has_zero_difference_gradient() {
    let params = store(&[("x", Tensor::row_vector(&[1.0, 2.0]))]);
    let fd = finite_diff_grad(&params, 1e-4, |g| Ok::<_, Error>(g.constant(Tensor::scalar(4.0)))).unwrap();
    assert_eq!(fd.by_name("x").unwrap().data(), &[0.0, 0.0]);
    assert!(finite_diff_grad(&params, 0.0, |g| Ok::<_, Error>(g.constant(Tensor::scalar(4.0)))).is_err());
}

#[test]
fn two_layer_perceptron_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let input = random(&mut rng, 1, 5, 1.0);
        let params = store(&[
            ("w1", random(&mut rng, 5, 7, 0.8)),
            ("b1", random(&mut rng, 1, 7, 0.2)),
            ("w2", random(&mut rng, 7, 3, 0.8)),
            ("b2", random(&mut rng, 1, 3, 0.2)),
        ]);
        let ids: Vec<_> = ["w1", "b1", "w2", "b2"].iter().map(|n| params.id(n).unwrap()).collect();
        let program = |g: &mut Graph| -> Result<Var, Error> {
            let x = g.constant(input.clone());
            let h = g.affine(x, g.param(ids[0]), g.param(ids[1]));
            let h = g.swish(h);
            let o = g.affine(h, g.param(ids[2]), g.param(ids[3]));
            Ok(g.cross_entropy(o, &[1]))
        };
        let (_, analytic) = value_and_grad(&params, program).unwrap();
        let numeric = finite_diff_grad(&params, 1e-4, program).unwrap();
        let cmp = compare_gradients(&analytic, &numeric, FLOOR);
        assert!(cmp.max_rel_error < 1e-6, "{cmp:?}");
    }
}

#[test]
fn non_scalar_root_and_non_finite_values_are_reported() {
    let params = store(&[("x", Tensor::row_vector(&[1.0, 2.0]))]);
    let id = params.id("x").unwrap();
    let err = value_and_grad(&params, |g| Ok::<_, Error>(g.param(id))).unwrap_err();
    assert_eq!(err, Error::NonScalar { rows: 1, cols: 2 });
    let err = value_and_grad(&params, |g| {
        let big = g.scale(g.param(id), 1e308);
        let big = g.scale(big, 10.0);
        Ok::<_, Error>(g.sum(big))
    })
    .unwrap_err();
    assert_eq!(err, Error::NonFinite { op: "scale" });
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = store(&[("a", random(&mut rng, 4, 6, 1.0)), ("w", random(&mut rng, 3, 3, 1.0))]);
    let (a, w) = (params.id("a").unwrap(), params.id("w").unwrap());
    let program = |g: &mut Graph| -> Result<Var, Error> {
        let h = g.layer_norm(g.param(a));
        let h = g.glu(h);
        let c = g.depthwise_conv1d(h, g.param(w));
        let s = g.softmax(c);
        let l = g.log_sum_exp(s);
        Ok(g.sum(l))
    };
    let (v1, g1) = value_and_grad(&params, program).unwrap();
    let (v2, g2) = value_and_grad(&params, program).unwrap();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1, g2);
}
