mod common;

use caw_core::tensor::{Graph, Tensor, Var};
use caw_core::Error;
use common::{fd, log_sum_exp, max_diff, rng, softmax};
use proptest::prelude::*;
use rand::Rng;

fn random(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// Checks d/dX of `sum(W ⊙ op(X))` for random weights `W` against central differences.
fn check_unary(op: impl for<'g> Fn(Var<'g>) -> Var<'g>, x: &Tensor, tol: f64) {
    let mut r = rng(99);
    let g0 = Graph::new();
    let out_shape = op(g0.constant(x.clone())).shape();
    let n: usize = out_shape.iter().product();
    let w = Tensor::new(out_shape.clone(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();

    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let root = op(xv).mul(g.constant(w.clone())).unwrap().sum();
    let analytic = root.backward().unwrap().wrt(xv);

    let numeric = fd(
        |p| {
            let g = Graph::new();
            let t = Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap();
            op(g.constant(t)).mul(g.constant(w.clone())).unwrap().sum().item().unwrap()
        },
        x.data(),
        1e-6,
    );
    let err = max_diff(analytic.data(), &numeric);
    assert!(err < tol, "max abs gradient error {err}");
}

#[test]
fn matmul_kernels_match_naive_loops() {
    let mut r = rng(1);
    let a = random(&mut r, 3, 4, 1.0);
    let b = random(&mut r, 5, 4, 1.0);
    let c = random(&mut r, 4, 2, 1.0);
    let abt = a.matmul_t(&b).unwrap();
    let ac = a.matmul(&c).unwrap();
    for i in 0..3 {
        for j in 0..5 {
            let s: f64 = (0..4).map(|k| a.row(i)[k] * b.row(j)[k]).sum();
            assert!((abt.row(i)[j] - s).abs() < 1e-14);
        }
        for j in 0..2 {
            let s: f64 = (0..4).map(|k| a.row(i)[k] * c.row(k)[j]).sum();
            assert!((ac.row(i)[j] - s).abs() < 1e-14);
        }
    }
    let atb = a.t_matmul(&random(&mut r, 3, 2, 1.0)).unwrap();
    assert_eq!(atb.shape(), &[4, 2]);
    assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
}

#[test]
fn softmax_matches_log_sum_exp_oracle() {
    let mut r = rng(2);
    let z = random(&mut r, 6, 5, 50.0);
    let s = z.softmax_rows().unwrap();
    let ls = z.log_softmax_rows().unwrap();
    for i in 0..6 {
        assert!(max_diff(s.row(i), &softmax(z.row(i))) < 1e-14);
        let lse = log_sum_exp(z.row(i));
        let oracle: Vec<f64> = z.row(i).iter().map(|v| v - lse).collect();
        assert!(max_diff(ls.row(i), &oracle) < 1e-12);
    }
}

#[test]
fn empty_softmax_is_a_dimension_error() {
    assert!(matches!(Tensor::zeros(&[0, 3]).softmax_rows(), Err(Error::Dimension(_))));
}

#[test]
fn op_gradients_match_finite_differences() {
    let mut r = rng(3);
    let x = random(&mut r, 3, 4, 1.0);
    let w = random(&mut r, 2, 4, 1.0);
    let bias = Tensor::vector(vec![0.3, -0.2, 0.1, 0.5]);
    check_unary(|v| v.tanh(), &x, 1e-8);
    check_unary(|v| v.softmax_rows().unwrap(), &x, 1e-8);
    check_unary(|v| v.log_softmax_rows().unwrap(), &x, 1e-8);
    check_unary(|v| v.normalize_rows().unwrap(), &x, 1e-8);
    check_unary(|v| v.row_norms().unwrap(), &x, 1e-8);
    check_unary(|v| v.affine(-1.5, 0.25), &x, 1e-8);
    check_unary(|v| v.mul(v).unwrap(), &x, 1e-8);
    check_unary(|v| v.gather(&[3, 0, 2]).unwrap(), &x, 1e-8);
    check_unary(move |v| v.matmul_t(v.graph().constant(w.clone())).unwrap(), &x, 1e-8);
    check_unary(move |v| v.add_row(v.graph().constant(bias.clone())).unwrap(), &x, 1e-8);
    check_unary(|v| v.mean(), &x, 1e-8);
}

#[test]
fn kl_gradient_in_both_arguments() {
    let mut r = rng(4);
    let a = random(&mut r, 3, 4, 2.0);
    let b = random(&mut r, 3, 4, 2.0);
    let b2 = b.clone();
    check_unary(move |v| v.softmax_rows().unwrap().kl_rows(v.graph().constant(b2.clone()).softmax_rows().unwrap()).unwrap(), &a, 1e-7);
    check_unary(move |v| v.graph().constant(a.clone()).softmax_rows().unwrap().kl_rows(v.softmax_rows().unwrap()).unwrap(), &b, 1e-7);
}

#[test]
fn detached_branch_carries_no_gradient() {
    let g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = x.mul(x.detach()).unwrap().sum();
    // d/dx (x · stop(x)) = stop(x)
    assert_eq!(y.backward().unwrap().wrt(x).data(), &[1.0, 2.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-1e3f64..1e3, 12)) {
        let z = Tensor::matrix(3, 4, v).unwrap();
        let s = z.softmax_rows().unwrap();
        for i in 0..3 {
            let row = s.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-30f64..30.0, 5), c in -100f64..100.0) {
        let a = Tensor::matrix(1, 5, v.clone()).unwrap().softmax_rows().unwrap();
        let b = Tensor::matrix(1, 5, v.iter().map(|x| x + c).collect()).unwrap().softmax_rows().unwrap();
        prop_assert!(max_diff(a.data(), b.data()) < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(
        p in prop::collection::vec(-500f64..500.0, 8),
        q in prop::collection::vec(-500f64..500.0, 8),
    ) {
        let g = Graph::new();
        let pa = g.constant(Tensor::matrix(2, 4, p).unwrap()).softmax_rows().unwrap();
        let qa = g.constant(Tensor::matrix(2, 4, q).unwrap()).softmax_rows().unwrap();
        let kl = pa.kl_rows(qa).unwrap().value();
        prop_assert!(kl.data().iter().all(|v| *v >= -1e-9));
        let same = pa.kl_rows(pa).unwrap().value();
        prop_assert!(same.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn argmax_takes_lowest_index_on_ties(v in -5f64..5.0) {
        let t = Tensor::matrix(1, 3, vec![v, v, v - 1.0]).unwrap();
        prop_assert_eq!(t.argmax_rows(), vec![0]);
    }
}
