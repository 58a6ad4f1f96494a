use alloc::vec;
use alloc::vec::Vec;

use super::*;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, q) = (a.shape()[0], a.shape()[1]);
    let r = b.shape()[1];
    let mut out = Tensor::zeros(&[p, r]);
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..q {
                s += a.at(&[i, k]) * b.at(&[k, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_dot() {
    let a = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
    let b = Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]);
    assert_eq!(matmul(&a, &b).unwrap(), b);
    let a = Tensor::from_rows(&[[1.0, 2.0]]);
    let b = Tensor::from_rows(&[[3.0], [4.0]]);
    assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(7);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    for n in [1, 5, 17, 32] {
        let a = random(&[n, n + 1], &mut rng);
        let b = random(&[n + 1, n], &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }
}

#[test]
fn matmul_batched_and_errors() {
    let mut rng = Rng::new(1);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let c = matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[2, 3, 5]);
    for bi in 0..2 {
        let ab = a.clone().reshape(&[6, 4]).unwrap().slice_rows(bi * 3, 3);
        let bb = b.clone().reshape(&[8, 5]).unwrap().slice_rows(bi * 4, 4);
        let cb = c.clone().reshape(&[6, 5]).unwrap().slice_rows(bi * 3, 3);
        assert!(cb.max_abs_diff(&naive_matmul(&ab, &bb)) < 1e-12);
    }
    let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    match err {
        crate::Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn softmax_examples() {
    let u = softmax(&Tensor::new(&[3], vec![0.0; 3]).unwrap(), 0).unwrap();
    for v in u.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let a = softmax(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), 0).unwrap();
    let b = softmax(&Tensor::new(&[2], vec![101.0, 102.0]).unwrap(), 0).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
    let c = softmax(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
    for (got, want) in c.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
        assert!((got - want).abs() < 1e-8);
    }
}

#[test]
fn softmax_non_last_axis() {
    let x = Tensor::from_rows(&[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]);
    let s = softmax(&x, 0).unwrap();
    let col0 = [s.at(&[0, 0]), s.at(&[1, 0]), s.at(&[2, 0])];
    for (got, want) in col0.iter().zip([0.09003057, 0.24472847, 0.66524096]) {
        assert!((got - want).abs() < 1e-8);
    }
    assert!((s.at(&[0, 1]) - 1.0 / 3.0).abs() < 1e-15);
    assert!(softmax(&x, 2).is_err());
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::full(&[4], 1.0);
    let zeros = Tensor::zeros(&[4]);
    let c = layer_norm(&Tensor::full(&[1, 4], 5.0), &ones, &zeros, LN_EPS).unwrap();
    assert!(c.data().iter().all(|v| v.abs() < 1e-12));

    let g2 = Tensor::full(&[2], 1.0);
    let z2 = Tensor::zeros(&[2]);
    let x = layer_norm(&Tensor::from_rows(&[[1.0, -1.0]]), &g2, &z2, 0.0).unwrap();
    assert!(x.max_abs_diff(&Tensor::from_rows(&[[1.0, -1.0]])) < 1e-15);

    let y = layer_norm(&Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0]]), &ones, &zeros, 0.0).unwrap();
    for (got, want) in y.data().iter().zip([-1.34164079, -0.4472136, 0.4472136, 1.34164079]) {
        assert!((got - want).abs() < 1e-7);
    }
}

#[test]
fn dropout_identity_cases() {
    let mut rng = Rng::new(1);
    let x = random(&[4, 5], &mut rng);
    assert_eq!(dropout(&x, 0.3, false, &mut rng).unwrap(), x);
    assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
    assert!(dropout(&x, 1.0, true, &mut rng).is_err());
    assert!(dropout(&x, -0.1, false, &mut rng).is_err());
}

#[test]
fn dropout_concentration() {
    let n = 1_000_000usize;
    let x = Tensor::full(&[n], 1.0);
    let mut rng = Rng::new(42);
    let y = dropout(&x, 0.5, true, &mut rng).unwrap();
    let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64;
    let mean = y.sum() / n as f64;
    // Binomial(n, 0.5): sd of the survivor fraction is 0.5 / sqrt(n); the
    // mean of the rescaled vector has sd 1 / sqrt(n).
    let sd_frac = 0.5 / (n as f64).sqrt();
    assert!((survivors / n as f64 - 0.5).abs() < 3.0 * sd_frac);
    assert!((mean - 1.0).abs() < 3.0 * 2.0 * sd_frac);
}

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::zeros(&[1, 8]);
    assert!((cross_entropy(&uniform, &[3], 0).unwrap() - 8f64.ln()).abs() < 1e-12);

    let mut sharp = Tensor::zeros(&[1, 4]);
    sharp.set(&[0, 2], 1e9);
    assert!(cross_entropy(&sharp, &[2], 0).unwrap().abs() < 1e-6);

    let l = Tensor::from_rows(&[[1.0, 2.0, 3.0]]);
    assert!((cross_entropy(&l, &[2], 99).unwrap() - 0.4076059644443803).abs() < 1e-12);

    assert!(matches!(
        cross_entropy(&l, &[3], 99),
        Err(crate::Error::Index { .. })
    ));
}

#[test]
fn cross_entropy_ignores_positions() {
    let l = Tensor::from_rows(&[[1.0, 2.0, 3.0], [9.0, -4.0, 0.5]]);
    let only_first = cross_entropy(&l, &[2, 0], 0).unwrap();
    assert!((only_first - 0.4076059644443803).abs() < 1e-12);
    assert_eq!(cross_entropy(&l, &[0, 0], 0).unwrap(), 0.0);
}

#[test]
fn backward_linear_and_quadratic() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
    for _ in 0..2 {
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        g.accumulate_into(&t, &mut store);
    }
    assert_eq!(store.get(id).grad.data(), &[2.0, 2.0]);
    store.zero_grad();
    assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
}

#[test]
fn shared_param_is_one_node() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
    let mut t = Tape::new();
    let a = t.param(&store, id);
    let b = t.param(&store, id);
    assert_eq!(a, b);
    let p = t.mul(a, b).unwrap();
    let s = t.sum(p);
    t.backward(s).unwrap().accumulate_into(&t, &mut store);
    assert_eq!(store.get(id).grad.data(), &[6.0]);
    assert!(store.add("w", Tensor::zeros(&[1])).is_err());
}

#[test]
fn gather_and_concat_rows() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
    let b = t.leaf(Tensor::from_rows(&[[5.0, 6.0]]));
    let c = t.concat_rows(&[a, b]).unwrap();
    let g = t.gather_rows(c, &[2, 0, 0]).unwrap();
    assert_eq!(t.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 1.0, 2.0]);
    let s = t.sum(g);
    let grads = t.backward(s).unwrap();
    assert_eq!(grads.wrt(a).unwrap(), &[2.0, 2.0, 0.0, 0.0]);
    assert_eq!(grads.wrt(b).unwrap(), &[1.0, 1.0]);
    let bad: Vec<usize> = vec![3];
    assert!(t.gather_rows(c, &bad).is_err());
}
