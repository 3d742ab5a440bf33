use proptest::prelude::*;

use super::*;
use crate::gradcheck::GradCheck;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut Seed(seed).rng())
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = 0.0;
                for c in 0..ci {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (y * stride + i) as isize - pad as isize;
                            let ix = (xx * stride + j) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x.data()[(c * h + iy as usize) * w + ix as usize]
                                    * k.data()[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = acc;
            }
        }
    }
    (vec![co, ho, wo], out)
}

#[test]
fn matmul_identity_cases() {
    let a = t(&[2, 2], &[1., 2., 3., 4.]);
    assert_eq!(a.matmul(&Tensor::eye(2)).unwrap().data(), &[1., 2., 3., 4.]);
    let b = t(&[2, 1], &[5., 7.]);
    assert_eq!(Tensor::eye(2).matmul(&b).unwrap().data(), &[5., 7.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_t(&[3, 4], 1);
    let b = rand_t(&[4, 2], 2);
    let got = a.matmul(&b).unwrap();
    assert_eq!(got.shape(), &[3, 2]);
    let want = naive_matmul(&a, &b);
    let diff = got.data().iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let err = rand_t(&[3, 4], 1).matmul(&rand_t(&[3, 2], 2)).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { .. }));
}

#[test]
fn softmax_examples() {
    let y = t(&[1, 2], &[0., 0.]).softmax_rows(None).unwrap();
    assert_eq!(y.data(), &[0.5, 0.5]);

    let e2 = 2f64.exp();
    let y = t(&[1, 2], &[0., 0.]).softmax_rows(Some(&t(&[1, 2], &[0., 2.]))).unwrap();
    assert!((y.data()[0] - 1.0 / (1.0 + e2)).abs() < 1e-15);
    assert!((y.data()[1] - e2 / (1.0 + e2)).abs() < 1e-15);
}

#[test]
fn softmax_constant_bias_is_identity() {
    let logits = rand_t(&[4, 5], 3);
    let plain = logits.softmax_rows(None).unwrap();
    let biased = logits.softmax_rows(Some(&Tensor::full(&[4, 5], 1.75))).unwrap();
    assert!(plain.bit_eq(&biased));
}

#[test]
fn softmax_errors() {
    let nan = t(&[1, 2], &[f64::NAN, 0.]);
    assert!(matches!(nan.softmax_rows(None), Err(TensorError::NonFiniteInput { .. })));
    let inf = t(&[1, 2], &[f64::INFINITY, 0.]);
    assert!(matches!(inf.softmax_rows(None), Err(TensorError::NonFiniteInput { .. })));
    let bad_bias = t(&[1, 3], &[0., 0., 0.]);
    assert!(matches!(t(&[1, 2], &[0., 0.]).softmax_rows(Some(&bad_bias)), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn conv_zero_kernel_and_identity_kernel() {
    let x = rand_t(&[2, 5, 5], 4);
    let zero = Tensor::zeros(&[3, 2, 3, 3]);
    let y = x.conv2d(&zero, None, 1, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let x = rand_t(&[1, 4, 4], 5);
    let id = Tensor::ones(&[1, 1, 1, 1]);
    assert!(x.conv2d(&id, None, 1, 0).unwrap().bit_eq(&x));
}

#[test]
fn conv_matches_sliding_window() {
    let x = rand_t(&[1, 4, 4], 6);
    let k = rand_t(&[1, 1, 3, 3], 7);
    for (stride, pad) in [(1, 0), (1, 1)] {
        let got = x.conv2d(&k, None, stride, pad).unwrap();
        let (shape, want) = naive_conv(&x, &k, stride, pad);
        assert_eq!(got.shape(), shape.as_slice());
        let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
    let x = rand_t(&[3, 7, 7], 8);
    let k = rand_t(&[2, 3, 3, 3], 9);
    let got = x.conv2d(&k, None, 2, 1).unwrap();
    let (_, want) = naive_conv(&x, &k, 2, 1);
    assert!(got.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn conv_rejects_non_integral_extent() {
    let x = rand_t(&[1, 4, 4], 6);
    let k = rand_t(&[1, 1, 3, 3], 7);
    assert!(matches!(x.conv2d(&k, None, 2, 0), Err(TensorError::ShapeMismatch { .. })));
    let k = rand_t(&[1, 2, 3, 3], 7);
    assert!(matches!(x.conv2d(&k, None, 1, 1), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn maxpool_examples() {
    let y = t(&[2, 2], &[1., 2., 3., 4.]).maxpool2d(2, 2).unwrap();
    assert_eq!(y.shape(), &[1, 1]);
    assert_eq!(y.data(), &[4.]);

    let c = Tensor::full(&[2, 4, 4], 0.3);
    let y = c.maxpool2d(2, 2).unwrap();
    assert_eq!(y.shape(), &[2, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 0.3));
    assert!(matches!(c.maxpool2d(3, 2), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn maxpool_matches_nested_loops() {
    let x = rand_t(&[8, 8], 10);
    let y = x.maxpool2d(2, 2).unwrap();
    assert_eq!(y.shape(), &[4, 4]);
    for oy in 0..4 {
        for ox in 0..4 {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(x.data()[(oy * 2 + dy) * 8 + ox * 2 + dx]);
                }
            }
            assert!((y.data()[oy * 4 + ox] - m).abs() < 1e-12);
        }
    }
}

#[test]
fn maxpool_ties_route_to_first() {
    let x = Tensor::full(&[2, 2], 1.0).param();
    x.maxpool2d(2, 2).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);

    let x = Tensor::full(&[2, 2, 2, 2], 1.0).param();
    x.max_pool_blocks(&[2, 2, 2, 2]).unwrap().sum().backward().unwrap();
    let g = x.grad().unwrap();
    assert_eq!(g[0], 1.0);
    assert_eq!(g.iter().sum::<f64>(), 1.0);
}

#[test]
fn backward_examples() {
    let x = t(&[2], &[1., 2.]).param();
    x.square().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2., 4.]);

    let x = rand_t(&[3, 2], 11).param();
    x.sum().backward().unwrap();
    assert!(x.grad().unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_sum_of_squares_matches_central_differences() {
    let report = GradCheck::default()
        .run(&[t(&[2], &[1., 2.])], |p| Ok(p[0].square().sum()))
        .unwrap();
    assert!(report.max_rel_err() < 1e-6);
    let num = &report.inputs[0].numeric;
    assert!((num[0] - 2.0).abs() < 1e-8 && (num[1] - 4.0).abs() < 1e-8);
}

#[test]
fn backward_errors_and_disconnected_leaves() {
    let x = rand_t(&[2], 1).param();
    assert!(matches!(x.square().backward(), Err(TensorError::NotScalar(_))));
    let used = rand_t(&[2], 2).param();
    let unused = rand_t(&[2], 3).param();
    used.sum().backward().unwrap();
    assert!(unused.grad().is_none());
    assert_eq!(unused.grad_or_zeros(), vec![0.0, 0.0]);
}

#[test]
fn composite_softmax_matmul_gradient() {
    let logits = rand_t(&[3, 4], 20);
    let bias = rand_t(&[3, 4], 21);
    let v = rand_t(&[4, 2], 22);
    let w = rand_t(&[3, 2], 23);
    let report = GradCheck::default()
        .run(&[logits, bias, v, w], |p| {
            let a = p[0].softmax_rows(Some(&p[1]))?;
            a.matmul(&p[2])?.mul(&p[3])?.sum().square().pipe(Ok)
        })
        .unwrap();
    assert!(report.max_rel_err() < 1e-6, "{report:?}");
}

trait Pipe: Sized {
    fn pipe<R>(self, f: impl FnOnce(Self) -> R) -> R {
        f(self)
    }
}
impl<T> Pipe for T {}

#[test]
fn every_differentiable_op_matches_finite_differences() {
    type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Result<Tensor>>);
    let w = rand_t(&[2, 3, 3, 3], 31);
    let cases: Vec<Case> = vec![
        ("add", vec![rand_t(&[3, 2], 1), rand_t(&[3, 2], 2)], Box::new(|p| Ok(p[0].add(&p[1])?.square().sum()))),
        ("sub", vec![rand_t(&[3, 2], 1), rand_t(&[3, 2], 2)], Box::new(|p| Ok(p[0].sub(&p[1])?.square().sum()))),
        ("mul", vec![rand_t(&[3, 2], 1), rand_t(&[3, 2], 2)], Box::new(|p| Ok(p[0].mul(&p[1])?.square().sum()))),
        ("mul_scalar", vec![rand_t(&[3, 2], 1), rand_t(&[1], 2)], Box::new(|p| Ok(p[0].mul(&p[1])?.square().sum()))),
        ("scale", vec![rand_t(&[4], 3)], Box::new(|p| Ok(p[0].scale(-1.7).add_scalar(0.3).square().sum()))),
        ("exp", vec![rand_t(&[4], 4)], Box::new(|p| Ok(p[0].exp().sum()))),
        ("tanh", vec![rand_t(&[4], 5)], Box::new(|p| Ok(p[0].tanh().square().sum()))),
        ("silu", vec![rand_t(&[6], 6)], Box::new(|p| Ok(p[0].silu().square().sum()))),
        ("relu", vec![rand_t(&[6], 7)], Box::new(|p| Ok(p[0].relu().square().sum()))),
        ("mean", vec![rand_t(&[2, 3], 8)], Box::new(|p| Ok(p[0].square().mean()))),
        ("transpose", vec![rand_t(&[2, 3], 9), rand_t(&[3, 2], 10)], Box::new(|p| Ok(p[0].transpose()?.mul(&p[1])?.sum().square()))),
        ("matmul", vec![rand_t(&[3, 4], 11), rand_t(&[4, 2], 12)], Box::new(|p| Ok(p[0].matmul(&p[1])?.square().sum()))),
        ("softmax", vec![rand_t(&[3, 5], 13), rand_t(&[3, 5], 14)], Box::new(|p| Ok(p[0].softmax_rows(None)?.mul(&p[1])?.sum()))),
        ("layer_norm", vec![rand_t(&[3, 5], 15), rand_t(&[3, 5], 16)], Box::new(|p| Ok(p[0].layer_norm_rows(1e-5)?.mul(&p[1])?.sum()))),
        (
            "conv2d",
            vec![rand_t(&[3, 5, 5], 17), w, rand_t(&[2], 18)],
            Box::new(|p| Ok(p[0].conv2d(&p[1], Some(&p[2]), 2, 1)?.square().sum())),
        ),
        ("maxpool2d", vec![rand_t(&[2, 4, 4], 19), rand_t(&[2, 2, 2], 20)], Box::new(|p| Ok(p[0].maxpool2d(2, 2)?.mul(&p[1])?.sum()))),
        ("maxpool2d_overlap", vec![rand_t(&[1, 5, 5], 21)], Box::new(|p| Ok(p[0].maxpool2d(3, 2)?.square().sum()))),
        ("max_pool_blocks", vec![rand_t(&[4, 4, 2], 22)], Box::new(|p| Ok(p[0].max_pool_blocks(&[2, 2, 2])?.square().sum()))),
        ("avg_pool2d", vec![rand_t(&[2, 4, 4], 23)], Box::new(|p| Ok(p[0].avg_pool2d(2)?.square().sum()))),
        ("upsample", vec![rand_t(&[2, 2, 2], 24), rand_t(&[2, 4, 4], 25)], Box::new(|p| Ok(p[0].upsample_nearest2d(2)?.mul(&p[1])?.sum()))),
        (
            "concat_narrow",
            vec![rand_t(&[2, 3], 26), rand_t(&[2, 2], 27)],
            Box::new(|p| Ok(Tensor::concat(&[p[0].clone(), p[1].clone()], 1)?.narrow(1, 1, 3)?.square().sum())),
        ),
        ("add_channel", vec![rand_t(&[3, 2, 2], 28), rand_t(&[3], 29)], Box::new(|p| Ok(p[0].add_channel(&p[1])?.square().sum()))),
        ("add_row", vec![rand_t(&[2, 3], 30), rand_t(&[3], 31)], Box::new(|p| Ok(p[0].add_row(&p[1])?.square().sum()))),
        (
            "normalize_rows",
            vec![rand_t(&[3, 4], 34).square().add_scalar(0.5), rand_t(&[3, 4], 35)],
            Box::new(|p| Ok(p[0].normalize_rows()?.mul(&p[1])?.sum())),
        ),
        ("reshape", vec![rand_t(&[2, 3], 32), rand_t(&[3, 2], 33)], Box::new(|p| Ok(p[0].reshape(&[3, 2])?.mul(&p[1])?.sum().square()))),
    ];
    for (name, inputs, f) in cases {
        let report = GradCheck::default().run(&inputs, |p| f(p)).unwrap();
        assert!(report.max_rel_err() < 1e-6, "{name}: {}", report.max_rel_err());
    }
}

#[test]
fn normalize_rows_examples() {
    let x = t(&[2, 2], &[1.0, 3.0, 2.0, 2.0]);
    assert_eq!(x.normalize_rows().unwrap().data(), &[0.25, 0.75, 0.5, 0.5]);
    assert!(t(&[1, 2], &[1.0, -1.0]).normalize_rows().is_err());
}

#[test]
fn frozen_inputs_record_no_graph() {
    let a = rand_t(&[2, 2], 1);
    let b = rand_t(&[2, 2], 2);
    let y = a.matmul(&b).unwrap();
    assert!(!y.requires_grad());
    assert!(y.is_leaf());
}

#[test]
fn ops_are_deterministic_under_seed() {
    let run = || {
        let mut rng = Seed(42).rng();
        let x = Tensor::randn(&[2, 6, 6], &mut rng);
        let k = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        let y = x.conv2d(&k, None, 1, 1).unwrap().silu().maxpool2d(2, 2).unwrap();
        y.reshape(&[3, 9]).unwrap().softmax_rows(None).unwrap()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn container_roundtrip_and_errors() {
    let tensors = vec![
        ("a.w".to_string(), rand_t(&[2, 3], 1)),
        ("b".to_string(), Tensor::scalar(f64::MIN_POSITIVE)),
    ];
    let mut buf = Vec::new();
    write_container(&mut buf, &tensors).unwrap();
    assert_eq!(&buf[..4], b"SESA");
    let back = read_container(&buf).unwrap();
    assert_eq!(back.len(), 2);
    for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
        assert_eq!(n1, n2);
        assert!(t1.bit_eq(t2));
    }

    let cut = &buf[..buf.len() - 3];
    match read_container(cut) {
        Err(ContainerError::Corrupt { offset, .. }) => assert!(offset > 8 && offset < buf.len()),
        other => panic!("expected Corrupt, got {other:?}"),
    }
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_container(&bad), Err(ContainerError::BadMagic(_))));
    let mut v2 = buf.clone();
    v2[4] = 2;
    assert!(matches!(read_container(&v2), Err(ContainerError::VersionMismatch { found: 2, .. })));
}

#[test]
fn seed_derivation_is_stable() {
    assert_eq!(Seed(7).derive(3), Seed(7).derive(3));
    assert_ne!(Seed(7).derive(3), Seed(7).derive(4));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12), shift in -50.0f64..50.0) {
        let x = Tensor::from_vec(&[3, 4], vals.clone()).unwrap();
        let y = x.softmax_rows(None).unwrap();
        for row in y.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // per-row shift invariance
        let shifted: Vec<f64> = vals.iter().enumerate().map(|(i, v)| v + shift * (i / 4) as f64).collect();
        let ys = Tensor::from_vec(&[3, 4], shifted).unwrap().softmax_rows(None).unwrap();
        prop_assert!(y.max_abs_diff(&ys) < 1e-9);
    }

    #[test]
    fn container_roundtrip_is_bit_exact(vals in prop::collection::vec(any::<f64>(), 1..40), name in "[a-z.]{0,12}") {
        let n = vals.len();
        let t = Tensor::from_vec(&[n], vals).unwrap();
        let mut buf = Vec::new();
        write_container(&mut buf, &[(name.clone(), t.clone())]).unwrap();
        let back = read_container(&buf).unwrap();
        prop_assert_eq!(&back[0].0, &name);
        prop_assert!(back[0].1.bit_eq(&t));
    }
}
