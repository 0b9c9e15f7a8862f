use proptest::prelude::*;
use ressqu::gradcheck::{check_op, primitive_cases, EPS};
use ressqu::ops::{self, PoolKind};
use ressqu::{Shape, Tensor};

fn tensor(shape: Shape, vals: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| vals[i % vals.len()])
}

// Direct quadruple loop, written independently of the library kernel.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut out = Vec::new();
    for n in 0..xs.n {
        for o in 0..ws.n {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for c in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                    acc += x.at(n, c, iy as usize, ix as usize) * w.at(o, c, ky, kx);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loops(
        n in 1usize..3, c in 1usize..4, o in 1usize..4, h in 3usize..8, w in 3usize..8,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2,
        vals in prop::collection::vec(-1.0f64..1.0, 16..64),
    ) {
        let x = tensor(Shape::new(n, c, h, w), &vals);
        let wt = tensor(Shape::new(o, c, k, k), &vals[3..]);
        let b: Vec<f64> = (0..o).map(|i| vals[i] * 0.5).collect();
        let y = ops::conv2d(&x, &wt, &b, stride, pad).unwrap();
        let oh = ops::conv_out_extent(h, k, stride, pad).unwrap();
        let ow = ops::conv_out_extent(w, k, stride, pad).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(n, o, oh, ow));
        for (a, e) in y.data().iter().zip(naive_conv(&x, &wt, &b, stride, pad)) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        z in prop::collection::vec(-30.0f64..30.0, 1..12), c in -50.0f64..50.0,
    ) {
        let p = ops::softmax(&z);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(ops::softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_backward_conserves_mass(
        c in 1usize..3, h in 3usize..9, k in 2usize..4, stride in 1usize..3,
        vals in prop::collection::vec(-1.0f64..1.0, 8..40),
    ) {
        let x = tensor(Shape::new(1, c, h, h), &vals);
        let pooled = ops::pool2d(&x, PoolKind::Max, k, stride, 0).unwrap();
        let up = Tensor::from_fn(pooled.output.shape(), |i| 1.0 + i as f64);
        let dx = ops::pool2d_backward(x.shape(), &pooled.argmax, &up, PoolKind::Max, k, stride, 0).unwrap();
        let total: f64 = up.data().iter().sum();
        prop_assert!((dx.data().iter().sum::<f64>() - total).abs() < 1e-9);
        for (i, &g) in dx.data().iter().enumerate() {
            if g != 0.0 {
                prop_assert!(pooled.argmax.contains(&i));
            }
        }
    }

    #[test]
    fn concat_and_add_backward_are_exact(
        ca in 1usize..4, cb in 1usize..4, hw in 1usize..5,
        vals in prop::collection::vec(-5.0f64..5.0, 4..30),
    ) {
        let a = tensor(Shape::new(2, ca, hw, hw), &vals);
        let b = tensor(Shape::new(2, cb, hw, hw), &vals[1..]);
        let y = ops::concat_channels(&a, &b).unwrap();
        let up = Tensor::from_fn(y.shape(), |i| vals[(i * 7) % vals.len()]);
        let parts = ops::concat_backward(&up, &[ca, cb]).unwrap();
        prop_assert_eq!(ops::concat_channels(&parts[0], &parts[1]).unwrap(), up);

        let s = ops::add_elementwise(&a, &a).unwrap();
        for (v, x) in s.data().iter().zip(a.data()) {
            prop_assert_eq!(*v, 2.0 * x);
        }
    }

    #[test]
    fn relu_output_is_nonnegative_and_finite(vals in prop::collection::vec(-1e300f64..1e300, 1..50)) {
        let x = Tensor::from_vec(Shape::vector(vals.len()), vals).unwrap();
        let y = ops::relu(&x);
        prop_assert!(y.is_finite());
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn primitive_gradients_hold_over_many_seeds() {
    for seed in 0..12 {
        for case in primitive_cases(seed, false) {
            let err = check_op(case.op.as_ref(), &case.inputs, EPS, seed).unwrap();
            assert!(err <= 1e-4, "seed {seed} {}: {err}", case.op.name());
        }
    }
}

#[test]
fn softmax_two_logit_closed_form() {
    let p = ops::softmax(&[10.0f64, 0.0]);
    assert!((p[0] - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-15);
}
