//! Tape operations against direct nested-loop references.

use proptest::prelude::*;
use wavelatent::gradcheck::{check_function, CheckOptions};
use wavelatent::{rng, Activation, Tape, Tensor};

#[allow(clippy::needless_range_loop)]
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [cout, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for i in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((i * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * cin + c) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((i * cout + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ConvCase {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    seed: u64,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..3, 1usize..4, 1usize..4, prop_oneof![Just(1usize), Just(3)], 1usize..3, any::<u64>()).prop_flat_map(
        |(n, cin, cout, k, stride, seed)| {
            (k..k + 7, k..k + 7).prop_map(move |(h, w)| ConvCase { n, cin, cout, h, w, k, stride, seed })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_nested_loops(case in conv_case()) {
        let mut r = rng::stream(case.seed, "conv");
        let x = Tensor::<f64>::randn(&[case.n, case.cin, case.h, case.w], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[case.cout, case.cin, case.k, case.k], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[case.cout], 1.0, &mut r);
        let pad = case.k / 2;
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), case.stride, pad).unwrap();
        let expect = naive_conv(&x, &w, b.data(), case.stride, pad);
        prop_assert_eq!(tape.value(y).shape(), expect.shape());
        prop_assert!(tape.value(y).max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn conv_gradients_match_finite_differences(case in conv_case()) {
        let mut r = rng::stream(case.seed, "conv_grad");
        let inputs = vec![
            ("x".to_string(), Tensor::<f64>::randn(&[case.n, case.cin, case.h, case.w], 1.0, &mut r)),
            ("w".to_string(), Tensor::<f64>::randn(&[case.cout, case.cin, case.k, case.k], 0.5, &mut r)),
            ("b".to_string(), Tensor::<f64>::randn(&[case.cout], 0.5, &mut r)),
        ];
        let stride = case.stride;
        let pad = case.k / 2;
        let opts = CheckOptions { max_elements: Some(12), seed: case.seed, ..CheckOptions::default() };
        let report = check_function("conv", &inputs, &opts, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            let y = t.activation(y, Activation::Silu)?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y)?.into())
        }).unwrap();
        prop_assert!(report.passed(), "{:?}", report.first_failure());
    }
}

#[test]
fn upsample_repeats_each_pixel() {
    let x = Tensor::<f64>::from_fn(&[1, 2, 2, 3], |i| i as f64);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.upsample2x(v).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[1, 2, 4, 6]);
    for c in 0..2 {
        for yy in 0..4 {
            for xx in 0..6 {
                assert_eq!(out.data()[(c * 4 + yy) * 6 + xx], x.data()[(c * 2 + yy / 2) * 3 + xx / 2]);
            }
        }
    }
}

#[test]
fn activations_match_direct_formulas() {
    let x = Tensor::<f64>::from_fn(&[1, 1, 1, 9], |i| i as f64 - 4.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = tape.activation(v, Activation::Silu).unwrap();
    let r = tape.activation(v, Activation::Relu).unwrap();
    let t = tape.tanh(v).unwrap();
    for (i, &xi) in x.data().iter().enumerate() {
        assert!((tape.value(s).data()[i] - xi / (1.0 + (-xi).exp())).abs() < 1e-15);
        assert_eq!(tape.value(r).data()[i], xi.max(0.0));
        assert!((tape.value(t).data()[i] - xi.tanh()).abs() < 1e-15);
    }
}

#[test]
fn kl_gradient_is_closed_form() {
    let mean = Tensor::<f64>::from_fn(&[2, 1, 1, 3], |i| i as f64 * 0.3 - 0.7);
    let log_var = Tensor::<f64>::from_fn(&[2, 1, 1, 3], |i| 0.2 - i as f64 * 0.15);
    let mut tape = Tape::new();
    let (m, lv) = (tape.param(mean.clone()), tape.param(log_var.clone()));
    let kl = tape.kl_divergence(m, lv).unwrap();
    tape.backward(kl).unwrap();
    // Batch of 2: each element contributes 1/2 of its per-item derivative.
    for i in 0..6 {
        assert!((tape.grad(m).unwrap()[i] - mean.data()[i] / 2.0).abs() < 1e-15);
        let expect = 0.5 * (log_var.data()[i].exp() - 1.0) / 2.0;
        assert!((tape.grad(lv).unwrap()[i] - expect).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_misuse() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(tape.backward(a).is_err());
    let s = tape.sum(a).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.backward(s).is_err());
}
