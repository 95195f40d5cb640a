use pmnet_core::nn::{
    atrous_conv2d, upsample_bilinear, upsample_bilinear_backward, BatchNorm2d, Conv2d,
    ConvTranspose2d, MaxPool2d, Tensor,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, FileFailurePersistence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quiet(cases: u32) -> Config {
    Config {
        cases,
        failure_persistence: Some(Box::new(FileFailurePersistence::Off)),
        ..Config::default()
    }
}

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Direct dilated convolution with zero padding.
#[allow(clippy::too_many_arguments)]
fn direct_conv(
    f: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    k: &[f64],
    c_out: usize,
    ks: usize,
    r: usize,
    s: usize,
    p: usize,
) -> (Vec<f64>, usize, usize) {
    let span = r * (ks - 1) + 1;
    let oh = (h + 2 * p - span) / s + 1;
    let ow = (w + 2 * p - span) / s + 1;
    let mut g = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for m in 0..ks {
                        for n in 0..ks {
                            let y = (i * s + r * m) as isize - p as isize;
                            let x = (j * s + r * n) as isize - p as isize;
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                continue;
                            }
                            acc += f[(c * h + y as usize) * w + x as usize]
                                * k[((o * c_in + c) * ks + m) * ks + n];
                        }
                    }
                }
                g[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    (g, oh, ow)
}

#[test]
fn atrous_conv_matches_direct_oracle_for_rates_1_to_3() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for r in 1..=3 {
        for (pad, stride) in [(0, 1), (r, 1), (r, 2)] {
            let (ci, co) = (3, 2);
            let f = random(ci * 64, &mut rng);
            let k = random(co * ci * 9, &mut rng);
            let x = Tensor::from_vec(1, ci, 8, 8, f.clone()).unwrap();
            let g = atrous_conv2d(&x, &k, [co, ci, 3, 3], r, stride, pad).unwrap();
            let (want, oh, ow) = direct_conv(&f, ci, 8, 8, &k, co, 3, r, stride, pad);
            assert_eq!((g.h, g.w), (oh, ow));
            for (a, b) in g.data.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "rate {r}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn rate_one_is_plain_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random(64, &mut rng);
    let k = random(9, &mut rng);
    let x = Tensor::from_vec(1, 1, 8, 8, f.clone()).unwrap();
    let g = atrous_conv2d(&x, &k, [1, 1, 3, 3], 1, 1, 0).unwrap();
    // textbook valid cross-correlation
    for i in 0..6 {
        for j in 0..6 {
            let mut acc = 0.0;
            for m in 0..3 {
                for n in 0..3 {
                    acc += f[(i + m) * 8 + j + n] * k[m * 3 + n];
                }
            }
            assert!((g.data[i * 6 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn delta_kernel_is_identity_at_any_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = random(64, &mut rng);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let x = Tensor::from_vec(1, 1, 8, 8, f.clone()).unwrap();
    for r in 1..=3 {
        let g = atrous_conv2d(&x, &k, [1, 1, 3, 3], r, 1, r).unwrap();
        assert_eq!(g.data, f);
    }
}

#[test]
fn constant_input_ones_kernel_rate_two_gives_nine() {
    let x = Tensor::from_vec(1, 1, 8, 8, vec![1.0f64; 64]).unwrap();
    let g = atrous_conv2d(&x, &[1.0; 9], [1, 1, 3, 3], 2, 1, 2).unwrap();
    assert_eq!(g.data[4 * 8 + 4], 9.0);
    // a corner only sees four taps
    assert_eq!(g.data[0], 4.0);
}

#[test]
fn rate_two_reaches_a_five_by_five_neighbourhood() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k: Vec<f64> = (0..9).map(|_| rng.gen_range(0.5..1.5)).collect();
    let base = Tensor::from_vec(1, 1, 11, 11, vec![0.0f64; 121]).unwrap();
    let out0 = atrous_conv2d(&base, &k, [1, 1, 3, 3], 2, 1, 2)
        .unwrap()
        .data[5 * 11 + 5];
    let mut hits = Vec::new();
    for y in 0..11 {
        for x in 0..11 {
            let mut p = base.clone();
            p.data[y * 11 + x] = 1.0;
            let out = atrous_conv2d(&p, &k, [1, 1, 3, 3], 2, 1, 2).unwrap().data[5 * 11 + 5];
            if out != out0 {
                hits.push((y, x));
            }
        }
    }
    assert_eq!(hits.len(), 9);
    let (ys, xs): (Vec<usize>, Vec<usize>) = hits.iter().copied().unzip();
    assert_eq!((ys.iter().min(), ys.iter().max()), (Some(&3), Some(&7)));
    assert_eq!((xs.iter().min(), xs.iter().max()), (Some(&3), Some(&7)));
}

#[test]
fn atrous_conv_rejects_bad_shapes() {
    let x = Tensor::from_vec(1, 2, 8, 8, vec![0.0f64; 128]).unwrap();
    assert!(atrous_conv2d(&x, &[0.0; 9], [1, 1, 3, 3], 1, 1, 1).is_err());
    assert!(atrous_conv2d(&x, &[0.0; 16], [1, 1, 4, 4], 1, 1, 1).is_err());
    assert!(atrous_conv2d(&x, &[0.0; 18], [1, 2, 3, 3], 0, 1, 1).is_err());
    assert!(atrous_conv2d(&x, &[0.0; 18], [1, 2, 3, 3], 5, 1, 0).is_err());
}

proptest! {
    #![proptest_config(quiet(64))]
    #[test]
    fn conv_equals_oracle(
        seed in any::<u64>(),
        r in 1usize..4,
        s in 1usize..3,
        ci in 1usize..4,
        co in 1usize..3,
        h in 7usize..12,
        ks in prop::sample::select(vec![1usize, 3, 5]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = r * (ks - 1) / 2;
        let f = random(ci * h * h, &mut rng);
        let k = random(co * ci * ks * ks, &mut rng);
        let x = Tensor::from_vec(1, ci, h, h, f.clone()).unwrap();
        let g = atrous_conv2d(&x, &k, [co, ci, ks, ks], r, s, p).unwrap();
        let (want, _, _) = direct_conv(&f, ci, h, h, &k, co, ks, r, s, p);
        for (a, b) in g.data.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Central finite difference of `loss` w.r.t. `x[i]`.
fn fd(x: &mut [f64], i: usize, loss: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let v = x[i];
    x[i] = v + h;
    let a = loss(x);
    x[i] = v - h;
    let b = loss(x);
    x[i] = v;
    (a - b) / (2.0 * h)
}

fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= 1e-6 * a.abs().max(n.abs()) + 1e-9
}

/// Loss `sum(y * probe)` so the output gradient is `probe`.
fn dot(y: &Tensor<f64>, probe: &[f64]) -> f64 {
    y.data.iter().zip(probe).map(|(a, b)| a * b).sum()
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (k, s, p, d) in [
        (3, 1, 1, 1),
        (3, 2, 1, 1),
        (3, 1, 2, 2),
        (1, 1, 0, 1),
        (1, 2, 0, 1),
        (7, 2, 3, 1),
    ] {
        let mut conv = Conv2d::<f64>::new(2, 3, k, s, p, d, true, &mut rng);
        let xv = random(2 * 2 * 9 * 9, &mut rng);
        let x = Tensor::from_vec(2, 2, 9, 9, xv.clone()).unwrap();
        let y = conv.forward(&x).unwrap();
        let probe = random(y.data.len(), &mut rng);
        let gy = Tensor::from_vec(y.n, y.c, y.h, y.w, probe.clone()).unwrap();
        let gx = conv.backward(&x, &gy, true).unwrap().unwrap();
        let mut xs = xv.clone();
        let c2 = conv.clone();
        for i in (0..xs.len()).step_by(7) {
            let n = fd(&mut xs, i, &mut |v| {
                dot(
                    &c2.forward(&Tensor::from_vec(2, 2, 9, 9, v.to_vec()).unwrap())
                        .unwrap(),
                    &probe,
                )
            });
            assert!(close(gx.data[i], n), "dx k{k} s{s}: {} vs {n}", gx.data[i]);
        }
        let mut ws = conv.weight.value.clone();
        for i in (0..ws.len()).step_by(3) {
            let n = fd(&mut ws, i, &mut |v| {
                let mut c = c2.clone();
                c.weight.value = v.to_vec();
                dot(&c.forward(&x).unwrap(), &probe)
            });
            assert!(
                close(conv.weight.grad[i], n),
                "dw k{k}: {} vs {n}",
                conv.weight.grad[i]
            );
        }
        let bsum: Vec<f64> = (0..3)
            .map(|o| {
                probe[o * y.h * y.w..(o + 1) * y.h * y.w]
                    .iter()
                    .sum::<f64>()
                    + probe[(3 + o) * y.h * y.w..(4 + o) * y.h * y.w]
                        .iter()
                        .sum::<f64>()
            })
            .collect();
        for o in 0..3 {
            assert!(close(conv.bias.as_ref().unwrap().grad[o], bsum[o]));
        }
    }
}

#[test]
fn transposed_conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for (s, op) in [(2, 0), (4, 0), (2, 1)] {
        let mut conv = ConvTranspose2d::<f64>::new(3, 2, 3, s, 1, op, true, &mut rng);
        let xv = random(2 * 3 * 5 * 5, &mut rng);
        let x = Tensor::from_vec(2, 3, 5, 5, xv.clone()).unwrap();
        let y = conv.forward(&x).unwrap();
        let probe = random(y.data.len(), &mut rng);
        let gy = Tensor::from_vec(y.n, y.c, y.h, y.w, probe.clone()).unwrap();
        let gx = conv.backward(&x, &gy, true).unwrap().unwrap();
        let c2 = conv.clone();
        let mut xs = xv.clone();
        for i in (0..xs.len()).step_by(5) {
            let n = fd(&mut xs, i, &mut |v| {
                dot(
                    &c2.forward(&Tensor::from_vec(2, 3, 5, 5, v.to_vec()).unwrap())
                        .unwrap(),
                    &probe,
                )
            });
            assert!(close(gx.data[i], n));
        }
        let mut ws = conv.weight.value.clone();
        for i in (0..ws.len()).step_by(4) {
            let n = fd(&mut ws, i, &mut |v| {
                let mut c = c2.clone();
                c.weight.value = v.to_vec();
                dot(&c.forward(&x).unwrap(), &probe)
            });
            assert!(close(conv.weight.grad[i], n));
        }
    }
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for train in [true, false] {
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.gamma.value = random(3, &mut rng);
        bn.beta.value = random(3, &mut rng);
        bn.running_mean = random(3, &mut rng);
        bn.running_var = vec![0.5, 1.5, 2.0];
        let xv = random(2 * 3 * 4 * 4, &mut rng);
        let x = Tensor::from_vec(2, 3, 4, 4, xv.clone()).unwrap();
        let (y, cache) = bn.forward(&x, train).unwrap();
        let probe = random(y.data.len(), &mut rng);
        let frozen = bn.clone();
        let gx = bn.backward(
            &cache,
            &Tensor::from_vec(2, 3, 4, 4, probe.clone()).unwrap(),
        );
        let mut xs = xv.clone();
        for i in 0..xs.len() {
            let n = fd(&mut xs, i, &mut |v| {
                dot(
                    &frozen
                        .forward(&Tensor::from_vec(2, 3, 4, 4, v.to_vec()).unwrap(), train)
                        .unwrap()
                        .0,
                    &probe,
                )
            });
            assert!(close(gx.data[i], n), "train={train}: {} vs {n}", gx.data[i]);
        }
        let mut gs = frozen.gamma.value.clone();
        for i in 0..3 {
            let n = fd(&mut gs, i, &mut |v| {
                let mut b = frozen.clone();
                b.gamma.value = v.to_vec();
                dot(&b.forward(&x, train).unwrap().0, &probe)
            });
            assert!(close(bn.gamma.grad[i], n));
        }
    }
}

#[test]
fn pooling_and_resampling_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let pool = MaxPool2d {
        k: 3,
        stride: 2,
        pad: 1,
    };
    let xv = random(2 * 9 * 9, &mut rng);
    let x = Tensor::from_vec(1, 2, 9, 9, xv.clone()).unwrap();
    let (y, arg) = pool.forward(&x).unwrap();
    let probe = random(y.data.len(), &mut rng);
    let gx = pool.backward(
        x.shape(),
        &arg,
        &Tensor::from_vec(1, 2, y.h, y.w, probe.clone()).unwrap(),
    );
    let mut xs = xv.clone();
    for i in 0..xs.len() {
        let n = fd(&mut xs, i, &mut |v| {
            dot(
                &pool
                    .forward(&Tensor::from_vec(1, 2, 9, 9, v.to_vec()).unwrap())
                    .unwrap()
                    .0,
                &probe,
            )
        });
        assert!(close(gx.data[i], n));
    }

    let xv = random(2 * 5 * 5, &mut rng);
    let probe = random(2 * 17 * 17, &mut rng);
    let gx = upsample_bilinear_backward(
        &Tensor::from_vec(1, 2, 17, 17, probe.clone()).unwrap(),
        5,
        5,
    );
    let mut xs = xv.clone();
    for i in 0..xs.len() {
        let n = fd(&mut xs, i, &mut |v| {
            dot(
                &upsample_bilinear(&Tensor::from_vec(1, 2, 5, 5, v.to_vec()).unwrap(), 17, 17),
                &probe,
            )
        });
        assert!(close(gx.data[i], n));
    }
}
