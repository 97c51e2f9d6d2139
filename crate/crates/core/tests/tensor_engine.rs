use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rescrnet::{Rng, Scalar, Tape, Tensor};

fn noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Depthwise then pointwise, by explicit loops with zero padding.
fn separable_oracle(x: &Tensor, dw: &Tensor, pw: &Tensor, d: usize) -> Tensor {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let k = dw.shape()[0];
    let cout = pw.shape()[1];
    let half = (k / 2) as isize;
    let mut mid = Tensor::zeros(s);
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            let si = i as isize + (u as isize - half) * d as isize;
                            let sj = j as isize + (v as isize - half) * d as isize;
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            acc += x.get(&[n, si as usize, sj as usize, ch]) * dw.get(&[u, v, ch]);
                        }
                    }
                    mid.set(&[n, i, j, ch], acc);
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[b, h, w, cout]);
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                for o in 0..cout {
                    let acc: Scalar = (0..c).map(|ch| mid.get(&[n, i, j, ch]) * pw.get(&[ch, o])).sum();
                    out.set(&[n, i, j, o], acc);
                }
            }
        }
    }
    out
}

#[test]
fn separable_matches_loop_oracle() {
    for seed in 0..5 {
        let x = noise(&[1, 5, 5, 2], seed);
        let dw = noise(&[3, 3, 2], seed + 100);
        let pw = noise(&[2, 3], seed + 200);
        let mut tape = Tape::new();
        let (xv, dv, pv) = (
            tape.constant(x.clone()).unwrap(),
            tape.constant(dw.clone()).unwrap(),
            tape.constant(pw.clone()).unwrap(),
        );
        let out = tape.separable_atrous_conv(xv, dv, pv, None, 2).unwrap();
        let diff = tape.value(out).max_abs_diff(&separable_oracle(&x, &dw, &pw, 2));
        assert!(diff < 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn separable_identity_and_parameter_count() {
    let x = noise(&[1, 4, 5, 3], 1);
    let mut dw = Tensor::zeros(&[3, 3, 3]);
    for c in 0..3 {
        dw.set(&[1, 1, c], 1.0);
    }
    let pw = Tensor::from_fn(&[3, 3], |i| (i / 3 == i % 3) as u8 as Scalar);
    let mut tape = Tape::new();
    let (xv, dv, pv) = (
        tape.constant(x.clone()).unwrap(),
        tape.constant(dw.clone()).unwrap(),
        tape.constant(pw.clone()).unwrap(),
    );
    let out = tape.separable_atrous_conv(xv, dv, pv, None, 3).unwrap();
    assert_eq!(tape.value(out), &x);
    // k²·Cin + Cin·Cout against k²·Cin·Cout for a full kernel.
    assert_eq!(dw.len() + pw.len(), 9 * 3 + 3 * 3);
    assert!(dw.len() + pw.len() < 9 * 3 * 3);
}

#[test]
fn dropout_mask_is_reproducible_and_unbiased() {
    let x = Tensor::from_fn(&[1, 4, 4, 8], |i| 0.5 + (i as Scalar * 0.37).sin());
    let run = |seed: u64| {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone()).unwrap();
        let mut rng = Rng::seed_from_u64(seed);
        let out = tape.spatial_dropout(v, 0.5, Some(&mut rng)).unwrap();
        tape.value(out).clone()
    };
    assert_eq!(run(42), run(42));

    let out = run(42);
    // Whole channels are dropped: per channel either all zero or all 2x.
    for c in 0..8 {
        let kept = out.get(&[0, 0, 0, c]) != 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let expect = if kept { 2.0 * x.get(&[0, i, j, c]) } else { 0.0 };
                assert_eq!(out.get(&[0, i, j, c]), expect);
            }
        }
    }

    let trials = 10_000;
    let mut mean = Tensor::zeros(x.shape());
    for seed in 0..trials {
        let o = run(seed);
        for (m, v) in mean.data_mut().iter_mut().zip(o.data()) {
            *m += v / trials as Scalar;
        }
    }
    let worst = mean
        .data()
        .iter()
        .zip(x.data())
        .map(|(m, v)| ((m - v) / v).abs())
        .fold(0.0, Scalar::max);
    assert!(worst < 0.02, "worst relative deviation {worst}");
}

#[test]
fn dropout_identity_cases() {
    let x = noise(&[2, 3, 3, 4], 9);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone()).unwrap();
    let mut rng = Rng::seed_from_u64(0);
    let a = tape.spatial_dropout(v, 0.0, Some(&mut rng)).unwrap();
    let b = tape.spatial_dropout(v, 0.5, None).unwrap();
    let c = tape.spatial_dropout(v, 0.0, None).unwrap();
    for o in [a, b, c] {
        assert_eq!(tape.value(o), &x);
    }
}

#[test]
fn concat_then_split_returns_input_gradients() {
    let a = noise(&[1, 2, 3, 2], 1);
    let b = noise(&[1, 2, 3, 3], 2);
    let mut tape = Tape::new();
    let (av, bv) = (tape.param(a.clone()).unwrap(), tape.param(b.clone()).unwrap());
    let cat = tape.concat_channels(&[av, bv]).unwrap();
    let left = tape.slice_channels(cat, 0, 2).unwrap();
    let right = tape.slice_channels(cat, 2, 3).unwrap();
    assert_eq!(tape.value(left), &a);
    assert_eq!(tape.value(right), &b);
    // loss = 3 Σ left + 5 Σ right, so the split gradients are exactly 3 and 5.
    let l = tape.sum(left).unwrap();
    let r = tape.sum(right).unwrap();
    let l = tape.affine(l, 3.0, 0.0).unwrap();
    let r = tape.affine(r, 5.0, 0.0).unwrap();
    let total = tape.add(l, r).unwrap();
    tape.backward(total).unwrap();
    assert_eq!(tape.grad(av).unwrap(), Tensor::full(a.shape(), 3.0));
    assert_eq!(tape.grad(bv).unwrap(), Tensor::full(b.shape(), 5.0));
}

#[test]
fn backward_example_polynomial() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0]);
    assert!(tape.backward(s).is_err());
}

#[test]
fn shape_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[2, 3, 4, 2])).unwrap();
    let s = tape.sum_last_dim(x).unwrap();
    assert_eq!(tape.value(s), &Tensor::full(&[2, 3, 4], 2.0));
    let e = tape.expand_last_dim(s).unwrap();
    assert_eq!(tape.shape(e), &[2, 3, 4, 1]);
    let t = tape.swap_axes(e, 1, 2).unwrap();
    assert_eq!(tape.shape(t), &[2, 4, 3, 1]);
    assert!(tape.transpose_axes(e, &[0, 1, 1, 3]).is_err());
    let other = tape.constant(Tensor::ones(&[2, 3, 4])).unwrap();
    assert!(tape.add(e, other).is_err());
}

fn conv_out(x: &Tensor, k: &Tensor, d: usize) -> Tensor {
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x.clone()).unwrap(), tape.constant(k.clone()).unwrap());
    let o = tape.conv2d(xv, kv, None, d).unwrap();
    tape.value(o).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 2 * 3 * 4), shift in -100.0f64..100.0) {
        let x = Tensor::new(&[1, 2, 3, 4], data.iter().map(|&v| v as Scalar).collect()).unwrap();
        let shifted = Tensor::from_fn(x.shape(), |i| x.data()[i] + shift as Scalar);
        let mut tape = Tape::new();
        let a = tape.constant(x).unwrap();
        let b = tape.constant(shifted).unwrap();
        let pa = tape.softmax_channels(a).unwrap();
        let pb = tape.softmax_channels(b).unwrap();
        let (pa, pb) = (tape.value(pa), tape.value(pb));
        for px in pa.data().chunks(4) {
            prop_assert!(px.iter().all(|&p| p >= 0.0));
            prop_assert!((px.iter().sum::<Scalar>() - 1.0).abs() < 1e-12);
        }
        for (qa, qb) in pa.data().chunks(4).zip(pb.data().chunks(4)) {
            prop_assert_eq!(rescrnet::metrics::argmax(qa), rescrnet::metrics::argmax(qb));
        }
    }

    #[test]
    fn same_padding_keeps_spatial_dims(h in 1usize..9, w in 1usize..9, half in 0usize..3, d in 1usize..5, seed in 0u64..1000) {
        let k = 2 * half + 1;
        let x = noise(&[1, h, w, 2], seed);
        let kern = noise(&[k, k, 2, 3], seed + 1);
        let out = conv_out(&x, &kern, d);
        prop_assert_eq!(out.shape(), &[1, h, w, 3]);
    }

    #[test]
    fn forward_ops_are_pure(seed in 0u64..1000) {
        let x = noise(&[1, 4, 4, 2], seed);
        let kern = noise(&[3, 3, 2, 2], seed + 7);
        prop_assert_eq!(conv_out(&x, &kern, 2), conv_out(&x, &kern, 2));
    }
}
