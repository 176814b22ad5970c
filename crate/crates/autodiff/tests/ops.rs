use ect_autodiff::kernels::{conv2d, conv_transpose2d};
use ect_autodiff::{grad_check, ConvTransposeSpec, GradCheckConfig, NormMode, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

const TOL: f64 = 1e-4;

fn cfg() -> GradCheckConfig {
    GradCheckConfig::default()
}

#[test]
fn conv_transpose_output_shapes() {
    let x = random(&[1, 2, 1, 1], 1);
    let w = random(&[2, 3, 7, 13], 2);
    let b = random(&[3], 3);
    let y = conv_transpose2d(&x, &w, &b, &ConvTransposeSpec::unit()).unwrap();
    assert_eq!(y.shape(), &[1, 3, 7, 13]);

    let spec = ConvTransposeSpec {
        stride: (2, 2),
        padding: (1, 1),
        output_padding: (1, 1),
    };
    let x = random(&[1, 1, 50, 100], 4);
    let w = random(&[1, 1, 3, 3], 5);
    let y = conv_transpose2d(&x, &w, &Tensor::zeros(&[1]), &spec).unwrap();
    assert_eq!(y.shape(), &[1, 1, 100, 200]);
}

#[test]
fn conv_transpose_unit_kernel_is_identity() {
    let x = random(&[2, 1, 4, 5], 7);
    let w = Tensor::full(&[1, 1, 1, 1], 1.0);
    let y = conv_transpose2d(&x, &w, &Tensor::zeros(&[1]), &ConvTransposeSpec::unit()).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_transpose_channel_mismatch_is_shape_error() {
    let x = random(&[1, 3, 2, 2], 1);
    let w = random(&[2, 1, 3, 3], 2);
    let err = conv_transpose2d(&x, &w, &Tensor::zeros(&[1]), &ConvTransposeSpec::unit()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("3 channels") && msg.contains("expects 2"), "{msg}");
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    for (seed, (stride, pad, op, k)) in [
        ((1, 1), (0, 0), (0, 0), (3, 3)),
        ((2, 2), (1, 1), (1, 1), (3, 3)),
        ((2, 2), (1, 1), (0, 1), (3, 3)),
        ((1, 1), (0, 0), (0, 0), (2, 4)),
    ]
    .into_iter()
    .enumerate()
    {
        let spec = ConvTransposeSpec {
            stride,
            padding: pad,
            output_padding: op,
        };
        let (h, w) = (4, 5);
        let x = random(&[2, 3, h, w], 10 + seed as u64);
        let wt = random(&[3, 2, k.0, k.1], 20 + seed as u64);
        let fx = conv_transpose2d(&x, &wt, &Tensor::zeros(&[2]), &spec).unwrap();
        let y = random(fx.shape(), 30 + seed as u64);
        let gy = conv2d(&y, &wt, stride, pad, (h, w)).unwrap();
        let lhs = fx.dot(&y);
        let rhs = x.dot(&gy);
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_gradients() {
    let specs = [
        (ConvTransposeSpec::unit(), [2, 3, 1, 1], [3, 4, 3, 5]),
        (
            ConvTransposeSpec {
                stride: (2, 2),
                padding: (1, 1),
                output_padding: (0, 1),
            },
            [2, 3, 3, 4],
            [3, 2, 3, 3],
        ),
    ];
    for (i, (spec, xs, ws)) in specs.into_iter().enumerate() {
        let inputs = vec![
            random(&xs, i as u64),
            random(&ws, 50 + i as u64),
            random(&[ws[1]], 90 + i as u64),
        ];
        let proj = {
            let out = conv_transpose2d(&inputs[0], &inputs[1], &inputs[2], &spec).unwrap();
            random(out.shape(), 777)
        };
        let report = grad_check(
            |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], v[2], spec)?;
                let p = t.constant(proj.clone());
                let prod = t.mul(y, p)?;
                Ok(t.sum(prod))
            },
            &inputs,
            &cfg(),
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "{report:?}");
    }
}

#[test]
fn conv1x1_identity_and_affine() {
    let x = random(&[2, 3, 4, 4], 3);
    let mut eye = Tensor::zeros(&[3, 3]);
    for c in 0..3 {
        eye.data_mut()[c * 3 + c] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(eye);
    let bv = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv2d_1x1(xv, wv, bv).unwrap();
    assert_eq!(tape.value(y), &x);

    let x1 = random(&[1, 1, 3, 3], 4);
    let w = tape.constant(Tensor::full(&[1, 1], 2.5));
    let b = tape.constant(Tensor::full(&[1], -0.25));
    let xv = tape.constant(x1.clone());
    let y = tape.conv2d_1x1(xv, w, b).unwrap();
    for (o, i) in tape.value(y).data().iter().zip(x1.data()) {
        assert!((o - (2.5 * i - 0.25)).abs() < 1e-15);
    }
}

#[test]
fn conv1x1_gradients() {
    let inputs = vec![random(&[2, 4, 3, 5], 1), random(&[3, 4], 2), random(&[3], 3)];
    let proj = random(&[2, 3, 3, 5], 4);
    let report = grad_check(
        |t, v| {
            let y = t.conv2d_1x1(v[0], v[1], v[2])?;
            let p = t.constant(proj.clone());
            let prod = t.mul(y, p)?;
            Ok(t.sum(prod))
        },
        &inputs,
        &cfg(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn batch_norm_train_statistics() {
    let x = uniform(&[4, 3, 5, 6], -3.0, 7.0, 9);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (y, stats) = tape.batch_norm2d(xv, g, b, NormMode::Train, 1e-5).unwrap();
    assert!(stats.is_some());
    let y = tape.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| y.data()[(n * 3 + c) * 30..(n * 3 + c + 1) * 30].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_eval_unit_stats_is_identity() {
    let x = random(&[2, 2, 3, 3], 5);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let (y, stats) = tape
        .batch_norm2d(
            xv,
            g,
            b,
            NormMode::Eval {
                mean: &[0.0, 0.0],
                var: &[1.0, 1.0],
            },
            1e-5,
        )
        .unwrap();
    assert!(stats.is_none());
    for (o, i) in tape.value(y).data().iter().zip(x.data()) {
        assert!((o - i).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_gradients_both_modes() {
    let inputs = vec![random(&[3, 2, 3, 4], 1), uniform(&[2], 0.5, 1.5, 2), random(&[2], 3)];
    let proj = random(&[3, 2, 3, 4], 4);
    for train in [true, false] {
        let report = grad_check(
            |t, v| {
                let mode = if train {
                    NormMode::Train
                } else {
                    NormMode::Eval {
                        mean: &[0.1, -0.2],
                        var: &[0.7, 1.3],
                    }
                };
                let (y, _) = t.batch_norm2d(v[0], v[1], v[2], mode, 1e-5)?;
                let p = t.constant(proj.clone());
                let prod = t.mul(y, p)?;
                Ok(t.sum(prod))
            },
            &inputs,
            &cfg(),
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "train={train}: {report:?}");
    }
}

#[test]
fn elementwise_gradients() {
    let inputs = vec![
        random(&[2, 3, 4, 4], 11),
        random(&[2, 3, 4, 4], 12),
        random(&[2, 3, 2, 3], 13),
    ];
    let proj = random(&[2, 3, 4, 4], 14);
    let report = grad_check(
        |t, v| {
            let r = t.relu(v[0]);
            let s = t.sigmoid(v[1]);
            let u = t.nearest_upsample(v[2], 4, 4)?;
            let a = t.add(r, s)?;
            let a = t.add(a, u)?;
            let sp = t.softplus(a);
            let p = t.constant(proj.clone());
            let prod = t.mul(sp, p)?;
            let total = t.sum(prod);
            Ok(t.scale(total, 0.7))
        },
        &inputs,
        &cfg(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
    assert!(report.checked >= 40);
}

#[test]
fn loss_gradients() {
    let pred = uniform(&[2, 1, 4, 5], 0.05, 0.95, 21);
    let target = uniform(&[2, 1, 4, 5], 0.0, 1.0, 22);
    let weights = random(&[3], 23);
    let report = grad_check(
        |t, v| {
            let y = t.constant(target.clone());
            let l1 = t.smooth_l1(v[0], y, 0.1)?;
            let fl = t.focal(v[0], y, 2.0, 0.75, 1e-7)?;
            let dc = t.dice(v[0], y, 1.0)?;
            let lam = t.softplus(v[1]);
            let mut acc = None;
            for (k, term) in [l1, fl, dc].into_iter().enumerate() {
                let w = t.select(lam, k)?;
                let wt = t.mul(w, term)?;
                acc = Some(match acc {
                    None => wt,
                    Some(a) => t.add(a, wt)?,
                });
            }
            Ok(acc.unwrap())
        },
        &[pred, weights],
        &GradCheckConfig {
            samples_per_input: 40,
            ..cfg()
        },
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn upsample_single_pixel_is_constant() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 0.3));
    let y = tape.nearest_upsample(x, 4, 4).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_identity_random_shapes(
        h in 1usize..5, w in 1usize..5, cin in 1usize..4, cout in 1usize..4,
        kh in 1usize..4, kw in 1usize..4, s in 1usize..3, seed in 0u64..1000,
    ) {
        let p = if kh > 1 && kw > 1 { 1 } else { 0 };
        let op = s - 1;
        let spec = ConvTransposeSpec { stride: (s, s), padding: (p, p), output_padding: (op, op) };
        prop_assume!(spec.output_size((h, w), (kh, kw)).is_ok());
        let x = random(&[1, cin, h, w], seed);
        let wt = random(&[cin, cout, kh, kw], seed + 1);
        let fx = conv_transpose2d(&x, &wt, &Tensor::zeros(&[cout]), &spec).unwrap();
        let y = random(fx.shape(), seed + 2);
        let gy = conv2d(&y, &wt, spec.stride, spec.padding, (h, w)).unwrap();
        let (lhs, rhs) = (fx.dot(&y), x.dot(&gy));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }
}
