//! Finite-difference checks of every analytic gradient in the model.

use reprogram_core::backbone::{FrozenBackbone, ToyBackbone, ToyBackboneSpec};
use reprogram_core::datamodel::Spectrogram;
use reprogram_core::reprogrammers::{Mode, Reprogrammer, ReprogrammerKind, ReprogrammerSpec};
use reprogram_core::rng::Lcg64;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= REL_TOL * analytic.abs().max(numeric.abs()) || diff <= 1e-9
}

fn random_spec(t: usize, f: usize, rng: &mut Lcg64) -> Spectrogram {
    Spectrogram::new((0..t * f).map(|_| rng.normal()).collect(), t, f, 10.0).unwrap()
}

fn objective(r: &Reprogrammer, xs: &[Spectrogram], ups: &[Vec<f64>], mode: Mode) -> f64 {
    let refs: Vec<&Spectrogram> = xs.iter().collect();
    let (outs, _) = r.forward_batch(&refs, mode).unwrap();
    outs.iter()
        .zip(ups)
        .map(|(o, u)| o.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn check_reprogrammer(spec: &ReprogrammerSpec, batch: usize, mode: Mode, seed: u64) {
    let mut rng = Lcg64::new(seed);
    let mut r = Reprogrammer::init(spec, seed).unwrap();
    // Non-zero noise and perturbed BN state so no gradient is trivially zero.
    for p in r.params_mut() {
        for v in p.data.iter_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    for b in r.buffers_mut() {
        for v in b.data.iter_mut() {
            *v = if b.name.ends_with("running_var") {
                0.5 + rng.next_f64()
            } else {
                0.2 * rng.normal()
            };
        }
    }
    let (t, f) = spec.dims;
    let xs: Vec<Spectrogram> = (0..batch).map(|_| random_spec(t, f, &mut rng)).collect();
    let ups: Vec<Vec<f64>> = (0..batch)
        .map(|_| (0..t * f).map(|_| rng.normal()).collect())
        .collect();
    let refs: Vec<&Spectrogram> = xs.iter().collect();
    let (_, cache) = r.forward_batch(&refs, mode).unwrap();
    let grads = r.backward_batch(&cache, &ups).unwrap();
    let n_params = r.params().len();
    assert_eq!(grads.len(), n_params);
    let mut checked = 0;
    for pi in 0..n_params {
        let name = r.params()[pi].name.clone();
        for j in 0..r.params()[pi].len() {
            let orig = r.params()[pi].data[j];
            r.params_mut()[pi].data[j] = orig + H;
            let up = objective(&r, &xs, &ups, mode);
            r.params_mut()[pi].data[j] = orig - H;
            let dn = objective(&r, &xs, &ups, mode);
            r.params_mut()[pi].data[j] = orig;
            let fd = (up - dn) / (2.0 * H);
            assert!(
                close(grads[pi][j], fd),
                "{:?} {mode:?} {name}[{j}]: analytic {} vs numeric {fd}",
                spec.kind,
                grads[pi][j]
            );
            checked += 1;
        }
    }
    assert_eq!(checked, r.param_count());
}

#[test]
fn noise_gradient_equals_upstream_sum() {
    let spec = ReprogrammerSpec::new(ReprogrammerKind::Noise, (6, 5));
    check_reprogrammer(&spec, 3, Mode::Train, 1);
}

#[test]
fn cnn_gradients_match_finite_differences_on_5x5() {
    for relu in [true, false] {
        let spec = ReprogrammerSpec {
            cnn_hidden: 4,
            cnn_relu: relu,
            ..ReprogrammerSpec::new(ReprogrammerKind::Cnn, (5, 5))
        };
        check_reprogrammer(&spec, 2, Mode::Train, 2);
    }
}

#[test]
fn unet_gradients_match_finite_differences_on_8x8_batch_statistics() {
    let spec = ReprogrammerSpec {
        unet_widths: [2, 3, 4],
        ..ReprogrammerSpec::new(ReprogrammerKind::Unet, (8, 8))
    };
    check_reprogrammer(&spec, 3, Mode::Train, 3);
}

#[test]
fn unet_gradients_match_finite_differences_on_8x16_running_statistics() {
    let spec = ReprogrammerSpec {
        unet_widths: [2, 2, 3],
        ..ReprogrammerSpec::new(ReprogrammerKind::Unet, (8, 16))
    };
    check_reprogrammer(&spec, 2, Mode::Eval, 4);
}

#[test]
fn toy_backbone_input_gradient_matches_finite_differences_on_32x32() {
    let backbone = ToyBackbone::new(ToyBackboneSpec {
        k_src: 12,
        ..ToyBackboneSpec::new(9, (32, 32), 12)
    })
    .unwrap();
    let fp = backbone.fingerprint();
    let mut rng = Lcg64::new(5);
    let x = random_spec(32, 32, &mut rng);
    let up: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
    let grad = backbone.backprop_input(&x, &up).unwrap();
    let f = |v: &[f64]| -> f64 {
        let s = backbone.score(&x.with_values(v.to_vec()).unwrap()).unwrap();
        s.iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let mut v = x.values().to_vec();
    for j in (0..v.len()).step_by(7) {
        let orig = v[j];
        v[j] = orig + H;
        let a = f(&v);
        v[j] = orig - H;
        let b = f(&v);
        v[j] = orig;
        let fd = (a - b) / (2.0 * H);
        assert!(
            close(grad[j], fd),
            "input[{j}]: analytic {} vs numeric {fd}",
            grad[j]
        );
    }
    for _ in 0..100 {
        backbone.backprop_input(&x, &up).unwrap();
    }
    assert_eq!(backbone.fingerprint(), fp);
}

/// All convolutions pass channel 0 through unchanged (or average all input
/// channels), batch-norm is the identity in evaluation mode, so the output
/// can be traced by hand through pooling, upsampling and concatenation.
#[test]
fn unet_pass_through_matches_hand_traced_topology() {
    let spec = ReprogrammerSpec {
        unet_widths: [1, 1, 1],
        ..ReprogrammerSpec::new(ReprogrammerKind::Unet, (8, 8))
    };
    let mut r = Reprogrammer::init(&spec, 0).unwrap();
    let Reprogrammer::Unet(u) = &mut r else {
        unreachable!()
    };
    for block in u.down.iter_mut().chain(u.up.iter_mut()) {
        let cin = block.conv.in_channels;
        block.conv.weight.data.fill(0.0);
        block.conv.bias.data.fill(0.0);
        // Centre tap of every input channel, averaged.
        for i in 0..cin {
            block.conv.weight.data[i * 9 + 4] = 1.0 / cin as f64;
        }
        block.bn.running_var.data.fill(1.0 - 1e-5);
    }
    // Non-negative input so every ReLU is the identity.
    let x: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64).collect();
    let out = r
        .forward(&Spectrogram::new(x.clone(), 8, 8, 10.0).unwrap())
        .unwrap();

    let pool = |m: &[f64], n: usize| -> Vec<f64> {
        let h = n / 2;
        (0..h * h)
            .map(|k| {
                let (r, c) = (2 * (k / h), 2 * (k % h));
                m[r * n + c]
                    .max(m[r * n + c + 1])
                    .max(m[(r + 1) * n + c])
                    .max(m[(r + 1) * n + c + 1])
            })
            .collect()
    };
    // Bilinear x2 with half-pixel centres and clamped edges.
    let up = |m: &[f64], n: usize| -> Vec<f64> {
        let tap = |d: usize| -> (usize, usize, f64) {
            let s = ((d as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut o = vec![0.0; 4 * n * n];
        for r in 0..2 * n {
            let (r0, r1, fr) = tap(r);
            for c in 0..2 * n {
                let (c0, c1, fc) = tap(c);
                let top = m[r0 * n + c0] * (1.0 - fc) + m[r0 * n + c1] * fc;
                let bot = m[r1 * n + c0] * (1.0 - fc) + m[r1 * n + c1] * fc;
                o[r * 2 * n + c] = top * (1.0 - fr) + bot * fr;
            }
        }
        o
    };
    let avg = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect() };
    let s0 = x.clone();
    let p0 = pool(&s0, 8);
    let s1 = p0.clone();
    let p1 = pool(&s1, 4);
    let s2 = p1.clone();
    let p2 = pool(&s2, 2);
    let u2 = avg(&up(&p2, 1), &s2);
    let u1 = avg(&up(&u2, 2), &s1);
    let expected = avg(&up(&u1, 4), &s0);
    for (i, (a, b)) in out.values().iter().zip(&expected).enumerate() {
        assert!((a - b).abs() < 1e-12, "pixel {i}: {a} vs {b}");
    }
}
