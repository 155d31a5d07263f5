use agcm_core::tensor::battery::{op_cases, Reduction};
use agcm_core::tensor::{grad_check, ConvGeometry};
use agcm_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn matmul_loops(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a.data()[i * k + p] * b.data()[p * m + j];
            }
        }
    }
    out
}

fn conv_loops(x: &Tensor, k: &Tensor, stride: usize, dilation: usize, padding: usize) -> (Vec<usize>, Vec<f64>) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let wo = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky * dilation) as isize - padding as isize;
                            let xx = (ox * stride + kx * dilation) as isize - padding as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + y as usize) * w + xx as usize];
                            let kv = k.data()[((o * c_in + c) * kh + ky) * kw + kx];
                            acc += xv * kv;
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (vec![c_out, ho, wo], out)
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= tol, "element {i}: {g} vs {w}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(n in 1usize..6, k in 1usize..6, m in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[n, k], &mut rng);
        let b = rand_tensor(&[k, m], &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        prop_assert_eq!(tape.shape(c), &[n, m]);
        assert_close(tape.value(c).data(), &matmul_loops(&a, &b), 1e-12);
    }

    #[test]
    fn matmul_is_associative(n in 1usize..5, k in 1usize..5, m in 1usize..5, p in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[n, k], &mut rng);
        let b = rand_tensor(&[k, m], &mut rng);
        let c = rand_tensor(&[m, p], &mut rng);
        let mut tape = Tape::new();
        let (va, vb, vc) = (tape.constant(a), tape.constant(b), tape.constant(c));
        let ab = tape.matmul(va, vb).unwrap();
        let left = tape.matmul(ab, vc).unwrap();
        let bc = tape.matmul(vb, vc).unwrap();
        let right = tape.matmul(va, bc).unwrap();
        let (l, r) = (tape.value(left), tape.value(right));
        let scale = l.data().iter().chain(r.data()).fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(l.max_abs_diff(r) <= 1e-9 * scale);
    }

    #[test]
    fn hadamard_matches_loop_with_broadcast(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[rows, cols], &mut rng);
        let full = rand_tensor(&[rows, cols], &mut rng);
        let row = rand_tensor(&[1, cols], &mut rng);
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let (vf, vr) = (tape.constant(full.clone()), tape.constant(row.clone()));
        let y = tape.mul(va, vf).unwrap();
        let z = tape.mul(va, vr).unwrap();
        for i in 0..rows {
            for j in 0..cols {
                let e = i * cols + j;
                prop_assert_eq!(tape.value(y).data()[e], a.data()[e] * full.data()[e]);
                prop_assert_eq!(tape.value(z).data()[e], a.data()[e] * row.data()[j]);
            }
        }
    }

    #[test]
    fn conv2d_matches_nested_loops(
        c_in in 1usize..4, c_out in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, dilation in 1usize..3,
        padding in 0usize..3, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * padding > dilation * (k - 1) && w + 2 * padding > dilation * (k - 1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[c_in, h, w], &mut rng);
        let kern = rand_tensor(&[c_out, c_in, k, k], &mut rng);
        let mut tape = Tape::new();
        let (vx, vk) = (tape.constant(x.clone()), tape.constant(kern.clone()));
        let y = tape.conv2d(vx, vk, ConvGeometry::new(stride, dilation, padding)).unwrap();
        let (shape, want) = conv_loops(&x, &kern, stride, dilation, padding);
        prop_assert_eq!(tape.shape(y), shape.as_slice());
        assert_close(tape.value(y).data(), &want, 1e-12);
    }

    #[test]
    fn softmax_normalizes_and_ignores_shifts(rows in 1usize..5, cols in 1usize..6, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[rows, cols], -20.0, 20.0, &mut rng);
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += shift);
        let mut tape = Tape::new();
        let (vx, vs) = (tape.constant(x), tape.constant(shifted));
        let s = tape.softmax(vx, 1).unwrap();
        let t = tape.softmax(vs, 1).unwrap();
        for r in 0..rows {
            let row = &tape.value(s).data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        prop_assert!(tape.value(s).max_abs_diff(tape.value(t)) < 1e-12);
    }
}

#[test]
fn upsample_repeats_each_pixel() {
    let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let y = tape.upsample2x(v).unwrap();
    let want = [
        1.0, 1.0, 2.0, 2.0, //
        1.0, 1.0, 2.0, 2.0, //
        3.0, 3.0, 4.0, 4.0, //
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(tape.shape(y), &[1, 4, 4]);
    assert_eq!(tape.value(y).data(), &want);
}

#[test]
fn sum_of_squares_gradcheck_is_exact() {
    let err = grad_check(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            tape.sum_all(sq)
        },
        &Tensor::ones(&[3]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn every_op_passes_gradcheck_on_ten_seeds() {
    for case in op_cases() {
        for seed in 0..10 {
            for reduction in [Reduction::WeightedSum, Reduction::Projection] {
                let r = case.check(reduction, seed, None).unwrap();
                assert!(
                    r.max_rel_err < 1e-4,
                    "{} seed {seed} {reduction:?}: {:e}",
                    case.kind,
                    r.max_rel_err
                );
            }
        }
    }
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let x = Tensor::uniform(&[3, 4], 0.1, 1.0, &mut rng);
        let w = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let shift: f64 = rng.gen_range(-0.5..0.5);
        let err = grad_check(
            |tape, x| {
                let wv = tape.constant(w.clone());
                let h = tape.matmul(x, wv)?;
                let h = tape.add_scalar(h, shift)?;
                let s = tape.sigmoid(h)?;
                let e = tape.softmax(s, 0)?;
                let l = tape.log(x)?;
                let m = tape.mean_all(l)?;
                let t = tape.sum_all(e)?;
                let p = tape.mul(m, t)?;
                let q = tape.sqrt(x)?;
                let q = tape.sum_all(q)?;
                tape.add(p, q)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn injected_fault_is_detected() {
    let case = op_cases().into_iter().find(|c| c.kind.name() == "softmax").unwrap();
    let clean = case.check(Reduction::Projection, 0, None).unwrap();
    let faulty = case.check(Reduction::Projection, 0, Some(case.kind)).unwrap();
    assert!(clean.max_rel_err < 1e-6);
    assert!(faulty.max_rel_err > 1e-2);
}
