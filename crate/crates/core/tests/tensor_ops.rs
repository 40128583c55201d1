use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vinet_core::tensor::{conv3d, maxpool3d, trilinear_upsample, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn at(t: &Tensor<f64>, idx: &[usize]) -> f64 {
    let mut flat = 0;
    for (i, (&d, &x)) in t.shape().iter().zip(idx).enumerate() {
        assert!(x < d, "index {i} out of range");
        flat = flat * d + x;
    }
    t.data()[flat]
}

/// Straight nested-loop convolution with explicit zero padding.
fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: [usize; 3], pad: [usize; 3]) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let out: Vec<usize> = (0..3).map(|a| (xs[a + 1] + 2 * pad[a] - ws[a + 2]) / stride[a] + 1).collect();
    let mut res = vec![];
    for co in 0..ws[0] {
        for ot in 0..out[0] {
            for oh in 0..out[1] {
                for ow in 0..out[2] {
                    let mut acc = b[co];
                    for ci in 0..ws[1] {
                        for kt in 0..ws[2] {
                            for kh in 0..ws[3] {
                                for kw in 0..ws[4] {
                                    let t = (ot * stride[0] + kt) as isize - pad[0] as isize;
                                    let h = (oh * stride[1] + kh) as isize - pad[1] as isize;
                                    let wi = (ow * stride[2] + kw) as isize - pad[2] as isize;
                                    if t < 0 || h < 0 || wi < 0 {
                                        continue;
                                    }
                                    let (t, h, wi) = (t as usize, h as usize, wi as usize);
                                    if t >= xs[1] || h >= xs[2] || wi >= xs[3] {
                                        continue;
                                    }
                                    acc += at(x, &[ci, t, h, wi]) * at(w, &[co, ci, kt, kh, kw]);
                                }
                            }
                        }
                    }
                    res.push(acc);
                }
            }
        }
    }
    res
}

#[test]
fn conv3d_matches_direct_summation() {
    let x = random(&[2, 4, 6, 6], 1);
    let w = random(&[3, 2, 3, 3, 3], 2);
    let b = random(&[3], 3);
    for (stride, pad) in [([1, 1, 1], [0, 0, 0]), ([1, 1, 1], [1, 1, 1]), ([2, 1, 2], [1, 0, 1])] {
        let got = conv3d(&x, &w, Some(&b), stride, pad).unwrap();
        let want = conv_direct(&x, &w, b.data(), stride, pad);
        assert_eq!(got.len(), want.len());
        for (g, e) in got.data().iter().zip(&want) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }
}

#[test]
fn sep_conv_same_padding_shape() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[1, 8, 8, 8], 4));
    let ws = tape.constant(random(&[1, 1, 1, 3, 3], 5));
    let wt = tape.constant(random(&[1, 1, 3, 1, 1], 6));
    let y = tape.sep_conv3d(x, ws, None, wt, None, [1, 1, 1], [1, 1, 1]).unwrap();
    assert_eq!(tape.shape(y), &[1, 8, 8, 8]);
}

#[test]
fn sep_conv_identity_kernels() {
    let mut s = vec![0.0; 9];
    s[4] = 1.0;
    let mut tape = Tape::<f64>::new();
    let input = random(&[1, 5, 6, 6], 7);
    let x = tape.constant(input.clone());
    let ws = tape.constant(Tensor::from_f64(&[1, 1, 1, 3, 3], &s).unwrap());
    let wt = tape.constant(Tensor::from_f64(&[1, 1, 3, 1, 1], &[0.0, 1.0, 0.0]).unwrap());
    let y = tape.sep_conv3d(x, ws, None, wt, None, [1, 1, 1], [1, 1, 1]).unwrap();
    assert_eq!(tape.value(y).data(), input.data());
}

#[test]
fn sep_conv_is_two_convs() {
    let input = random(&[2, 6, 7, 7], 8);
    let ws = random(&[4, 2, 1, 3, 3], 9);
    let bs = random(&[4], 10);
    let wt = random(&[3, 4, 3, 1, 1], 11);
    let bt = random(&[3], 12);
    let mid = conv3d(&input, &ws, Some(&bs), [1, 2, 2], [0, 1, 1]).unwrap();
    let want = conv3d(&mid, &wt, Some(&bt), [1, 1, 1], [1, 0, 0]).unwrap();

    let mut tape = Tape::new();
    let vars: Vec<_> = [input, ws, bs, wt, bt].into_iter().map(|t| tape.constant(t)).collect();
    let y = tape
        .sep_conv3d(vars[0], vars[1], Some(vars[2]), vars[3], Some(vars[4]), [1, 2, 2], [1, 1, 1])
        .unwrap();
    assert_eq!(tape.value(y), &want);
}

/// Per-cell evaluation of the half-pixel interpolation formula on one axis.
fn half_pixel(src: &[f64], out_len: usize, d: usize) -> (usize, usize, f64) {
    let n = src.len();
    let s = ((d as f64 + 0.5) * n as f64 / out_len as f64 - 0.5).max(0.0).min((n - 1) as f64);
    let lo = s.floor() as usize;
    (lo, (lo + 1).min(n - 1), s - lo as f64)
}

#[test]
fn upsample_2x2_to_4x4_matches_scalar_formula() {
    let grid = [[1.0, 2.0], [3.0, 4.0]];
    let input = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = trilinear_upsample(&input, [1, 4, 4]).unwrap();
    assert_eq!(out.shape(), &[1, 1, 4, 4]);
    for r in 0..4 {
        for c in 0..4 {
            let (r0, r1, fr) = half_pixel(&[0.0; 2], 4, r);
            let (c0, c1, fc) = half_pixel(&[0.0; 2], 4, c);
            let top = grid[r0][c0] * (1.0 - fc) + grid[r0][c1] * fc;
            let bottom = grid[r1][c0] * (1.0 - fc) + grid[r1][c1] * fc;
            let want = top * (1.0 - fr) + bottom * fr;
            assert!((out.data()[r * 4 + c] - want).abs() < 1e-12);
        }
    }
    // corners clamp to the source corners
    assert_eq!(out.data()[0], 1.0);
    assert_eq!(out.data()[15], 4.0);
}

#[test]
fn maxpool_values_one_to_eight() {
    let x = Tensor::<f64>::from_f64(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    let y = maxpool3d(&x, [2, 2, 2], [2, 2, 2]).unwrap();
    assert_eq!(y.data(), &[8.0]);
}

proptest! {
    #[test]
    fn identity_pointwise_kernel(c in 1usize..4, t in 1usize..5, h in 1usize..6, w in 1usize..6, seed: u64) {
        let x = random(&[c, t, h, w], seed);
        let mut k = vec![0.0; c * c];
        for i in 0..c {
            k[i * c + i] = 1.0;
        }
        let kernel = Tensor::from_f64(&[c, c, 1, 1, 1], &k).unwrap();
        let y = conv3d(&x, &kernel, None, [1, 1, 1], [0, 0, 0]).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn upsample_then_area_average_keeps_mean(t in 1usize..4, h in 2usize..7, w in 2usize..7, seed: u64) {
        let x = random(&[1, t, h, w], seed);
        let up = trilinear_upsample(&x, [2 * t, 2 * h, 2 * w]).unwrap();
        let mean_in = x.sum() / x.len() as f64;
        let mean_up = up.sum() / up.len() as f64;
        prop_assert!((mean_in - mean_up).abs() < 1e-5);
    }

    #[test]
    fn forward_values_stay_finite(seed: u64) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random(&[2, 3, 4, 4], seed).cast());
        let w = tape.constant(random(&[2, 2, 3, 3, 3], seed ^ 1).cast());
        let y = tape.conv3d(x, w, None, [1, 1, 1], [1, 1, 1]).unwrap();
        let r = tape.relu(y).unwrap();
        let s = tape.sigmoid(r).unwrap();
        prop_assert!(tape.value(s).is_finite());
    }
}
