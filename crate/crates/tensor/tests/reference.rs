//! Forward ops against naive-loop reference implementations.

use cife_tensor::{NoiseRng, Tape, Tensor, TensorError};
use proptest::prelude::*;

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * k.data()[((co * cin + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out.data_mut()[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let (n, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let lk = k.shape()[1];
    let mut out = Tensor::zeros([n, lq, d]);
    for b in 0..n {
        for i in 0..lq {
            let scores: Vec<f64> = (0..lk)
                .map(|j| {
                    (0..d)
                        .map(|c| q.data()[(b * lq + i) * d + c] * k.data()[(b * lk + j) * d + c])
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..d {
                out.data_mut()[(b * lq + i) * d + c] = (0..lk)
                    .map(|j| exps[j] / total * v.data()[(b * lk + j) * d + c])
                    .sum();
            }
        }
    }
    out
}

#[test]
fn conv_sums_a_two_by_two_window() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap()).unwrap();
    let k = t.constant(Tensor::ones([1, 1, 2, 2])).unwrap();
    let y = t.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).data(), &[10.0]);
}

#[test]
fn pointwise_identity_kernel_is_identity() {
    let input: Tensor<f32> = NoiseRng::new(3, "x").normal_tensor([2, 1, 5, 3]);
    let mut t = Tape::new();
    let x = t.constant(input.clone()).unwrap();
    let k = t.constant(Tensor::ones([1, 1, 1, 1])).unwrap();
    let y = t.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &input);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = NoiseRng::new(11, "conv");
    let x64: Tensor<f64> = rng.normal_tensor([2, 3, 8, 8]);
    let k64: Tensor<f64> = rng.normal_tensor([4, 3, 3, 3]);
    for (stride, pad) in [(1, 1), (1, 0), (5, 0), (3, 2)] {
        let expected = naive_conv(&x64, &k64, stride, pad);
        let mut t = Tape::<f32>::new();
        let x = t.constant(x64.cast()).unwrap();
        let k = t.constant(k64.cast()).unwrap();
        let y = t.conv2d(x, k, None, stride, pad).unwrap();
        assert_eq!(t.shape(y), expected.shape());
        let diff = t.value(y).cast::<f64>().max_abs_diff(&expected);
        assert!(diff <= 1e-5, "stride {stride} pad {pad}: {diff}");
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros([1, 2, 4, 4])).unwrap();
    let wrong_cin = t.constant(Tensor::zeros([1, 3, 3, 3])).unwrap();
    assert!(matches!(
        t.conv2d(x, wrong_cin, None, 1, 1),
        Err(TensorError::Shape { .. })
    ));
    let k = t.constant(Tensor::zeros([1, 2, 3, 3])).unwrap();
    assert!(matches!(
        t.conv2d(x, k, None, 2, 0),
        Err(TensorError::InexactOutput { .. })
    ));
    let big = t.constant(Tensor::zeros([1, 2, 7, 7])).unwrap();
    assert!(t.conv2d(x, big, None, 1, 1).is_err());
}

#[test]
fn single_key_attention_returns_its_value() {
    let mut rng = NoiseRng::new(5, "attn1");
    let mut t = Tape::<f32>::new();
    let q = t.constant(rng.normal_tensor([1, 3, 4])).unwrap();
    let k = t.constant(rng.normal_tensor([1, 1, 4])).unwrap();
    let vt: Tensor<f32> = rng.normal_tensor([1, 1, 4]);
    let v = t.constant(vt.clone()).unwrap();
    let o = t.attention(q, k, v, false).unwrap();
    for row in t.value(o).data().chunks(4) {
        assert_eq!(row, vt.data());
    }
}

#[test]
fn orthogonal_query_averages_values() {
    let mut t = Tape::<f64>::new();
    let q = t.constant(Tensor::new([1, 1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let k = t.constant(Tensor::new([1, 3, 2], vec![0.0, 2.0, 0.0, -2.0, 0.0, 2.0]).unwrap()).unwrap();
    let v = t.constant(Tensor::new([1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap()).unwrap();
    let o = t.attention(q, k, v, false).unwrap();
    let out = t.value(o).data();
    assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 5.0).abs() < 1e-12);
}

#[test]
fn attention_matches_reference_composition() {
    let mut rng = NoiseRng::new(9, "attn");
    let q64: Tensor<f64> = rng.normal_tensor([1, 2, 4]);
    let k64: Tensor<f64> = rng.normal_tensor([1, 3, 4]);
    let v64: Tensor<f64> = rng.normal_tensor([1, 3, 4]);
    let expected = naive_attention(&q64, &k64, &v64);
    let mut t = Tape::<f32>::new();
    let q = t.constant(q64.cast()).unwrap();
    let k = t.constant(k64.cast()).unwrap();
    let v = t.constant(v64.cast()).unwrap();
    let o = t.attention(q, k, v, false).unwrap();
    assert!(t.value(o).cast::<f64>().max_abs_diff(&expected) <= 1e-6);
}

#[test]
fn empty_key_sequence_is_rejected() {
    let mut t = Tape::<f32>::new();
    let q = t.constant(Tensor::zeros([1, 2, 4])).unwrap();
    let k = t.constant(Tensor::zeros([1, 0, 4])).unwrap();
    let v = t.constant(Tensor::zeros([1, 0, 4])).unwrap();
    assert!(matches!(
        t.attention(q, k, v, false),
        Err(TensorError::EmptySequence { .. })
    ));
}

#[test]
fn causal_attention_ignores_future_keys() {
    let mut rng = NoiseRng::new(2, "causal");
    let base_k: Tensor<f64> = rng.normal_tensor([1, 4, 3]);
    let base_v: Tensor<f64> = rng.normal_tensor([1, 4, 3]);
    let q: Tensor<f64> = rng.normal_tensor([1, 4, 3]);
    let run = |k: Tensor<f64>, v: Tensor<f64>| {
        let mut t = Tape::<f64>::new();
        let (qv, kv, vv) = (
            t.constant(q.clone()).unwrap(),
            t.constant(k).unwrap(),
            t.constant(v).unwrap(),
        );
        let o = t.attention(qv, kv, vv, true).unwrap();
        t.value(o).clone()
    };
    let a = run(base_k.clone(), base_v.clone());
    let mut k2 = base_k.clone();
    let mut v2 = base_v.clone();
    // Perturb the last position only: rows 0..3 must not move.
    for c in 0..3 {
        k2.data_mut()[9 + c] += 1.0;
        v2.data_mut()[9 + c] -= 2.0;
    }
    let b = run(k2, v2);
    assert_eq!(&a.data()[..9], &b.data()[..9]);
    assert_ne!(&a.data()[9..], &b.data()[9..]);
}

#[test]
fn linear_matches_naive_dot_products() {
    let mut rng = NoiseRng::new(4, "lin");
    let x64: Tensor<f64> = rng.normal_tensor([3, 5]);
    let w64: Tensor<f64> = rng.normal_tensor([2, 5]);
    let b64: Tensor<f64> = rng.normal_tensor([2]);
    let mut t = Tape::<f32>::new();
    let (x, w, b) = (
        t.constant(x64.cast()).unwrap(),
        t.constant(w64.cast()).unwrap(),
        t.constant(b64.cast()).unwrap(),
    );
    let y = t.linear(x, w, Some(b)).unwrap();
    for i in 0..3 {
        for o in 0..2 {
            let expected: f64 = (0..5).map(|j| x64.data()[i * 5 + j] * w64.data()[o * 5 + j]).sum::<f64>()
                + b64.data()[o];
            let got = t.value(y).data()[i * 2 + o] as f64;
            assert!((got - expected).abs() <= 1e-6 * (1.0 + expected.abs()), "{got} vs {expected}");
        }
    }
}

#[test]
fn linear_identity_and_zero_input() {
    let mut rng = NoiseRng::new(4, "lin-id");
    let input: Tensor<f32> = rng.normal_tensor([2, 3, 4]);
    let mut t = Tape::<f32>::new();
    let x = t.constant(input.clone()).unwrap();
    let eye = t.constant(Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 })).unwrap();
    let zero_b = t.constant(Tensor::zeros([4])).unwrap();
    let y = t.linear(x, eye, Some(zero_b)).unwrap();
    assert_eq!(t.value(y), &input);

    let z = t.constant(Tensor::zeros([2, 4])).unwrap();
    let w = t.constant(rng.normal_tensor([3, 4])).unwrap();
    let bias: Tensor<f32> = rng.normal_tensor([3]);
    let b = t.constant(bias.clone()).unwrap();
    let y = t.linear(z, w, Some(b)).unwrap();
    for row in t.value(y).data().chunks(3) {
        assert_eq!(row, bias.data());
    }
    let bad = t.constant(Tensor::zeros([3, 5])).unwrap();
    assert!(t.linear(z, bad, None).is_err());
}

#[test]
fn group_norm_statistics() {
    let mut t = Tape::<f64>::new();
    let input: Tensor<f64> = NoiseRng::new(1, "gn").normal_tensor([2, 4, 2, 2]);
    let x = t.constant(input.scale_by(3.0).shift_by(1.5)).unwrap();
    let g = t.constant(Tensor::ones([4])).unwrap();
    let b = t.constant(Tensor::zeros([4])).unwrap();
    let y = t.group_norm(x, 2, g, b, 1e-5).unwrap();
    for group in t.value(y).data().chunks(8) {
        let mean = group.iter().sum::<f64>() / 8.0;
        let var = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() <= 1e-4, "var {var}");
    }
}

#[test]
fn group_norm_degenerate_cases() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full([1, 2, 3, 3], 4.2)).unwrap();
    let ones = t.constant(Tensor::ones([2])).unwrap();
    let zeros = t.constant(Tensor::zeros([2])).unwrap();
    let y = t.group_norm(x, 1, ones, zeros, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let noisy = t.constant(NoiseRng::new(0, "n").normal_tensor([1, 2, 3, 3])).unwrap();
    let beta = t.constant(Tensor::new([2], vec![0.25, -1.0]).unwrap()).unwrap();
    let y = t.group_norm(noisy, 2, zeros, beta, 1e-5).unwrap();
    let out = t.value(y).data();
    assert!(out[..9].iter().all(|&v| v == 0.25));
    assert!(out[9..].iter().all(|&v| v == -1.0));

    assert!(matches!(
        t.group_norm(noisy, 3, ones, zeros, 1e-5),
        Err(TensorError::Groups { .. })
    ));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = NoiseRng::new(21, "det");
        let mut t = Tape::<f32>::new();
        let x = t.constant(rng.normal_tensor([2, 3, 8, 8])).unwrap();
        let k = t.constant(rng.normal_tensor([4, 3, 3, 3])).unwrap();
        let y = t.conv2d(x, k, None, 1, 1).unwrap();
        let y = t.silu(y).unwrap();
        let y = t.permute(y, &[0, 2, 3, 1]).unwrap();
        let y = t.reshape(y, &[2, 64, 4]).unwrap();
        let kk = t.constant(rng.normal_tensor([2, 5, 4])).unwrap();
        let vv = t.constant(rng.normal_tensor([2, 5, 4])).unwrap();
        let o = t.attention(y, kk, vv, false).unwrap();
        t.value(o).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

trait Affine {
    fn scale_by(&self, c: f64) -> Self;
    fn shift_by(&self, c: f64) -> Self;
}

impl Affine for Tensor<f64> {
    fn scale_by(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }
    fn shift_by(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(lq in 1usize..5, lk in 1usize..7, d in 1usize..6, seed in 0u64..1000, causal: bool) {
        let lk = if causal { lq } else { lk };
        let mut rng = NoiseRng::new(seed, "softmax");
        let mut t = Tape::<f32>::new();
        let q = t.constant(rng.normal_tensor::<f32>([2, lq, d]).map(|v| v * 4.0)).unwrap();
        let k = t.constant(rng.normal_tensor([2, lk, d])).unwrap();
        let v = t.constant(rng.normal_tensor([2, lk, d])).unwrap();
        let o = t.attention(q, k, v, causal).unwrap();
        let probs = t.attention_weights(o).unwrap();
        for row in probs.chunks(lk) {
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6, "row sum {}", total);
        }
    }

    #[test]
    fn permute_round_trips(dims in proptest::collection::vec(1usize..4, 1..5), seed in 0u64..100) {
        let n = dims.len();
        let mut axes: Vec<usize> = (0..n).collect();
        NoiseRng::new(seed, "axes").shuffle(&mut axes);
        let mut inverse = vec![0; n];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let mut t = Tape::<f32>::new();
        let input = Tensor::from_fn(dims.clone(), |i| i as f32);
        let x = t.constant(input.clone()).unwrap();
        let y = t.permute(x, &axes).unwrap();
        let z = t.permute(y, &inverse).unwrap();
        prop_assert_eq!(t.value(z), &input);
    }
}
