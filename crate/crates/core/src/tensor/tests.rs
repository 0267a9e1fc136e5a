use super::*;
use proptest::prelude::*;

fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
}

fn leaf(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::leaf(dims.to_vec(), data.to_vec(), true).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

/// Power series for erf, independent of the library routine.
fn erf_series(x: f64) -> f64 {
    let (mut term, mut sum) = (x, x);
    for n in 1..60 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

#[test]
fn zero_extent_shapes_are_rejected() {
    assert!(Shape::new([2, 0]).is_err());
    assert!(Tensor::<f32>::new([3], vec![1.0, 2.0]).is_err());
    assert_eq!(Shape::scalar().numel(), 1);
}

#[test]
fn matmul_small_examples() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 1], &[5.0, 6.0]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.dims(), [2, 1]);
    assert_eq!(c.data(), [17.0, 39.0]);

    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(a.matmul(&eye).unwrap().data(), a.data());
    assert_eq!(t(&[1, 1], &[3.0]).matmul(&t(&[1, 1], &[4.0])).unwrap().data(), [12.0]);
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let a = t(&[2, 3], &[0.0; 6]);
    let err = a.matmul(&t(&[2, 2], &[0.0; 4])).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn batched_matmul_matches_per_slice_oracle() {
    let a_data: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
    let b_data: Vec<f64> = (0..2 * 4 * 5).map(|i| (i as f64 * 0.11).cos()).collect();
    let c = t(&[2, 3, 4], &a_data).matmul(&t(&[2, 4, 5], &b_data)).unwrap();
    assert_eq!(c.dims(), [2, 3, 5]);
    for s in 0..2 {
        let want = naive_matmul(&a_data[s * 12..][..12], &b_data[s * 20..][..20], 3, 4, 5);
        close(&c.data()[s * 15..][..15], &want, 1e-12);
    }
    let w: Vec<f64> = b_data[..20].to_vec();
    let shared = t(&[2, 3, 4], &a_data).matmul(&t(&[4, 5], &w)).unwrap();
    for s in 0..2 {
        close(&shared.data()[s * 15..][..15], &naive_matmul(&a_data[s * 12..][..12], &w, 3, 4, 5), 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let p = t(&[2], &[0.0, 3f64.ln()]).softmax().unwrap();
    close(p.data(), &[0.25, 0.75], 1e-12);

    let x = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
    let shifted = t(&[2, 3], &[1001.0, 1002.0, 1003.0, -1.0, 0.5, 4.0]);
    let (a, b) = (x.softmax().unwrap(), shifted.softmax().unwrap());
    close(&a.data()[..3], &b.data()[..3], 1e-12);
    for row in a.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_non_finite_input() {
    let err = t(&[2], &[0.0, f64::NAN]).softmax().unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
}

#[test]
fn layer_norm_examples() {
    let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
    let gamma = t(&[4], &[1.0; 4]);
    let beta = t(&[4], &[0.0; 4]);
    let y = layer_norm(&x, &gamma, &beta, 0.0).unwrap();
    let s = 1.25f64.sqrt();
    close(y.data(), &[-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s], 1e-12);

    let constant = t(&[1, 3], &[7.0; 3]);
    let y = layer_norm(&constant, &t(&[3], &[2.0; 3]), &t(&[3], &[0.5, -1.0, 3.0]), 1e-5).unwrap();
    close(y.data(), &[0.5, -1.0, 3.0], 1e-9);
}

#[test]
fn gelu_matches_series_erf() {
    let xs = [-3.0, -1.0, -0.2, 0.0, 0.7, 1.0, 2.5];
    let y = t(&[7], &xs).gelu();
    let want: Vec<f64> = xs.iter().map(|x| 0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()))).collect();
    close(y.data(), &want, 1e-12);
    assert!((y.data()[5] - 0.841345).abs() < 1e-6);
}

#[test]
fn relu_and_reductions() {
    let x = t(&[4], &[-1.0, 0.0, 2.0, -3.5]);
    assert_eq!(x.relu().data(), [0.0, 0.0, 2.0, 0.0]);
    assert_eq!(x.sum().item().unwrap(), -2.5);
    assert_eq!(x.mean().item().unwrap(), -0.625);
}

#[test]
fn conv2d_patchify_examples() {
    let ones = t(&[1, 28, 28, 1], &[1.0; 784]);
    let k = t(&[7, 7, 1, 1], &[1.0; 49]);
    let y = conv2d_patchify(&ones, &k, &t(&[1], &[0.0])).unwrap();
    assert_eq!(y.dims(), [1, 4, 4, 1]);
    assert!(y.data().iter().all(|&v| v == 49.0));

    let x_data: Vec<f64> = (0..2 * 3 * 3 * 2).map(|i| i as f64).collect();
    let x = t(&[2, 3, 3, 2], &x_data);
    let identity = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let y = conv2d_patchify(&x, &identity, &t(&[2], &[0.0, 0.0])).unwrap();
    assert_eq!(y.dims(), [2, 3, 3, 2]);
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv2d_patchify_matches_naive_loops() {
    let (b, h, w, c, p, d) = (2, 8, 8, 2, 4, 3);
    let xd: Vec<f64> = (0..b * h * w * c).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
    let kd: Vec<f64> = (0..p * p * c * d).map(|i| ((i * 5 % 11) as f64 - 5.0) / 7.0).collect();
    let bias = [0.1, -0.2, 0.3];
    let y = conv2d_patchify(&t(&[b, h, w, c], &xd), &t(&[p, p, c, d], &kd), &t(&[d], &bias)).unwrap();
    let g = h / p;
    assert_eq!(y.dims(), [b, g, g, d]);
    for n in 0..b {
        for i in 0..g {
            for j in 0..g {
                for o in 0..d {
                    let mut acc = bias[o];
                    for u in 0..p {
                        for v in 0..p {
                            for ch in 0..c {
                                let xi = ((n * h + i * p + u) * w + j * p + v) * c + ch;
                                acc += xd[xi] * kd[((u * p + v) * c + ch) * d + o];
                            }
                        }
                    }
                    let got = y.data()[((n * g + i) * g + j) * d + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv2d_patchify_rejects_indivisible_input() {
    let x = t(&[1, 6, 6, 1], &[0.0; 36]);
    let err = conv2d_patchify(&x, &t(&[4, 4, 1, 1], &[0.0; 16]), &t(&[1], &[0.0])).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument { .. } | Error::Shape { .. }), "{err}");
}

#[test]
fn backward_of_sum_of_product() {
    let a = leaf(&[3], &[1.0, 2.0, 3.0]);
    let b = leaf(&[3], &[4.0, 5.0, 6.0]);
    a.mul(&b).unwrap().sum().backward().unwrap();
    assert_eq!(a.grad().unwrap(), [4.0, 5.0, 6.0]);
    assert_eq!(b.grad().unwrap(), [1.0, 2.0, 3.0]);
}

#[test]
fn backward_accumulates_over_shared_inputs_and_calls() {
    let x = leaf(&[2], &[1.5, -2.0]);
    let y = x.add(&x).unwrap().mul(&x).unwrap().sum();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), [6.0, -8.0]);
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), [12.0, -16.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn matmul_backward_example() {
    let a = leaf(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = leaf(&[2, 1], &[5.0, 6.0]);
    a.matmul(&b).unwrap().sum().backward().unwrap();
    assert_eq!(a.grad().unwrap(), [5.0, 6.0, 5.0, 6.0]);
    assert_eq!(b.grad().unwrap(), [4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_and_constant_losses() {
    let x = leaf(&[2], &[1.0, 2.0]);
    assert!(matches!(x.relu().backward(), Err(Error::Backward(_))));
    assert!(matches!(t(&[1], &[1.0]).backward(), Err(Error::Backward(_))));
}

#[test]
fn constants_record_no_history() {
    let a = t(&[2], &[1.0, 2.0]);
    let y = a.add(&a).unwrap();
    assert!(y.is_leaf());
    assert!(!y.requires_grad());
    let z = leaf(&[2], &[1.0, 2.0]).add(&a).unwrap();
    assert_eq!(z.op_name(), Some("add"));
}

#[test]
fn cross_entropy_examples() {
    let uniform = t(&[2, 4], &[0.0; 8]);
    let loss = cross_entropy(&uniform, &[0, 3]).unwrap();
    assert!((loss.item().unwrap() - 4f64.ln()).abs() < 1e-12);
    let err = cross_entropy(&uniform, &[0, 4]).unwrap_err();
    assert!(matches!(err, Error::LabelRange { label: 4, classes: 4 }), "{err}");
    let confident = t(&[1, 2], &[1000.0, 0.0]);
    assert!(cross_entropy(&confident, &[0]).unwrap().item().unwrap().abs() < 1e-12);
}

#[test]
fn shape_ops() {
    let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(x.transpose().unwrap().data(), [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    assert_eq!(x.select(1, 2).unwrap().data(), [3.0, 6.0]);
    assert_eq!(x.select(0, 1).unwrap().data(), [4.0, 5.0, 6.0]);
    assert!(x.reshape([4]).is_err());
    let joined = concat(&[x.clone(), x.clone()], 0).unwrap();
    assert_eq!(joined.dims(), [4, 3]);
    let e = t(&[2], &[7.0, 8.0]).expand_leading(3).unwrap();
    assert_eq!(e.dims(), [3, 2]);
    assert_eq!(e.data(), [7.0, 8.0, 7.0, 8.0, 7.0, 8.0]);
}

#[test]
fn repeated_forward_and_backward_are_bitwise_identical() {
    let run = || {
        let a = leaf(&[3, 4], &(0..12).map(|i| (i as f64).sin()).collect::<Vec<_>>());
        let b = leaf(&[4, 2], &(0..8).map(|i| (i as f64).cos()).collect::<Vec<_>>());
        let y = a.matmul(&b).unwrap().gelu().softmax().unwrap().sum();
        y.backward().unwrap();
        (y.item().unwrap().to_bits(), a.grad().unwrap(), b.grad().unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn matmul_is_associative(
        a in prop::collection::vec(-2.0f64..2.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 12),
        c in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let (a, b, c) = (t(&[2, 3], &a), t(&[3, 4], &b), t(&[4, 2], &c));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = v.len();
        let p = t(&[n], &v).softmax().unwrap();
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
