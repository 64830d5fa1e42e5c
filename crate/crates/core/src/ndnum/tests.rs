use proptest::prelude::*;

use super::*;
use crate::error::PdmError;
use crate::rng::{normal_tensor, stream, uniform_tensor};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---- oracles (independent of the tape) ----------------------------------

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn([m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let mut s = 0.0;
        for p in 0..k {
            s += a.at(&[i, p]) * b.at(&[p, j]);
        }
        s
    })
}

fn conv_oracle(x: &Tensor, k: &Tensor, dil: usize) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = k.shape()[0];
    let mut out = Tensor::zeros([co, h, w]);
    for o in 0..co {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut s = 0.0;
                for i in 0..ci {
                    for ky in 0..3isize {
                        for kx in 0..3isize {
                            let sy = y + (ky - 1) * dil as isize;
                            let sx = xx + (kx - 1) * dil as isize;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            s += k.at(&[o, i, ky as usize, kx as usize])
                                * x.at(&[i, sy as usize, sx as usize]);
                        }
                    }
                }
                out.data_mut()[(o * h + y as usize) * w + xx as usize] = s;
            }
        }
    }
    out
}

// ---- elementwise ----------------------------------------------------------

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::scalar(0.0));
    let s = t.sigmoid(z).unwrap();
    assert_eq!(t.value(s).item().unwrap(), 0.5);

    let m = t.constant(Tensor::scalar(-3.0));
    let r = t.relu(m).unwrap();
    assert_eq!(t.value(r).item().unwrap(), 0.0);

    let a = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn elementwise_shape_mismatch_is_contract_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([2]));
    assert!(matches!(t.add(a, b), Err(PdmError::Contract(_))));
}

#[test]
fn sigmoid_and_relu_ranges() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![-40.0, -1.0, 0.0, 2.0, 30.0]));
    let s = t.sigmoid(x).unwrap();
    let r = t.relu(x).unwrap();
    assert!(t.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(t.value(r).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn broadcast_add_over_rows() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let b = t.constant(Tensor::from_vec(vec![10., 20., 30.]));
    let c = t.add(a, b).unwrap();
    assert_eq!(t.shape(c), &[2, 3]);
    assert_eq!(t.value(c).data(), &[11., 22., 33., 14., 25., 36.]);
}

// ---- matmul ---------------------------------------------------------------

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let a_val = Tensor::new([2, 2], vec![1.5, -2.0, 0.25, 4.0]).unwrap();
    let i2 = t.constant(Tensor::eye(2));
    let a = t.constant(a_val.clone());
    let ia = t.matmul(i2, a).unwrap();
    assert_eq!(t.value(ia), &a_val);

    let r = t.constant(Tensor::new([1, 2], vec![1., 2.]).unwrap());
    let c = t.constant(Tensor::new([2, 1], vec![3., 4.]).unwrap());
    let p = t.matmul(r, c).unwrap();
    assert_eq!(t.value(p).data(), &[11.0]);
    assert_eq!(t.shape(p), &[1, 1]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = stream(11, 0);
    let a = uniform_tensor(&mut rng, &[3, 4], 1.0);
    let b = uniform_tensor(&mut rng, &[4, 2], 1.0);
    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let bv = t.constant(b.clone());
    let p = t.matmul(av, bv).unwrap();
    assert!(t.value(p).max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
}

#[test]
fn matmul_inner_dimension_mismatch() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([3, 4]));
    let b = t.constant(Tensor::zeros([3, 2]));
    assert!(matches!(t.matmul(a, b), Err(PdmError::Contract(_))));
}

#[test]
fn batched_matmul_matches_per_batch() {
    let mut rng = stream(12, 0);
    let a = uniform_tensor(&mut rng, &[2, 3, 4], 1.0);
    let b = uniform_tensor(&mut rng, &[2, 4, 5], 1.0);
    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let bv = t.constant(b.clone());
    let p = t.matmul(av, bv).unwrap();
    for bi in 0..2 {
        let ab = Tensor::new([3, 4], a.data()[bi * 12..(bi + 1) * 12].to_vec()).unwrap();
        let bb = Tensor::new([4, 5], b.data()[bi * 20..(bi + 1) * 20].to_vec()).unwrap();
        let want = matmul_oracle(&ab, &bb);
        let got = Tensor::new([3, 5], t.value(p).data()[bi * 15..(bi + 1) * 15].to_vec()).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

// ---- conv2d ---------------------------------------------------------------

#[test]
fn conv_identity_kernel_reproduces_input() {
    let mut rng = stream(13, 0);
    let x = uniform_tensor(&mut rng, &[3, 4, 5], 1.0);
    let mut k = Tensor::zeros([3, 3, 3, 3]);
    for c in 0..3 {
        k.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let kv = t.constant(k);
    let y = t.conv2d(xv, kv, 1).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv_zero_kernel_gives_zero() {
    let mut rng = stream(14, 0);
    let x = uniform_tensor(&mut rng, &[2, 4, 4], 1.0);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let kv = t.constant(Tensor::zeros([5, 2, 3, 3]));
    let y = t.conv2d(xv, kv, 3).unwrap();
    assert_eq!(t.shape(y), &[5, 4, 4]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_sliding_window_oracle() {
    let mut rng = stream(15, 0);
    let x = uniform_tensor(&mut rng, &[2, 5, 5], 1.0);
    let k = uniform_tensor(&mut rng, &[3, 2, 3, 3], 1.0);
    for dil in 1..=3 {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let kv = t.constant(k.clone());
        let y = t.conv2d(xv, kv, dil).unwrap();
        assert!(
            t.value(y).max_abs_diff(&conv_oracle(&x, &k, dil)) < 1e-10,
            "dilation {dil}"
        );
    }
}

#[test]
fn conv_on_maps_smaller_than_the_dilation() {
    let mut rng = stream(21, 0);
    for (h, w) in [(1, 1), (2, 1), (1, 3), (2, 2)] {
        let x = uniform_tensor(&mut rng, &[2, h, w], 1.0);
        let k = uniform_tensor(&mut rng, &[2, 2, 3, 3], 1.0);
        for dil in 1..=3 {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let kv = t.constant(k.clone());
            let y = t.conv2d(xv, kv, dil).unwrap();
            assert!(t.value(y).max_abs_diff(&conv_oracle(&x, &k, dil)) < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_non_3x3_kernels() {
    let mut t = Tape::new();
    let xv = t.constant(Tensor::zeros([2, 4, 4]));
    let kv = t.constant(Tensor::zeros([2, 2, 5, 5]));
    assert!(matches!(t.conv2d(xv, kv, 1), Err(PdmError::Unsupported(_))));
}

#[test]
fn conv_batched_equals_per_sample() {
    let mut rng = stream(16, 0);
    let x = uniform_tensor(&mut rng, &[3, 2, 4, 3], 1.0);
    let k = uniform_tensor(&mut rng, &[2, 2, 3, 3], 1.0);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let kv = t.constant(k.clone());
    let y = t.conv2d(xv, kv, 2).unwrap();
    for n in 0..3 {
        let xs = Tensor::new([2, 4, 3], x.data()[n * 24..(n + 1) * 24].to_vec()).unwrap();
        let want = conv_oracle(&xs, &k, 2);
        assert_eq!(&t.value(y).data()[n * 24..(n + 1) * 24], want.data());
    }
}

// ---- reductions / concat --------------------------------------------------

#[test]
fn reduce_and_concat_examples() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::from_vec(vec![2.0, 2.0, 2.0]));
    let m = t.mean_all(c).unwrap();
    assert_eq!(t.value(m).item().unwrap(), 2.0);

    let a = t.constant(Tensor::zeros([4]));
    let b = t.constant(Tensor::zeros([6]));
    let ab = t.concat(&[a, b], 0).unwrap();
    assert_eq!(t.shape(ab), &[10]);
}

#[test]
fn sum_axis_matches_loop() {
    let mut rng = stream(17, 0);
    let x = uniform_tensor(&mut rng, &[3, 4], 1.0);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let s0 = t.sum(xv, 0).unwrap();
    let s1 = t.sum(xv, 1).unwrap();
    for j in 0..4 {
        let mut acc = 0.0;
        for i in 0..3 {
            acc += x.at(&[i, j]);
        }
        assert_eq!(t.value(s0).data()[j], acc);
    }
    for i in 0..3 {
        let mut acc = 0.0;
        for j in 0..4 {
            acc += x.at(&[i, j]);
        }
        assert_eq!(t.value(s1).data()[i], acc);
    }
}

#[test]
fn concat_rejects_inconsistent_parts() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([3, 3]));
    assert!(matches!(t.concat(&[a, b], 1), Err(PdmError::Contract(_))));
    assert!(t.concat(&[a, b], 0).is_ok());
}

#[test]
fn permute_and_narrow_index_correctly() {
    let x = Tensor::from_fn([2, 3, 4], |i| i as f64);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let p = t.permute(xv, &[2, 0, 1]).unwrap();
    assert_eq!(t.shape(p), &[4, 2, 3]);
    assert_eq!(t.value(p).at(&[3, 1, 2]), x.at(&[1, 2, 3]));
    let n = t.narrow(xv, 1, 1, 2).unwrap();
    assert_eq!(t.shape(n), &[2, 2, 4]);
    assert_eq!(t.value(n).at(&[1, 0, 2]), x.at(&[1, 1, 2]));
}

// ---- distances ------------------------------------------------------------

#[test]
fn distance_and_cosine_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::new([1, 2], vec![0., 0.]).unwrap());
    let b = t.constant(Tensor::new([1, 2], vec![3., 4.]).unwrap());
    let d = t.pairwise_euclidean(a, b).unwrap();
    assert_eq!(t.value(d).data(), &[5.0]);

    let u = t.constant(Tensor::from_vec(vec![0.3, -1.2, 2.0]));
    let c = t.cosine(u, u).unwrap();
    assert!(close(t.value(c).item().unwrap(), 1.0, 1e-15));

    let e1 = t.constant(Tensor::from_vec(vec![1., 0.]));
    let e2 = t.constant(Tensor::from_vec(vec![0., 1.]));
    let c = t.cosine(e1, e2).unwrap();
    assert_eq!(t.value(c).item().unwrap(), 0.0);
}

#[test]
fn cosine_zero_norm_is_degenerate() {
    let mut t = Tape::new();
    let u = t.constant(Tensor::from_vec(vec![0., 0.]));
    let v = t.constant(Tensor::from_vec(vec![1., 0.]));
    assert!(matches!(t.cosine(u, v), Err(PdmError::Degenerate(_))));
}

#[test]
fn pairwise_distances_are_symmetric_with_zero_diagonal() {
    let mut rng = stream(18, 0);
    let a = uniform_tensor(&mut rng, &[5, 3], 2.0);
    let mut t = Tape::new();
    let av = t.constant(a);
    let d = t.pairwise_euclidean(av, av).unwrap();
    let dv = t.value(d);
    for i in 0..5 {
        assert_eq!(dv.at(&[i, i]), 0.0);
        for j in 0..5 {
            assert!(dv.at(&[i, j]) >= 0.0);
            assert_eq!(dv.at(&[i, j]), dv.at(&[j, i]));
        }
    }
}

// ---- backward -------------------------------------------------------------

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(0.0));
    let s = t.sigmoid(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).item().unwrap(), 0.25);

    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(2.0));
    let y = t.param(Tensor::scalar(3.0));
    let p = t.mul(x, y).unwrap();
    let g = t.backward(p).unwrap();
    assert_eq!(g.wrt(x).item().unwrap(), 3.0);
    assert_eq!(g.wrt(y).item().unwrap(), 2.0);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros([3]));
    let y = t.relu(x).unwrap();
    assert!(matches!(t.backward(y), Err(PdmError::Contract(_))));
}

#[test]
fn unreachable_leaf_gets_zero_grad() {
    let mut t = Tape::new();
    let x = t.param(Tensor::from_vec(vec![1., 2.]));
    let unused = t.param(Tensor::from_vec(vec![5., 6., 7.]));
    let loss = t.sum_all(x).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.wrt(unused), Tensor::zeros([3]));
    assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
}

#[test]
fn composite_loss_passes_central_difference() {
    let mut rng = stream(19, 0);
    let w = uniform_tensor(&mut rng, &[4, 3], 1.0);
    let x = uniform_tensor(&mut rng, &[2, 4], 1.0);
    let err = grad_check(
        |t, x| {
            let wv = t.constant(w.clone());
            let h = t.matmul(x, wv)?;
            let s = t.sigmoid(h)?;
            let q = t.square(s)?;
            let e = t.exp(q)?;
            t.mean_all(e)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_examples() {
    let mut rng = stream(20, 0);
    let x = normal_tensor(&mut rng, &[6], 1.0);
    let err = grad_check(
        |t, x| {
            let sq = t.square(x)?;
            t.sum_all(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");

    let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(4.2))), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);

    let w = normal_tensor(&mut rng, &[6], 1.0);
    let err = grad_check(
        |t, x| {
            let wv = t.constant(w.clone());
            let p = t.mul(x, wv)?;
            let d = t.sum_all(p)?;
            t.sigmoid(d)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_visits_in_reverse_and_accumulates_fan_out() {
    // x feeds three consumers; the grad must be the sum of all three.
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(1.5));
    let a = t.square(x).unwrap();
    let b = t.scale(x, 3.0).unwrap();
    let c = t.exp(x).unwrap();
    let ab = t.add(a, b).unwrap();
    let abc = t.add(ab, c).unwrap();
    let g = t.backward(abc).unwrap();
    let want = 2.0 * 1.5 + 3.0 + 1.5f64.exp();
    assert!(close(g.wrt(x).item().unwrap(), want, 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..10_000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0, dil in 1usize..4) {
        let mut rng = stream(seed, 0);
        let x = uniform_tensor(&mut rng, &[2, 5, 4], 1.0);
        let y = uniform_tensor(&mut rng, &[2, 5, 4], 1.0);
        let k = uniform_tensor(&mut rng, &[3, 2, 3, 3], 1.0);
        let mut t = Tape::new();
        let kv = t.constant(k);
        let combo = Tensor::new([2, 5, 4], x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let cv = t.constant(combo);
        let xv = t.constant(x);
        let yv = t.constant(y);
        let lhs = t.conv2d(cv, kv, dil).unwrap();
        let cx = t.conv2d(xv, kv, dil).unwrap();
        let cy = t.conv2d(yv, kv, dil).unwrap();
        let ax = t.scale(cx, alpha).unwrap();
        let by = t.scale(cy, beta).unwrap();
        let rhs = t.add(ax, by).unwrap();
        prop_assert!(t.value(lhs).max_abs_diff(t.value(rhs)) < 1e-10);
    }

    #[test]
    fn broadcasting_leaves_left_operand_untouched(seed in 0u64..10_000) {
        let mut rng = stream(seed, 1);
        let a = uniform_tensor(&mut rng, &[3, 4], 1.0);
        let b = uniform_tensor(&mut rng, &[4], 1.0);
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let bv = t.constant(b);
        let _ = t.add(av, bv).unwrap();
        let _ = t.mul(av, bv).unwrap();
        prop_assert_eq!(t.value(av), &a);
    }

    #[test]
    fn fan_out_gradient_is_sum_of_branches(seed in 0u64..10_000) {
        let mut rng = stream(seed, 2);
        let x = uniform_tensor(&mut rng, &[5], 1.0);
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let f = t.sigmoid(xv).unwrap();
            let f = t.sum_all(f).unwrap();
            let g = t.square(xv).unwrap();
            let g = t.sum_all(g).unwrap();
            let loss = match which {
                0 => t.add(f, g).unwrap(),
                1 => f,
                _ => g,
            };
            t.backward(loss).unwrap().wrt(xv)
        };
        let both = grad_of(0);
        let f = grad_of(1);
        let g = grad_of(2);
        for i in 0..5 {
            prop_assert!((both.data()[i] - f.data()[i] - g.data()[i]).abs() < 1e-14);
        }
    }
}

#[test]
fn kink_margin_tracks_relu_and_selection_ties() {
    let x = Tensor::new([2, 3], vec![0.5, -0.2, 3.0, 1.0, 1.25, -4.0]).unwrap();
    let mut t = Tape::new();
    assert_eq!(t.kink_margin(), f64::INFINITY);
    let v = t.param(x.clone());
    t.relu(v).unwrap();
    assert_eq!(t.kink_margin(), 0.2);

    let mut t = Tape::new();
    let v = t.param(x.clone());
    t.max(v, 1).unwrap();
    // row gaps: 3.0 - 0.5, 1.25 - 1.0
    assert!((t.kink_margin() - 0.25).abs() < 1e-15);

    let mut t = Tape::new();
    let v = t.param(x.clone());
    t.masked_extreme(v, &[true, true, false, false, true, true], Extreme::Min)
        .unwrap();
    assert!((t.kink_margin() - 0.7).abs() < 1e-15);
    // the running minimum only shrinks, and constants never contribute
    let c = t.constant(Tensor::zeros([2]));
    t.relu(c).unwrap();
    assert!((t.kink_margin() - 0.7).abs() < 1e-15);
}
