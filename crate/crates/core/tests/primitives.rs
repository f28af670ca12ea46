//! Primitive-level checks for the differentiation engine: worked examples,
//! scalar-loop oracles, and finite differences over random instances.

use dyngraph::diff::check::{check_leaves, DEFAULT_STEP, DEFAULT_TOLERANCE};
use dyngraph::diff::{Prng, Tape, Tensor, Var};
use dyngraph::Result;
use proptest::prelude::*;

const INSTANCES: usize = 100;

fn rand_tensor(rng: &mut Prng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Scalar objective with non-uniform weights so every output element matters.
fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = Tensor::from_fn(&shape, |i| 0.3 + ((i * 7919) % 13) as f64 / 10.0);
    let w = tape.input(w);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn assert_fd(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let errs = check_leaves(inputs, DEFAULT_STEP, f).unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < DEFAULT_TOLERANCE, "input {i}: relative error {e:e}");
    }
}

// ---- conv2d ---------------------------------------------------------------

fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, p: usize) -> Vec<f64> {
    let (bs, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let mut out = vec![0.0; bs * co * h * w];
    for n in 0..bs {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for dy in 0..ks {
                            for dx in 0..ks {
                                let iy = y as isize + dy as isize - p as isize;
                                let ix = xx as isize + dx as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((n * ci + c) * h + iy as usize) * w + ix as usize];
                                acc += xv * k.data()[((o * ci + c) * ks + dy) * ks + dx];
                            }
                        }
                    }
                    out[((n * co + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_zero_input_zero_bias_is_zero() {
    let mut rng = Prng::new(1);
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[2, 3, 5, 5]));
    let k = t.input(rand_tensor(&mut rng, &[4, 3, 3, 3]));
    let b = t.input(Tensor::zeros(&[4]));
    let y = t.conv2d(x, k, b, 1).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_identity_kernel() {
    let mut rng = Prng::new(2);
    let xin = rand_tensor(&mut rng, &[1, 1, 4, 6]);
    let mut t = Tape::new();
    let x = t.input(xin.clone());
    let k = t.input(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = t.input(Tensor::zeros(&[1]));
    let y = t.conv2d(x, k, b, 0).unwrap();
    assert_eq!(t.value(y), &xin);
}

#[test]
fn conv_center_of_ones_kernel_sums_neighbourhood() {
    let xin = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let mut t = Tape::new();
    let x = t.input(xin);
    let k = t.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = t.input(Tensor::zeros(&[1]));
    let y = t.conv2d(x, k, b, 1).unwrap();
    assert_eq!(t.value(y).data()[4], 45.0);
    // corner sees a 2x2 window: 1+2+4+5
    assert_eq!(t.value(y).data()[0], 12.0);
}

#[test]
fn conv_matches_scalar_loop_oracle() {
    let mut rng = Prng::new(3);
    // The last shapes are smaller than the 7x7 kernel.
    for &(ks, p, h, w) in &[(1, 0, 6, 5), (3, 1, 6, 5), (5, 2, 6, 5), (7, 3, 6, 5), (7, 3, 1, 1), (7, 3, 2, 3), (5, 2, 1, 4)] {
        let x = rand_tensor(&mut rng, &[2, 3, h, w]);
        let k = rand_tensor(&mut rng, &[4, 3, ks, ks]);
        let b = rand_tensor(&mut rng, &[4]);
        let mut t = Tape::new();
        let (xv, kv, bv) = (t.input(x.clone()), t.input(k.clone()), t.input(b.clone()));
        let y = t.conv2d(xv, kv, bv, p).unwrap();
        let want = conv_oracle(&x, &k, &b, p);
        for (a, w) in t.value(y).data().iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[1, 2, 4, 4]));
    let k = t.input(Tensor::zeros(&[1, 3, 3, 3]));
    let b = t.input(Tensor::zeros(&[1]));
    assert!(t.conv2d(x, k, b, 1).is_err());
    let k2 = t.input(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(t.conv2d(x, k2, b, 0).is_err(), "padding must preserve size");
    let k3 = t.input(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(t.conv2d(x, k3, b, 0).is_err(), "even kernel");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = Prng::new(4);
    for i in 0..INSTANCES {
        let ks = [1, 3, 5, 7][i % 4];
        let x = rand_tensor(&mut rng, &[2, 2, 2 + i % 3, 3]);
        let k = rand_tensor(&mut rng, &[2, 2, ks, ks]);
        let b = rand_tensor(&mut rng, &[2]);
        assert_fd(&[x, k, b], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], (ks - 1) / 2)?;
            weighted_sum(t, y)
        });
    }
}

// ---- channel pool -----------------------------------------------------------

#[test]
fn channel_pool_singleton_channel() {
    let mut rng = Prng::new(5);
    let xin = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    let mut t = Tape::new();
    let x = t.input(xin.clone());
    let y = t.channel_pool(x).unwrap();
    let out = t.value(y).data();
    for b in 0..2 {
        for cell in 0..9 {
            let v = xin.data()[b * 9 + cell];
            assert_eq!(out[b * 18 + cell], v);
            assert_eq!(out[b * 18 + 9 + cell], v);
        }
    }
}

#[test]
fn channel_pool_two_values() {
    let mut t = Tape::new();
    let x = t.input(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 3.0]).unwrap());
    let y = t.channel_pool(x).unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 3.0]);
}

#[test]
fn channel_pool_matches_oracle() {
    let mut rng = Prng::new(6);
    let xin = rand_tensor(&mut rng, &[2, 5, 4, 4]);
    let mut t = Tape::new();
    let x = t.input(xin.clone());
    let y = t.channel_pool(x).unwrap();
    for b in 0..2 {
        for cell in 0..16 {
            let vals: Vec<f64> = (0..5).map(|c| xin.data()[(b * 5 + c) * 16 + cell]).collect();
            let mean = vals.iter().sum::<f64>() / 5.0;
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((t.value(y).data()[b * 32 + cell] - mean).abs() < 1e-15);
            assert_eq!(t.value(y).data()[b * 32 + 16 + cell], max);
        }
    }
}

#[test]
fn channel_pool_max_gradient_goes_to_first_tie() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![1, 3, 1, 1], vec![2.0, 5.0, 5.0]).unwrap());
    let y = t.channel_pool(x).unwrap();
    let mx = t.narrow(y, 1, 1, 1).unwrap();
    let l = t.sum(mx).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn channel_pool_gradients_match_finite_differences() {
    let mut rng = Prng::new(7);
    for _ in 0..INSTANCES {
        let x = rand_tensor(&mut rng, &[2, 3, 3, 2]);
        assert_fd(&[x], |t, v| {
            let y = t.channel_pool(v[0])?;
            weighted_sum(t, y)
        });
    }
}

// ---- softmax ------------------------------------------------------------------

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.input(Tensor::full(&[4], 1.7));
    let y = t.softmax(x).unwrap();
    assert!(t.value(y).data().iter().all(|v| (v - 0.25).abs() < 1e-15));

    let x = t.input(Tensor::full(&[1], -3.0));
    let y = t.softmax(x).unwrap();
    assert_eq!(t.value(y).data(), &[1.0]);

    let x = t.input(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap());
    let y = t.softmax(x).unwrap();
    let d = t.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_is_stable_for_large_inputs() {
    let mut t = Tape::new();
    let x = t.input(Tensor::new(vec![3], vec![1000.0, 1001.0, 999.0]).unwrap());
    let y = t.softmax(x).unwrap();
    assert!((t.value(y).sum() - 1.0).abs() < 1e-12);
}

#[test]
fn masked_softmax_zeroes_masked_and_empty_rows() {
    let mut t = Tape::new();
    let x = t.input(Tensor::new(vec![2, 3], vec![0.5, 9.0, 0.5, 1.0, 2.0, 3.0]).unwrap());
    let y = t.masked_softmax(x, &[true, false, true, false, false, false]).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.0, 0.5, 0.0, 0.0, 0.0]);
}

#[test]
fn softmax_gradients_match_finite_differences() {
    let mut rng = Prng::new(8);
    for i in 0..INSTANCES {
        let x = rand_tensor(&mut rng, &[3, 4]);
        let mask: Vec<bool> = (0..12).map(|j| (i + j) % 3 != 0).collect();
        assert_fd(&[x.clone()], |t, v| {
            let y = t.softmax(v[0])?;
            weighted_sum(t, y)
        });
        assert_fd(&[x], |t, v| {
            let y = t.masked_softmax(v[0], &mask)?;
            weighted_sum(t, y)
        });
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..20),
        c in -50.0f64..50.0,
    ) {
        let n = xs.len();
        let mut t = Tape::new();
        let a = t.input(Tensor::new(vec![n], xs.clone()).unwrap());
        let b = t.input(Tensor::new(vec![n], xs.iter().map(|x| x + c).collect()).unwrap());
        let ya = t.softmax(a).unwrap();
        let yb = t.softmax(b).unwrap();
        prop_assert!((t.value(ya).sum() - 1.0).abs() < 1e-6);
        prop_assert!(t.value(ya).data().iter().all(|&v| v > 0.0 || xs.iter().any(|x| x - xs[0] > 700.0)));
        for (p, q) in t.value(ya).data().iter().zip(t.value(yb).data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}

// ---- gather -------------------------------------------------------------------

#[test]
fn gather_identity_permutation() {
    let mut rng = Prng::new(9);
    let xin = rand_tensor(&mut rng, &[2, 5, 3]);
    let mut t = Tape::new();
    let x = t.input(xin.clone());
    let idx = vec![(0..5).collect::<Vec<_>>(); 2];
    let y = t.gather_rows(x, &idx).unwrap();
    assert_eq!(t.value(y), &xin);
}

#[test]
fn gather_repeated_index_accumulates() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = t.gather_rows(x, &[vec![1, 1]]).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 4.0, 3.0, 4.0]);
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
}

#[test]
fn gather_rejects_out_of_range() {
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[1, 4, 2]));
    assert!(matches!(
        t.gather_rows(x, &[vec![0, 4]]),
        Err(dyngraph::Error::IndexOutOfRange { index: 4, rows: 4 })
    ));
}

#[test]
fn gather_matches_copy_oracle_and_conserves_gradient_mass() {
    let mut rng = Prng::new(10);
    for _ in 0..INSTANCES {
        let xin = rand_tensor(&mut rng, &[3, 7, 4]);
        let idx: Vec<Vec<usize>> = (0..3).map(|_| (0..5).map(|_| rng.below(7)).collect()).collect();
        let gin = rand_tensor(&mut rng, &[3, 5, 4]);
        let mut t = Tape::new();
        let x = t.leaf(xin.clone());
        let y = t.gather_rows(x, &idx).unwrap();
        for b in 0..3 {
            for (j, &r) in idx[b].iter().enumerate() {
                for c in 0..4 {
                    assert_eq!(t.value(y).data()[(b * 5 + j) * 4 + c], xin.data()[(b * 7 + r) * 4 + c]);
                }
            }
        }
        let w = t.input(gin.clone());
        let p = t.mul(y, w).unwrap();
        let l = t.sum(p).unwrap();
        let g = t.backward(l).unwrap();
        assert!((g.get(x).unwrap().sum() - gin.sum()).abs() < 1e-12);
    }
}

// ---- backward -------------------------------------------------------------------

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let l = t.sum(x).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_of_half_square_is_identity() {
    let xin = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
    let mut t = Tape::new();
    let x = t.leaf(xin.clone());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let l = t.scale(s, 0.5).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap(), &xin);
}

#[test]
fn backward_errors() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2]));
    assert!(t.backward(x).is_err(), "non-scalar loss");
    let l = t.sum(x).unwrap();
    assert!(t.backward(l).is_ok());
    assert!(t.backward(l).is_err(), "second backward on one tape");
}

#[test]
fn empty_tape_cannot_backward() {
    let mut other = Tape::new();
    let v = other.input(Tensor::scalar(0.0));
    let mut empty = Tape::new();
    assert!(empty.backward(v).is_err());
}

#[test]
fn non_finite_values_are_errors() {
    let mut t = Tape::new();
    let x = t.input(Tensor::full(&[2], f64::MAX));
    assert!(matches!(t.mul(x, x), Err(dyngraph::Error::NonFinite("mul"))));
}

// ---- remaining primitives --------------------------------------------------

#[test]
fn elementwise_and_broadcast_gradients() {
    let mut rng = Prng::new(11);
    for _ in 0..INSTANCES {
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 1, 4]);
        let c = rand_tensor(&mut rng, &[1, 3, 1]);
        assert_fd(&[a.clone(), b.clone(), c.clone()], |t, v| {
            let ab = t.mul(v[0], v[1])?;
            let s = t.add(ab, v[2])?;
            let s = t.scale(s, -1.3)?;
            weighted_sum(t, s)
        });
        assert_fd(&[b, c], |t, v| {
            let s = t.add(v[0], v[1])?;
            weighted_sum(t, s)
        });
    }
}

#[test]
fn activation_gradients() {
    let mut rng = Prng::new(12);
    for _ in 0..INSTANCES {
        let a = rand_tensor(&mut rng, &[3, 5]);
        assert_fd(&[a.clone()], |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y)
        });
        assert_fd(&[a], |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y)
        });
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = Prng::new(13);
    for _ in 0..INSTANCES {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        assert_fd(&[a, b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        });
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 4, 3]);
        assert_fd(&[a, b], |t, v| {
            let y = t.bmm(v[0], v[1])?;
            weighted_sum(t, y)
        });
    }
}

#[test]
fn shape_op_gradients() {
    let mut rng = Prng::new(14);
    for _ in 0..INSTANCES {
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 2, 4]);
        assert_fd(&[a.clone(), b], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            let y = t.permute(y, &[2, 0, 1])?;
            let y = t.reshape(y, &[8, 5])?;
            let y = t.narrow(y, 1, 1, 3)?;
            weighted_sum(t, y)
        });
        assert_fd(&[a.clone()], |t, v| {
            let m = t.mean_axis(v[0], 1)?;
            let s = t.sum_axis(v[0], 2)?;
            let m = weighted_sum(t, m)?;
            let s = weighted_sum(t, s)?;
            t.add(m, s)
        });
        let p = rand_tensor(&mut rng, &[1, 2, 4, 6]);
        assert_fd(&[p], |t, v| {
            let y = t.avg_pool2(v[0])?;
            weighted_sum(t, y)
        });
    }
}

#[test]
fn cross_entropy_values_and_gradients() {
    // uniform logits over 4 classes -> ln 4
    let mut t = Tape::new();
    let x = t.input(Tensor::zeros(&[3, 4]));
    let l = t.cross_entropy(x, &[0, 1, 3]).unwrap();
    assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-15);
    assert!(t.cross_entropy(x, &[0, 1, 4]).is_err());

    let mut rng = Prng::new(15);
    for _ in 0..INSTANCES {
        let a = Tensor::from_fn(&[3, 5], |_| rng.uniform(-3.0, 3.0));
        let labels: Vec<usize> = (0..3).map(|_| rng.below(5)).collect();
        assert_fd(&[a], |t, v| t.cross_entropy(v[0], &labels));
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = Prng::new(99);
        let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
        let k = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let mut t = Tape::new();
        let (x, k) = (t.leaf(x), t.leaf(k));
        let b = t.input(Tensor::zeros(&[4]));
        let y = t.conv2d(x, k, b, 1).unwrap();
        let y = t.sigmoid(y).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(l).item().to_bits(), g.get(k).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn parallel_and_sequential_conv_agree_bitwise() {
    let run = |par: bool| {
        dyngraph::par::set_parallel(par);
        let mut rng = Prng::new(5);
        let mut t = Tape::new();
        let x = t.leaf(rand_tensor(&mut rng, &[4, 3, 16, 16]));
        let k = t.leaf(rand_tensor(&mut rng, &[5, 3, 3, 3]));
        let b = t.leaf(rand_tensor(&mut rng, &[5]));
        let y = t.conv2d(x, k, b, 1).unwrap();
        let l = weighted_sum(&mut t, y).unwrap();
        let g = t.backward(l).unwrap();
        let out: Vec<u64> = g.get(k).unwrap().data().iter().map(|v| v.to_bits()).collect();
        dyngraph::par::set_parallel(true);
        out
    };
    assert_eq!(run(false), run(true));
}
