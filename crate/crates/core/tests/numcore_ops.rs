use fpets_core::numcore::{grad_check, Real, Tape, Tensor, Var, ROW_NORMALIZE_EPS};
use fpets_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<Real> {
    let (n, din, dout) = (x.rows(), x.cols(), w.cols());
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for j in 0..dout {
            let mut acc = 0.0;
            for k in 0..din {
                acc += x.at(i, k) * w.at(k, j);
            }
            out[i * dout + j] = acc + b.data()[j];
        }
    }
    out
}

fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<Real> {
    let (t, cin) = (x.rows(), x.cols());
    let (ks, cout) = (k.shape()[0], k.shape()[2]);
    let pad = (ks as isize - 1) / 2;
    let mut out = vec![0.0; t * cout];
    for ti in 0..t {
        for o in 0..cout {
            let mut acc = 0.0;
            for d in 0..ks {
                let src = ti as isize + d as isize - pad;
                if src < 0 || src >= t as isize {
                    continue;
                }
                for c in 0..cin {
                    acc += x.at(src as usize, c) * k.data()[(d * cin + c) * cout + o];
                }
            }
            out[ti * cout + o] = acc + b.data()[o];
        }
    }
    out
}

fn run(f: impl FnOnce(&mut Tape) -> fpets_core::Result<Var>) -> fpets_core::Result<Tensor> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v).clone())
}

#[test]
fn dense_examples() {
    let y = run(|t| {
        let x = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let w = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        t.dense(x, w, b)
    })
    .unwrap();
    assert_eq!(y.data(), &[1.0, 2.0]);
    let y = run(|t| {
        let x = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let w = t.constant(Tensor::zeros(&[2, 2]));
        let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
        t.dense(x, w, b)
    })
    .unwrap();
    assert_eq!(y.data(), &[3.0, 4.0]);
}

#[test]
fn dense_shape_error_names_both_shapes() {
    let err = run(|t| {
        let x = t.constant(Tensor::zeros(&[2, 3]));
        let w = t.constant(Tensor::zeros(&[4, 2]));
        let b = t.constant(Tensor::zeros(&[2]));
        t.dense(x, w, b)
    })
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn dense_and_matmul_match_naive_loops_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let (n, din, dout) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
        let x = rand_tensor(&mut rng, &[n, din]);
        let w = rand_tensor(&mut rng, &[din, dout]);
        let b = rand_tensor(&mut rng, &[dout]);
        let y = run(|t| {
            let (x, w, b) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            t.dense(x, w, b)
        })
        .unwrap();
        assert_eq!(y.data(), naive_dense(&x, &w, &b).as_slice());

        let zero = Tensor::zeros(&[dout]);
        let mm = run(|t| {
            let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
            t.matmul(x, w)
        })
        .unwrap();
        assert_eq!(mm.data(), naive_dense(&x, &w, &zero).as_slice());
    }
    // the 2x3 * 3x2 case
    let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]);
    let w = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
    let y = run(|t| {
        let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
        t.matmul(x, w)
    })
    .unwrap();
    assert_eq!(y.data(), &[1.5, 6.5, 1.25, 0.875]);
}

#[test]
fn conv1d_examples() {
    let conv = |x: Vec<Real>, k: Vec<Real>| {
        let tl = x.len();
        run(|t| {
            let x = t.constant(Tensor::matrix(tl, 1, x));
            let k = t.constant(Tensor::new(vec![3, 1, 1], k).unwrap());
            let b = t.constant(Tensor::vector(vec![0.0]));
            t.conv1d(x, k, b)
        })
        .unwrap()
        .into_data()
    };
    assert_eq!(conv(vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]), vec![1.0, 2.0, 3.0]);
    assert_eq!(conv(vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0]), vec![3.0, 6.0, 5.0]);
    assert_eq!(conv(vec![5.0], vec![1.0, 1.0, 1.0]), vec![5.0]);
}

#[test]
fn conv1d_even_kernel_is_config_error() {
    let err = run(|t| {
        let x = t.constant(Tensor::zeros(&[4, 1]));
        let k = t.constant(Tensor::zeros(&[2, 1, 1]));
        let b = t.constant(Tensor::zeros(&[1]));
        t.conv1d(x, k, b)
    })
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn conv1d_matches_naive_loop_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..25 {
        let t_len = rng.gen_range(1..12);
        let (cin, cout) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let ks = [1, 3, 5][rng.gen_range(0..3)];
        let x = rand_tensor(&mut rng, &[t_len, cin]);
        let k = rand_tensor(&mut rng, &[ks, cin, cout]);
        let b = rand_tensor(&mut rng, &[cout]);
        let y = run(|t| {
            let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
            t.conv1d(xv, kv, bv)
        })
        .unwrap();
        assert_eq!(y.shape(), &[t_len, cout]);
        assert_eq!(y.data(), naive_conv(&x, &k, &b).as_slice());
    }
}

#[test]
fn gated_activation_examples() {
    let g = |a: Real, g: Real| {
        run(|t| {
            let a = t.constant(Tensor::scalar(a));
            let g = t.constant(Tensor::scalar(g));
            t.gated(a, g)
        })
        .unwrap()
        .item()
    };
    assert_eq!(g(0.0, 0.0), 0.0);
    assert!((g(30.0, 30.0) - 1.0).abs() < 1e-12);
    assert!((g(1.0, 0.0) - 0.380_797_077_977_882_3).abs() < 1e-12);
    let err = run(|t| {
        let a = t.constant(Tensor::zeros(&[2, 2]));
        let g = t.constant(Tensor::zeros(&[2, 3]));
        t.gated(a, g)
    });
    assert!(matches!(err, Err(Error::Shape { .. })));
}

fn pool(x: Vec<Real>) -> Vec<Real> {
    let n = x.len();
    run(|t| {
        let v = t.constant(Tensor::matrix(n, 1, x));
        t.avg_pool(v)
    })
    .unwrap()
    .into_data()
}

fn upsample(x: Vec<Real>, target: usize) -> fpets_core::Result<Vec<Real>> {
    let n = x.len();
    run(|t| {
        let v = t.constant(Tensor::matrix(n, 1, x));
        t.upsample(v, target)
    })
    .map(Tensor::into_data)
}

#[test]
fn pooling_and_upsampling_examples() {
    assert_eq!(pool(vec![1.0, 3.0, 5.0, 7.0]), vec![2.0, 6.0]);
    assert_eq!(pool(vec![4.0]), vec![4.0]);
    assert_eq!(pool(vec![1.0, 2.0, 3.0]), vec![1.5, 3.0]);
    assert_eq!(upsample(vec![2.0, 6.0], 4).unwrap(), vec![2.0, 2.0, 6.0, 6.0]);
    assert_eq!(upsample(vec![4.0], 1).unwrap(), vec![4.0]);
    assert_eq!(upsample(vec![1.5, 3.0], 3).unwrap(), vec![1.5, 1.5, 3.0]);
    assert!(upsample(vec![1.0, 2.0], 5).is_err());
    assert!(upsample(vec![1.0, 2.0], 2).is_err());
}

#[test]
fn upsample_inverts_pool_length_for_all_lengths() {
    for t_len in 1..200 {
        let x: Vec<Real> = (0..t_len).map(|i| i as Real).collect();
        let pooled = pool(x);
        assert_eq!(upsample(pooled, t_len).unwrap().len(), t_len);
    }
}

#[test]
fn embedding_gather_and_scatter() {
    let table = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let mut tape = Tape::new();
    let e = tape.leaf(table.clone(), true);
    let rows = tape.embedding(&[0], e).unwrap();
    assert_eq!(tape.value(rows).data(), &[1.0, 2.0]);
    let rows = tape.embedding(&[1, 1], e).unwrap();
    assert_eq!(tape.value(rows).data(), &[3.0, 4.0, 3.0, 4.0]);
    let loss = tape.sum(rows);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(e).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);

    let err = tape.embedding(&[0, 2, 3], e).unwrap_err();
    assert!(matches!(err, Error::Index { index: 3, position: 2, .. }), "{err}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let big = rand_tensor(&mut rng, &[7, 4]);
    let ids: Vec<usize> = (0..20).map(|_| rng.gen_range(0..7)).collect();
    let out = run(|t| {
        let e = t.constant(big.clone());
        t.embedding(&ids, e)
    })
    .unwrap();
    for (p, &id) in ids.iter().enumerate() {
        assert_eq!(out.row(p), big.row(id));
    }
}

#[test]
fn row_normalize_examples() {
    let rn = |rows: Vec<Vec<Real>>| {
        fpets_core::numcore::row_normalize(&Tensor::from_rows(&rows).unwrap(), ROW_NORMALIZE_EPS)
    };
    assert_eq!(rn(vec![vec![1.0, 3.0]]).unwrap().data(), &[0.25, 0.75]);
    assert_eq!(rn(vec![vec![2.0; 4]]).unwrap().data(), &[0.25; 4]);
    assert_eq!(rn(vec![vec![-1.0, 3.0]]).unwrap().data(), &[-0.5, 1.5]);
    let err = rn(vec![vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap_err();
    assert!(matches!(err, Error::DegenerateAttention { row: 1, .. }));
}

#[test]
fn row_normalize_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (r, c) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let a = rand_tensor(&mut rng, &[r, c]).map(|v| v + 1.5);
        let out = fpets_core::numcore::row_normalize(&a, ROW_NORMALIZE_EPS).unwrap();
        for i in 0..r {
            assert!((out.row(i).iter().sum::<Real>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn dropout_contract() {
    let x = Tensor::full(&[100, 100], 2.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let same = tape.dropout(v, 0.0, true, 1).unwrap();
    assert_eq!(tape.value(same), &x);
    let same = tape.dropout(v, 0.7, false, 1).unwrap();
    assert_eq!(tape.value(same), &x);
    assert!(tape.dropout(v, 1.0, true, 1).is_err());

    let a = tape.dropout(v, 0.5, true, 42).unwrap();
    let b = tape.dropout(v, 0.5, true, 42).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    // Monte Carlo over 10^4 positions: each output is 0 or 4 with mean 2 and
    // standard deviation 2, so the sample mean has standard error 0.02.
    let mean = tape.value(a).sum() / 1e4;
    assert!((mean - 2.0).abs() < 3.0 * 0.02, "mean {mean}");
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0; 6]), true);
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
    let sq = tape.square(x);
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);

    assert!(matches!(tape.backward(sq), Err(Error::Usage(_))));
}

#[test]
fn reused_values_accumulate_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![3.0]), true);
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[7.0]);
}

const H: Real = 1e-5;
const TOL: Real = 1e-4;

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> fpets_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Tape, Var) -> fpets_core::Result<Var>) {
    let report = grad_check(f, x, H, TOL).unwrap();
    assert!(report.passed, "{name}: {report:?}");
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..20u64 {
        let t_len = rng.gen_range(1..9);
        let (cin, cout) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let x = rand_tensor(&mut rng, &[t_len, cin]);
        let w = rand_tensor(&mut rng, &[cin, cout]);
        let b = rand_tensor(&mut rng, &[cout]);
        let k = rand_tensor(&mut rng, &[3, cin, cout]);

        let (wc, bc, kc) = (w.clone(), b.clone(), k.clone());
        check("dense/x", &x, |t, v| {
            let (w, b) = (t.constant(wc.clone()), t.constant(bc.clone()));
            let y = t.dense(v, w, b)?;
            weighted_sum(t, y, trial)
        });
        let xc = x.clone();
        check("dense/w", &w, |t, v| {
            let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
            let y = t.dense(x, v, b)?;
            weighted_sum(t, y, trial)
        });
        let wc2 = w.clone();
        check("dense/b", &b, |t, v| {
            let (x, w) = (t.constant(xc.clone()), t.constant(wc2.clone()));
            let y = t.dense(x, w, v)?;
            weighted_sum(t, y, trial)
        });
        check("conv/x", &x, |t, v| {
            let (k, b) = (t.constant(kc.clone()), t.constant(bc.clone()));
            let y = t.conv1d(v, k, b)?;
            weighted_sum(t, y, trial)
        });
        check("conv/k", &k, |t, v| {
            let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
            let y = t.conv1d(x, v, b)?;
            weighted_sum(t, y, trial)
        });
        let kc2 = k.clone();
        check("conv/b", &b, |t, v| {
            let (x, k) = (t.constant(xc.clone()), t.constant(kc2.clone()));
            let y = t.conv1d(x, k, v)?;
            weighted_sum(t, y, trial)
        });
        let other = rand_tensor(&mut rng, &[t_len, cin]);
        let oc = other.clone();
        check("gated/a", &x, |t, v| {
            let g = t.constant(oc.clone());
            let y = t.gated(v, g)?;
            weighted_sum(t, y, trial)
        });
        check("gated/g", &x, |t, v| {
            let a = t.constant(oc.clone());
            let y = t.gated(a, v)?;
            weighted_sum(t, y, trial)
        });
        check("matmul_bt/a", &x, |t, v| {
            let b = t.constant(oc.clone());
            let y = t.matmul_bt(v, b)?;
            weighted_sum(t, y, trial)
        });
        check("matmul_bt/b", &x, |t, v| {
            let a = t.constant(oc.clone());
            let y = t.matmul_bt(a, v)?;
            weighted_sum(t, y, trial)
        });
        check("pool+upsample", &x, |t, v| {
            let p = t.avg_pool(v)?;
            let u = t.upsample(p, t_len)?;
            let y = t.mul(u, v)?;
            weighted_sum(t, y, trial)
        });
        check("split/concat", &x, |t, v| {
            let a = t.split_cols(v, 0, 1)?;
            let y = t.concat_cols(v, a)?;
            let y = t.tanh(y);
            weighted_sum(t, y, trial)
        });
        check("pad/crop", &x, |t, v| {
            let p = t.pad_rows(v, t_len + 3)?;
            let s = t.sin(p);
            let y = t.crop_rows(s, t_len)?;
            weighted_sum(t, y, trial)
        });
        let table = rand_tensor(&mut rng, &[5, 3]);
        let ids: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..5)).collect();
        check("embedding", &table, |t, v| {
            let y = t.embedding(&ids, v)?;
            weighted_sum(t, y, trial)
        });
        let positive = x.map(|v| v.abs() + 0.5);
        check("row_normalize", &positive, |t, v| {
            let y = t.row_normalize(v, ROW_NORMALIZE_EPS)?;
            weighted_sum(t, y, trial)
        });
        check("row_softmax", &x, |t, v| {
            let y = t.row_softmax(v)?;
            weighted_sum(t, y, trial)
        });
        check("dropout", &x, |t, v| {
            let y = t.dropout(v, 0.3, true, trial)?;
            weighted_sum(t, y, trial)
        });
        check("unary chain", &x, |t, v| {
            let a = t.exp(v);
            let b = t.cos(a);
            let c = t.sigmoid(b);
            let d = t.softplus(c);
            let e = t.scale(d, 1.7);
            let f = t.add_scalar(e, -0.3);
            let g = t.abs(f);
            let h = t.sub(g, v)?;
            let m = t.mean(h);
            let sq = t.square(m);
            Ok(t.sum(sq))
        });
        let r = Tensor::vector((0..t_len).map(|_| rng.gen_range(0.5..3.0)).collect());
        let freqs = Tensor::vector((0..cin).map(|_| rng.gen_range(0.5..4.0)).collect());
        let fc = freqs.clone();
        check("positions/outer/frame_offsets", &r, |t, v| {
            let s = t.positions(v);
            let f = t.constant(fc.clone());
            let o = t.outer(s, f);
            let so = t.sin(o);
            let y = t.frame_offsets(s, 4);
            let y = t.square(y);
            let a = weighted_sum(t, so, trial)?;
            let b = weighted_sum(t, y, trial + 1)?;
            t.add(a, b)
        });
    }
}
