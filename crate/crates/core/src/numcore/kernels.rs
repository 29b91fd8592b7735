//! Raw slice kernels behind the tape operations.
//!
//! Every output element is accumulated in ascending reduction order starting
//! from `0.0`, with any bias added last, so the kernels agree bit-for-bit with
//! a naive triple loop. Row-parallel execution keeps that property because
//! rows are disjoint.

use rayon::prelude::*;

use super::tensor::Real;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

fn rows_par<F>(out: &mut [Real], cols: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [Real]) + Sync + Send,
{
    if cols == 0 {
        return;
    }
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `out[n x m] = a[n x k] * b[k x m]`
pub fn matmul(a: &[Real], b: &[Real], n: usize, k: usize, m: usize) -> Vec<Real> {
    let mut out = vec![0.0; n * m];
    rows_par(&mut out, m, n * k * m, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            let bp = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(bp) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `out[n x m] = a[n x k] * b[m x k]^T`
pub fn matmul_bt(a: &[Real], b: &[Real], n: usize, k: usize, m: usize) -> Vec<Real> {
    let mut out = vec![0.0; n * m];
    rows_par(&mut out, m, n * k * m, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let bj = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in ai.iter().zip(bj) {
                acc += x * y;
            }
            *o = acc;
        }
    });
    out
}

/// `out[k x m] += a[n x k]^T * g[n x m]`
pub fn matmul_at_acc(a: &[Real], g: &[Real], n: usize, k: usize, m: usize, out: &mut [Real]) {
    rows_par(out, m, n * k * m, |p, row| {
        for i in 0..n {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let gi = &g[i * m..(i + 1) * m];
            for (o, &gv) in row.iter_mut().zip(gi) {
                *o += av * gv;
            }
        }
    });
}

/// `out[n x k] += g[n x m] * b[k x m]^T`
pub fn matmul_bt_acc(g: &[Real], b: &[Real], n: usize, m: usize, k: usize, out: &mut [Real]) {
    rows_par(out, k, n * k * m, |i, row| {
        let gi = &g[i * m..(i + 1) * m];
        for (p, o) in row.iter_mut().enumerate() {
            let bp = &b[p * m..(p + 1) * m];
            let mut acc = 0.0;
            for (x, y) in gi.iter().zip(bp) {
                acc += x * y;
            }
            *o += acc;
        }
    });
}

/// Same-padded 1-D convolution over time.
///
/// `x` is `t x cin`, `kernel` is `k x cin x cout` and the result is `t x cout`.
/// Taps that fall outside `[0, t)` are skipped (zero padding).
pub fn conv1d(
    x: &[Real],
    kernel: &[Real],
    bias: &[Real],
    t: usize,
    cin: usize,
    cout: usize,
    k: usize,
) -> Vec<Real> {
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; t * cout];
    rows_par(&mut out, cout, t * k * cin * cout, |ti, row| {
        for d in 0..k {
            let src = ti + d;
            if src < pad || src - pad >= t {
                continue;
            }
            let xr = &x[(src - pad) * cin..(src - pad + 1) * cin];
            let kd = &kernel[d * cin * cout..(d + 1) * cin * cout];
            for (c, &xv) in xr.iter().enumerate() {
                let kc = &kd[c * cout..(c + 1) * cout];
                for (o, &kv) in row.iter_mut().zip(kc) {
                    *o += xv * kv;
                }
            }
        }
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    });
    out
}

/// Gradients of [`conv1d`] given upstream `g` (`t x cout`).
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[Real],
    kernel: &[Real],
    g: &[Real],
    t: usize,
    cin: usize,
    cout: usize,
    k: usize,
    dx: Option<&mut [Real]>,
    dk: Option<&mut [Real]>,
    db: Option<&mut [Real]>,
) {
    let pad = (k - 1) / 2;
    if let Some(dx) = dx {
        // dx[s, c] += sum_d sum_o g[s - d + pad, o] * K[d, c, o]
        rows_par(dx, cin, t * k * cin * cout, |s, row| {
            for d in 0..k {
                let ti = s + pad;
                if ti < d || ti - d >= t {
                    continue;
                }
                let gr = &g[(ti - d) * cout..(ti - d + 1) * cout];
                let kd = &kernel[d * cin * cout..(d + 1) * cin * cout];
                for (c, o) in row.iter_mut().enumerate() {
                    let kc = &kd[c * cout..(c + 1) * cout];
                    let mut acc = 0.0;
                    for (a, b) in gr.iter().zip(kc) {
                        acc += a * b;
                    }
                    *o += acc;
                }
            }
        });
    }
    if let Some(dk) = dk {
        // dK[d, c, o] += sum_t x[t + d - pad, c] * g[t, o]
        rows_par(dk, cout, t * k * cin * cout, |dc, row| {
            let (d, c) = (dc / cin, dc % cin);
            for ti in 0..t {
                let src = ti + d;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xv = x[(src - pad) * cin + c];
                if xv == 0.0 {
                    continue;
                }
                let gr = &g[ti * cout..(ti + 1) * cout];
                for (o, &gv) in row.iter_mut().zip(gr) {
                    *o += xv * gv;
                }
            }
        });
    }
    if let Some(db) = db {
        for gr in g.chunks(cout) {
            for (o, &gv) in db.iter_mut().zip(gr) {
                *o += gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        // b^T = [[5,7],[6,8]]
        assert_eq!(matmul_bt(&a, &b, 2, 2, 2), vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_hand_example() {
        let x = [1.0, 2.0, 3.0];
        let out = conv1d(&x, &[1.0, 1.0, 1.0], &[0.0], 3, 1, 1, 3);
        assert_eq!(out, vec![3.0, 6.0, 5.0]);
    }
}
