//! Dense f64 kernels the ops are built from. All loops keep the innermost
//! index contiguous so the autovectorizer can do its job.

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    matmul_acc(a, b, m, k, n, out);
}

/// out[m,n] += a[m,k] * b[n,k]^T  (rows of b are dotted against rows of a)
pub fn matmul_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            orow[j] += acc;
        }
    }
}

/// out[m,n] = a[m,k] * b[n,k]^T
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    matmul_bt_acc(a, b, m, k, n, out);
}

/// out[m,n] += a[t,m]^T * b[t,n], accumulating over the shared leading axis.
pub fn matmul_at_acc(a: &[f64], b: &[f64], t: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), t * m);
    debug_assert_eq!(b.len(), t * n);
    debug_assert_eq!(out.len(), m * n);
    for ti in 0..t {
        let arow = &a[ti * m..(ti + 1) * m];
        let brow = &b[ti * n..(ti + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[cols,rows] = a[rows,cols]^T
pub fn transpose(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Expand one [C, H, W] plane into 3x3 patch columns [C*9, H*W] with zero
/// padding 1. Column r = ci*9 + ky*3 + kx holds the input shifted by
/// (ky-1, kx-1).
pub fn im2col_3x3(input: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * 9 * h * w);
    let hw = h * w;
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst_base = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let dst = &mut cols[dst_base + y * w..dst_base + (y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col_3x3`: scatter-add patch-column gradients back onto the
/// input plane.
pub fn col2im_3x3(cols: &[f64], c: usize, h: usize, w: usize, dinput: &mut [f64]) {
    debug_assert_eq!(dinput.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * 9 * h * w);
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dinput[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let src_base = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &cols[src_base + y * w..src_base + (y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] += src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] += src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] += src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable in-place row softmax over an [n, n] score matrix.
pub fn softmax_rows(scores: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut scores[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_case() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 3.0]; // 2x3, use as B^T
        let mut bt = [0.0; 6];
        transpose(&b, 2, 3, &mut bt); // 3x2
        let mut want = [0.0; 4];
        matmul(&a, &bt, 2, 3, 2, &mut want);
        let mut got = [0.0; 4];
        matmul_bt(&a, &b, 2, 3, 2, &mut got);
        assert_eq!(got, want);
    }

    #[test]
    fn matmul_at_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3x2 (t=3, m=2)
        let b = [1.0, -1.0, 2.0, 0.5, 0.0, 2.0]; // 3x2 (t=3, n=2)
        let mut at = [0.0; 6];
        transpose(&a, 3, 2, &mut at); // 2x3
        let mut want = [0.0; 4];
        matmul(&at, &b, 2, 3, 2, &mut want);
        let mut got = [0.0; 4];
        matmul_at_acc(&a, &b, 3, 2, 2, &mut got);
        assert_eq!(got, want);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish x, y.
        let (c, h, w) = (2, 4, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * 9 * h * w).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c * 9 * h * w];
        im2col_3x3(&x, c, h, w, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; c * h * w];
        col2im_3x3(&y, c, h, w, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
        softmax_rows(&mut s, 2, 3);
        for r in 0..2 {
            let sum: f64 = s[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
