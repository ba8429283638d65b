//! Numeric kernels shared by the autodiff graph and the cached inference path.

use super::Float;

/// Strided 2-D view into a flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { offset: self.offset, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    pub fn sub(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "sub-view out of range");
        Self { offset: self.offset + r0 * self.rs + c0 * self.cs, rows, cols, rs: self.rs, cs: self.cs }
    }

    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
    }
}

/// `C = alpha * A * B + beta * C` over strided views.
pub fn gemm<T: Float>(alpha: T, a: &[T], av: View, b: &[T], bv: View, beta: T, c: &mut [T], cv: View) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(cv.rows, av.rows, "gemm output rows");
    assert_eq!(cv.cols, bv.cols, "gemm output cols");
    assert!(av.end() <= a.len() && bv.end() <= b.len() && cv.end() <= c.len(), "gemm view out of bounds");
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] = if beta == T::zero() { T::zero() } else { c[idx] * beta };
            }
        }
        return;
    }
    // SAFETY: extents checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Row-major `[m,k] x [k,n]` (or `[n,k]^T` when `trans_b`) into a fresh buffer.
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, trans_b: bool) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let bv = if trans_b { View::row_major(n, k).t() } else { View::row_major(k, n) };
    gemm(T::one(), a, View::row_major(m, k), b, bv, T::zero(), &mut out, View::row_major(m, n));
    out
}

/// In-place numerically stable softmax over the first `valid` entries of a
/// row; entries past `valid` are zeroed.
pub fn softmax_prefix<T: Float>(row: &mut [T], valid: usize) {
    let (head, tail) = row.split_at_mut(valid);
    let max = head.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut total = T::zero();
    for v in head.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in head.iter_mut() {
        *v *= inv;
    }
    for v in tail.iter_mut() {
        *v = T::zero();
    }
}

pub fn log_softmax_at<T: Float>(row: &[T], index: usize) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[index] - lse
}

pub fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Float>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub const RMS_EPS: f64 = 1e-6;

/// RMS-normalizes each row of `x` (`cols` wide) and scales by `gain`.
/// Returns the output and the per-row inverse RMS.
pub fn rms_norm<T: Float>(x: &[T], gain: &[T], cols: usize) -> (Vec<T>, Vec<T>) {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    let eps = T::of(RMS_EPS);
    let n = T::of(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
        let ir = T::one() / (ms + eps).sqrt();
        inv.push(ir);
        for (o, (&v, &g)) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter().zip(gain)) {
            *o = v * ir * g;
        }
    }
    (out, inv)
}

/// Causal multi-head attention of `m` new queries over `n` keys, where query
/// `i` sits at absolute position `n - m + i` and may see keys `0..=n-m+i`.
/// All buffers are row-major with `d` columns.
pub fn attention_with_offset<T: Float>(q: &[T], k: &[T], v: &[T], m: usize, n: usize, d: usize, heads: usize) -> Vec<T> {
    assert!(n >= m && d % heads == 0);
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let offset = n - m;
    let mut out = vec![T::zero(); m * d];
    let mut scores = vec![T::zero(); m * n];
    for h in 0..heads {
        let qv = View::row_major(m, d).sub(0, h * dh, m, dh);
        let kv = View::row_major(n, d).sub(0, h * dh, n, dh).t();
        gemm(scale, q, qv, k, kv, T::zero(), &mut scores, View::row_major(m, n));
        for i in 0..m {
            softmax_prefix(&mut scores[i * n..(i + 1) * n], offset + i + 1);
        }
        let vv = View::row_major(n, d).sub(0, h * dh, n, dh);
        let ov = View::row_major(m, d).sub(0, h * dh, m, dh);
        gemm(T::one(), &scores, View::row_major(m, n), v, vv, T::zero(), &mut out, ov);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_by_hand() {
        let c = matmul(&[1.0f64, 2.0], &[3.0, 4.0], 1, 2, 1, false);
        assert_eq!(c, vec![11.0]);
        // [[1,2],[3,4]] x [[5,6],[7,8]]^T
        let c = matmul(&[1.0f64, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2, true);
        assert_eq!(c, vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn strided_views_address_head_slices() {
        // 2x4 matrix, take columns 2..4 of each row times identity.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let eye = [1.0f64, 0.0, 0.0, 1.0];
        let mut out = vec![0.0; 4];
        gemm(1.0, &a, View::row_major(2, 4).sub(0, 2, 2, 2), &eye, View::row_major(2, 2), 0.0, &mut out, View::row_major(2, 2));
        assert_eq!(out, vec![3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn softmax_prefix_masks_tail() {
        let mut row = [0.0f64, 0.0, 0.0, 100.0];
        softmax_prefix(&mut row, 3);
        for v in &row[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(row[3], 0.0);
    }

    #[test]
    fn silu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((num - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rms_norm_unit_gain_has_unit_rms() {
        let x = [3.0f64, -4.0, 1.0, 2.0];
        let (y, inv) = rms_norm(&x, &[1.0, 1.0], 2);
        assert_eq!(inv.len(), 2);
        for r in 0..2 {
            let ms: f64 = y[r * 2..r * 2 + 2].iter().map(|v| v * v).sum::<f64>() / 2.0;
            assert!((ms - 1.0).abs() < 1e-5);
        }
    }
}
