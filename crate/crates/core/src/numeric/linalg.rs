//! Bounds-checked strided matrix views over flat slices and a safe GEMM.

use super::Real;

#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, R> {
    data: &'a [R],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, R: Real> MatRef<'a, R> {
    pub fn strided(data: &'a [R], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(fits(data.len(), rows, cols, rs, cs), "matrix view out of bounds");
        Self { data, rows, cols, rs, cs }
    }

    pub fn row_major(data: &'a [R], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Debug)]
pub struct MatMut<'a, R> {
    data: &'a mut [R],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, R: Real> MatMut<'a, R> {
    pub fn strided(data: &'a mut [R], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(fits(data.len(), rows, cols, rs, cs), "matrix view out of bounds");
        Self { data, rows, cols, rs, cs }
    }

    pub fn row_major(data: &'a mut [R], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }
}

fn fits(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> bool {
    rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < len
}

/// `c <- alpha * a * b + beta * c`. With `beta == 0` the prior contents of
/// `c` are ignored.
pub fn gemm<R: Real>(alpha: R, a: MatRef<'_, R>, b: MatRef<'_, R>, beta: R, mut c: MatMut<'_, R>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if gemv(alpha, &a, &b, beta, &mut c) {
        return;
    }
    // SAFETY: all three views were bounds-checked on construction and `c`
    // is a unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        R::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Contiguous dot product with eight independent partial sums.
fn dot<R: Real>(x: &[R], y: &[R]) -> R {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut lanes = [R::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (u, v) in xc.zip(yc) {
        for l in 0..8 {
            lanes[l] = lanes[l] + u[l] * v[l];
        }
    }
    let mut acc = lanes.iter().fold(R::zero(), |a, &b| a + b);
    for (&u, &v) in xr.iter().zip(yr) {
        acc = acc + u * v;
    }
    acc
}

/// Row `i` of a view as a contiguous vector.
fn row<'a, R: Real>(m: &MatRef<'a, R>, i: usize, buf: &'a mut Vec<R>) -> &'a [R] {
    if m.cs == 1 {
        &m.data[i * m.rs..i * m.rs + m.cols]
    } else {
        buf.clear();
        buf.extend((0..m.cols).map(|j| m.data[i * m.rs + j * m.cs]));
        buf
    }
}

fn store<R: Real>(slot: &mut R, alpha: R, v: R, beta: R) {
    *slot = if beta == R::zero() { alpha * v } else { alpha * v + beta * *slot };
}

/// Widest output dimension handled without the blocked kernel.
const SKINNY: usize = 2;

/// Products with few output rows or columns, which the blocked kernel would
/// pad to a full register tile after packing the large operand.
fn gemv<R: Real>(alpha: R, a: &MatRef<'_, R>, b: &MatRef<'_, R>, beta: R, c: &mut MatMut<'_, R>) -> bool {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m <= SKINNY && b.cs == 1 {
        let mut acc = vec![R::zero(); n];
        for i in 0..m {
            acc.iter_mut().for_each(|s| *s = R::zero());
            for kk in 0..k {
                let av = a.data[i * a.rs + kk * a.cs];
                let row = &b.data[kk * b.rs..kk * b.rs + n];
                for (s, &bv) in acc.iter_mut().zip(row) {
                    *s = *s + av * bv;
                }
            }
            for (j, &v) in acc.iter().enumerate() {
                store(&mut c.data[i * c.rs + j * c.cs], alpha, v, beta);
            }
        }
        true
    } else if m <= SKINNY && b.rs == 1 {
        let bt = b.t();
        let mut abuf = Vec::new();
        for i in 0..m {
            let ai = row(a, i, &mut abuf).to_vec();
            for j in 0..n {
                let v = dot(&ai, &bt.data[j * bt.rs..j * bt.rs + k]);
                store(&mut c.data[i * c.rs + j * c.cs], alpha, v, beta);
            }
        }
        true
    } else if n <= SKINNY && a.rs == 1 {
        let mut acc = vec![R::zero(); m];
        for j in 0..n {
            acc.iter_mut().for_each(|s| *s = R::zero());
            for kk in 0..k {
                let bv = b.data[kk * b.rs + j * b.cs];
                let col = &a.data[kk * a.cs..kk * a.cs + m];
                for (s, &av) in acc.iter_mut().zip(col) {
                    *s = *s + av * bv;
                }
            }
            for (i, &v) in acc.iter().enumerate() {
                store(&mut c.data[i * c.rs + j * c.cs], alpha, v, beta);
            }
        }
        true
    } else if n <= SKINNY && a.cs == 1 {
        let bt = b.t();
        let mut buf = Vec::new();
        let cols: Vec<Vec<R>> = (0..n).map(|j| row(&bt, j, &mut buf).to_vec()).collect();
        for i in 0..m {
            let ai = &a.data[i * a.rs..i * a.rs + k];
            for (j, col) in cols.iter().enumerate() {
                store(&mut c.data[i * c.rs + j * c.cs], alpha, dot(ai, col), beta);
            }
        }
        true
    } else {
        false
    }
}

/// Row-major `a[m,k] * b[k,n]` into a fresh buffer.
pub fn matmul<R: Real>(a: MatRef<'_, R>, b: MatRef<'_, R>) -> Vec<R> {
    let mut out = vec![R::zero(); a.rows * b.cols];
    gemm(R::one(), a, b, R::zero(), MatMut::row_major(&mut out, a.rows, b.cols));
    out
}
