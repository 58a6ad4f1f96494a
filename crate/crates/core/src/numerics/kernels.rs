//! Raw slice kernels shared by the tape and the eager helpers.

/// Strided matrix view: element `(i, j)` lives at `ptr[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], width: usize) -> Self {
        Self { data, rs: width, cs: 1 }
    }

    /// The transpose of a row-major `[_, width]` matrix.
    pub fn cols(data: &'a [f64], width: usize) -> Self {
        Self { data, rs: 1, cs: width }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// `c = alpha * a[m,k] · b[k,n] + beta * c`, with `c` row-major of width `ldc`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!((m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm is bounds-checked above through
    // the view extents and the output extent.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// In-place numerically stable softmax of a contiguous row.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax along the middle axis of an `[outer, len, inner]` layout.
pub(crate) fn softmax_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> alloc::vec::Vec<f64> {
    let mut out = x.to_vec();
    if inner == 1 {
        for row in out.chunks_mut(len.max(1)) {
            softmax_row(row);
        }
        return out;
    }
    let mut buf = alloc::vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (t, b) in buf.iter_mut().enumerate() {
                *b = x[(o * len + t) * inner + i];
            }
            softmax_row(&mut buf);
            for (t, b) in buf.iter().enumerate() {
                out[(o * len + t) * inner + i] = *b;
            }
        }
    }
    out
}

pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
