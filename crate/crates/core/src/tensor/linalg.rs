use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor, Var};

/// Strided matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, R> {
    pub data: &'a [R],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, R> Mat<'a, R> {
    pub fn row_major(data: &'a [R], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `out (+)= a · b` with `out` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm<R: Real>(a: Mat<'_, R>, b: Mat<'_, R>, out: &mut [R], accumulate: bool) {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let last = |x: &Mat<'_, R>| (x.rows - 1) * x.rs + (x.cols - 1) * x.cs;
    if k > 0 {
        assert!(last(&a) < a.data.len() && last(&b) < b.data.len());
    }
    let beta = if accumulate { R::one() } else { R::zero() };
    // SAFETY: extents and strides were checked against the slice lengths above.
    unsafe {
        R::gemm(
            m,
            k,
            n,
            R::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'t, R: Real> Var<'t, R> {
    /// Matrix product of `[M, K] x [K, N]`, or batched `[B, M, K] x [B, K, N]`.
    pub fn matmul(&self, other: &Var<'t, R>) -> Result<Var<'t, R>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return shape_err("matmul", format!("{sa:?} x {sb:?}")),
        };
        let mut out = vec![R::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                Mat::row_major(&a.data()[i * m * k..][..m * k], m, k),
                Mat::row_major(&b.data()[i * k * n..][..k * n], k, n),
                &mut out[i * m * n..][..m * n],
                false,
            );
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        self.tape.push_op(
            "matmul",
            Tensor::from_parts(out_shape, out),
            &[self.id, other.id],
            move |g| {
                let mut ga = vec![R::zero(); batch * m * k];
                let mut gb = vec![R::zero(); batch * k * n];
                for i in 0..batch {
                    let gm = Mat::row_major(&g.data()[i * m * n..][..m * n], m, n);
                    let am = Mat::row_major(&a.data()[i * m * k..][..m * k], m, k);
                    let bm = Mat::row_major(&b.data()[i * k * n..][..k * n], k, n);
                    gemm(gm, bm.t(), &mut ga[i * m * k..][..m * k], false);
                    gemm(am.t(), gm, &mut gb[i * k * n..][..k * n], false);
                }
                vec![
                    Some(Tensor::from_parts(sa.clone(), ga)),
                    Some(Tensor::from_parts(sb.clone(), gb)),
                ]
            },
        )
    }
}
