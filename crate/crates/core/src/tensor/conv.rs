use crate::error::{shape_err, Result};
use crate::tensor::linalg::{gemm, Mat};
use crate::tensor::{Real, Tensor, Var};

/// Output extent of a strided, zero-padded window: `floor((n + 2p - k) / s) + 1`.
pub fn conv_out_extent(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || n + 2 * padding < kernel {
        return None;
    }
    Some((n + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    /// Visits every (column-matrix index, input offset) pair that lies inside the input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let cols = self.cols();
        let plane = self.oh * self.ow;
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    for b in 0..self.batch {
                        let in_base = (b * self.c_in + c) * self.h * self.w;
                        for oi in 0..self.oh {
                            let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                            if ii < 0 || ii as usize >= self.h {
                                continue;
                            }
                            let col_base = row * cols + b * plane + oi * self.ow;
                            let in_row = in_base + ii as usize * self.w;
                            for oj in 0..self.ow {
                                let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                                if jj < 0 || jj as usize >= self.w {
                                    continue;
                                }
                                f(col_base + oj, in_row + jj as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<R: Real>(&self, input: &[R]) -> Vec<R> {
        let mut cols = vec![R::zero(); self.rows() * self.cols()];
        self.for_each_tap(|ci, xi| cols[ci] = input[xi]);
        cols
    }

    fn col2im<R: Real>(&self, cols: &[R]) -> Vec<R> {
        let mut out = vec![R::zero(); self.batch * self.c_in * self.h * self.w];
        self.for_each_tap(|ci, xi| out[xi] += cols[ci]);
        out
    }
}

impl<'t, R: Real> Var<'t, R> {
    /// 2-D cross-correlation of `[C_in, H, W]` or `[B, C_in, H, W]` input with a
    /// `[C_out, C_in, k, k]` kernel, zero padding on all borders.
    pub fn conv2d(
        &self,
        kernel: &Var<'t, R>,
        bias: Option<&Var<'t, R>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, R>> {
        let x = self.value();
        let wt = kernel.value();
        let xs = x.shape().to_vec();
        let (batch, c_in, h, w, batched) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [b, c, h, w] => (*b, *c, *h, *w, true),
            _ => return shape_err("conv2d", format!("input rank {}", xs.len())),
        };
        let (c_out, k) = match wt.shape() {
            [co, ci, k1, k2] if *ci == c_in && k1 == k2 => (*co, *k1),
            s => return shape_err("conv2d", format!("kernel {s:?} for input {xs:?}")),
        };
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return shape_err("conv2d", format!("bias {:?} for {c_out} outputs", b.shape()));
            }
        }
        let (Some(oh), Some(ow)) = (
            conv_out_extent(h, k, stride, padding),
            conv_out_extent(w, k, stride, padding),
        ) else {
            return shape_err(
                "conv2d",
                format!("non-positive output for {h}x{w}, k={k}, s={stride}, p={padding}"),
            );
        };
        let geo = Geometry {
            batch,
            c_in,
            h,
            w,
            k,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let (rows, cols) = (geo.rows(), geo.cols());
        let col_mat = geo.im2col(x.data());
        let mut prod = vec![R::zero(); c_out * cols];
        gemm(
            Mat::row_major(wt.data(), c_out, rows),
            Mat::row_major(&col_mat, rows, cols),
            &mut prod,
            false,
        );
        // [C_out, B, oh*ow] -> [B, C_out, oh*ow], plus bias
        let plane = oh * ow;
        let bias_v = bias.map(|b| b.value());
        let mut out = vec![R::zero(); batch * c_out * plane];
        for co in 0..c_out {
            let bv = bias_v.as_ref().map_or(R::zero(), |b| b.data()[co]);
            for b in 0..batch {
                let src = &prod[(co * batch + b) * plane..][..plane];
                let dst = &mut out[(b * c_out + co) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let out_shape = if batched {
            vec![batch, c_out, oh, ow]
        } else {
            vec![c_out, oh, ow]
        };
        let mut parents = vec![self.id, kernel.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        let has_bias = bias.is_some();
        let w_shape = wt.shape().to_vec();
        let need_input_grad = self.is_tracked();
        let need_kernel_grad = kernel.is_tracked();
        self.tape.push_op(
            "conv2d",
            Tensor::from_parts(out_shape, out),
            &parents,
            move |g| {
                let mut gmat = vec![R::zero(); c_out * cols];
                for co in 0..c_out {
                    for b in 0..batch {
                        gmat[(co * batch + b) * plane..][..plane]
                            .copy_from_slice(&g.data()[(b * c_out + co) * plane..][..plane]);
                    }
                }
                let gm = Mat::row_major(&gmat, c_out, cols);
                let gx = need_input_grad.then(|| {
                    let mut gcols = vec![R::zero(); rows * cols];
                    gemm(Mat::row_major(wt.data(), c_out, rows).t(), gm, &mut gcols, false);
                    Tensor::from_parts(xs.clone(), geo.col2im(&gcols))
                });
                let gw = need_kernel_grad.then(|| {
                    let col_mat = geo.im2col(x.data());
                    let mut gw = vec![R::zero(); c_out * rows];
                    gemm(gm, Mat::row_major(&col_mat, rows, cols).t(), &mut gw, false);
                    Tensor::from_parts(w_shape.clone(), gw)
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    let gb = (0..c_out)
                        .map(|co| gmat[co * cols..][..cols].iter().copied().sum())
                        .collect();
                    grads.push(Some(Tensor::from_parts(vec![c_out], gb)));
                }
                grads
            },
        )
    }
}
