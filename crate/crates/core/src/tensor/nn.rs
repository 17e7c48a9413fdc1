use crate::error::{shape_err, Error, Result};
use crate::tensor::array::split_axis;
use crate::tensor::{Real, Tensor, Var};

fn softmax_forward<R: Real>(
    x: &Tensor<R>,
    axis: usize,
    mask: Option<&[bool]>,
) -> Tensor<R> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let keep = |a: usize| mask.is_none_or(|m| m[a]);
    let mut out = vec![R::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let max = (0..len)
                .filter(|&a| keep(a))
                .map(|a| x.data()[at(a)])
                .fold(R::neg_infinity(), R::max);
            let mut total = R::zero();
            for a in (0..len).filter(|&a| keep(a)) {
                let e = (x.data()[at(a)] - max).exp();
                out[at(a)] = e;
                total += e;
            }
            for a in (0..len).filter(|&a| keep(a)) {
                out[at(a)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn softmax_backward<R: Real>(y: &Tensor<R>, g: &Tensor<R>, axis: usize) -> Tensor<R> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let mut gx = vec![R::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let dot: R = (0..len).map(|a| y.data()[at(a)] * g.data()[at(a)]).sum();
            for a in 0..len {
                gx[at(a)] = y.data()[at(a)] * (g.data()[at(a)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

impl<'t, R: Real> Var<'t, R> {
    /// Softmax along `axis`, computed with the row maximum subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, R>> {
        let x = self.value();
        if axis >= x.rank() {
            return shape_err("softmax", format!("axis {axis} for {:?}", x.shape()));
        }
        let y = softmax_forward(&x, axis, None);
        let saved = y.clone();
        self.tape.push_op("softmax", y, &[self.id], move |g| {
            vec![Some(softmax_backward(&saved, g, axis))]
        })
    }

    /// Softmax along `axis` where positions with `mask[a] == false` act as
    /// logits of negative infinity: they receive exactly zero weight and the
    /// remaining weights sum to one.
    pub fn masked_softmax(&self, axis: usize, mask: &[bool]) -> Result<Var<'t, R>> {
        let x = self.value();
        if axis >= x.rank() || mask.len() != x.shape()[axis] {
            return shape_err(
                "masked_softmax",
                format!("mask of {} on axis {axis} of {:?}", mask.len(), x.shape()),
            );
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Invalid("masked_softmax with every position masked".into()));
        }
        let y = softmax_forward(&x, axis, Some(mask));
        let saved = y.clone();
        self.tape.push_op("masked_softmax", y, &[self.id], move |g| {
            // masked outputs are exactly zero, so they drop out of the adjoint
            vec![Some(softmax_backward(&saved, g, axis))]
        })
    }

    /// Group normalization of `[C, H, W]` or `[B, C, H, W]` with per-channel
    /// affine `gamma`, `beta`.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Var<'t, R>,
        beta: &Var<'t, R>,
        eps: R,
    ) -> Result<Var<'t, R>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let (batch, c, spatial) = match xs.as_slice() {
            [c, h, w] => (1, *c, h * w),
            [b, c, h, w] => (*b, *c, h * w),
            _ => return shape_err("group_norm", format!("input {xs:?}")),
        };
        if groups == 0 || c % groups != 0 {
            return shape_err("group_norm", format!("{c} channels into {groups} groups"));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return shape_err("group_norm", "affine parameters must have one entry per channel");
        }
        let (gm, bt) = (gamma.value(), beta.value());
        let cpg = c / groups;
        let n = cpg * spatial;
        let inv_n = R::one() / R::lit(n as f64);
        let mut xhat = vec![R::zero(); x.len()];
        let mut inv_std = vec![R::zero(); batch * groups];
        for b in 0..batch {
            for gi in 0..groups {
                let base = (b * c + gi * cpg) * spatial;
                let seg = &x.data()[base..base + n];
                let mean = seg.iter().copied().sum::<R>() * inv_n;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_n;
                let is = R::one() / (var + eps).sqrt();
                inv_std[b * groups + gi] = is;
                for (dst, &v) in xhat[base..base + n].iter_mut().zip(seg) {
                    *dst = (v - mean) * is;
                }
            }
        }
        let mut out = vec![R::zero(); x.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for k in base..base + spatial {
                    out[k] = gm.data()[ch] * xhat[k] + bt.data()[ch];
                }
            }
        }
        self.tape.push_op(
            "group_norm",
            Tensor::from_parts(xs.clone(), out),
            &[self.id, gamma.id, beta.id],
            move |g| {
                let gd = g.data();
                let mut gx = vec![R::zero(); xhat.len()];
                let mut ggamma = vec![R::zero(); c];
                let mut gbeta = vec![R::zero(); c];
                for b in 0..batch {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for k in base..base + spatial {
                            ggamma[ch] += gd[k] * xhat[k];
                            gbeta[ch] += gd[k];
                        }
                    }
                    for gi in 0..groups {
                        let base = (b * c + gi * cpg) * spatial;
                        let dxhat = |k: usize| gd[k] * gm.data()[k / spatial % c];
                        let mut mean_d = R::zero();
                        let mut mean_dx = R::zero();
                        for k in base..base + n {
                            let d = dxhat(k);
                            mean_d += d;
                            mean_dx += d * xhat[k];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        let is = inv_std[b * groups + gi];
                        for k in base..base + n {
                            gx[k] = is * (dxhat(k) - mean_d - xhat[k] * mean_dx);
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(xs.clone(), gx)),
                    Some(Tensor::from_parts(vec![c], ggamma)),
                    Some(Tensor::from_parts(vec![c], gbeta)),
                ]
            },
        )
    }

    /// Bilinear resampling of the last two axes to `(out_h, out_w)`.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var<'t, R>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let r = xs.len();
        if r < 2 || out_h == 0 || out_w == 0 {
            return shape_err("resize_bilinear", format!("{xs:?} -> {out_h}x{out_w}"));
        }
        let (h, w) = (xs[r - 2], xs[r - 1]);
        if (h, w) == (out_h, out_w) {
            return Ok(*self);
        }
        let rows = interp_taps(h, out_h, align_corners);
        let cols = interp_taps(w, out_w, align_corners);
        let planes = x.len() / (h * w);
        let mut out = vec![R::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &x.data()[p * h * w..][..h * w];
            let dst = &mut out[p * out_h * out_w..][..out_h * out_w];
            for (i, &(i0, i1, fi)) in rows.iter().enumerate() {
                let fi = R::lit(fi);
                for (j, &(j0, j1, fj)) in cols.iter().enumerate() {
                    let fj = R::lit(fj);
                    let top = src[i0 * w + j0] * (R::one() - fj) + src[i0 * w + j1] * fj;
                    let bot = src[i1 * w + j0] * (R::one() - fj) + src[i1 * w + j1] * fj;
                    dst[i * out_w + j] = top * (R::one() - fi) + bot * fi;
                }
            }
        }
        let mut out_shape = xs.clone();
        out_shape[r - 2] = out_h;
        out_shape[r - 1] = out_w;
        self.tape.push_op(
            "resize_bilinear",
            Tensor::from_parts(out_shape, out),
            &[self.id],
            move |g| {
                let mut gx = vec![R::zero(); planes * h * w];
                for p in 0..planes {
                    let gsrc = &g.data()[p * out_h * out_w..][..out_h * out_w];
                    let gdst = &mut gx[p * h * w..][..h * w];
                    for (i, &(i0, i1, fi)) in rows.iter().enumerate() {
                        let fi = R::lit(fi);
                        for (j, &(j0, j1, fj)) in cols.iter().enumerate() {
                            let fj = R::lit(fj);
                            let gv = gsrc[i * out_w + j];
                            gdst[i0 * w + j0] += gv * (R::one() - fi) * (R::one() - fj);
                            gdst[i0 * w + j1] += gv * (R::one() - fi) * fj;
                            gdst[i1 * w + j0] += gv * fi * (R::one() - fj);
                            gdst[i1 * w + j1] += gv * fi * fj;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(xs.clone(), gx))]
            },
        )
    }

    /// Mean pooling of the last two axes with a 2x2 window and stride 2.
    /// Odd extents keep a final partial window averaged over what it covers.
    pub fn avg_pool_half(&self) -> Result<Var<'t, R>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        let r = xs.len();
        if r < 2 {
            return shape_err("avg_pool_half", format!("{xs:?}"));
        }
        let (h, w) = (xs[r - 2], xs[r - 1]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let planes = x.len() / (h * w);
        let cell = move |i: usize, j: usize| {
            let (i1, j1) = ((2 * i + 2).min(h), (2 * j + 2).min(w));
            let count = (i1 - 2 * i) * (j1 - 2 * j);
            (i1, j1, R::one() / R::lit(count as f64))
        };
        let mut out = vec![R::zero(); planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    let (i1, j1, scale) = cell(i, j);
                    let mut acc = R::zero();
                    for a in 2 * i..i1 {
                        for b in 2 * j..j1 {
                            acc += x.data()[(p * h + a) * w + b];
                        }
                    }
                    out[(p * oh + i) * ow + j] = acc * scale;
                }
            }
        }
        let mut out_shape = xs.clone();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        self.tape.push_op(
            "avg_pool_half",
            Tensor::from_parts(out_shape, out),
            &[self.id],
            move |g| {
                let mut gx = vec![R::zero(); planes * h * w];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            let (i1, j1, scale) = cell(i, j);
                            let gv = g.data()[(p * oh + i) * ow + j] * scale;
                            for a in 2 * i..i1 {
                                for b in 2 * j..j1 {
                                    gx[(p * h + a) * w + b] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(xs.clone(), gx))]
            },
        )
    }
}

/// Source taps `(lower, upper, upper_weight)` for each output coordinate.
fn interp_taps(src: usize, dst: usize, align_corners: bool) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if align_corners {
                if dst == 1 {
                    0.0
                } else {
                    i as f64 * (src - 1) as f64 / (dst - 1) as f64
                }
            } else {
                ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0)
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}
