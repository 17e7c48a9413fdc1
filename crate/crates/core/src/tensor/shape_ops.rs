use crate::error::{shape_err, Result};
use crate::tensor::array::{numel, split_axis};
use crate::tensor::{Real, Tape, Tensor, Var};

/// For each output offset of `permute(axes)`, the source offset.
pub(crate) fn permute_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

impl<'t, R: Real> Var<'t, R> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, R>> {
        let x = self.value();
        if numel(shape) != x.len() || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", x.shape()));
        }
        let src_shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        self.tape.push_op("reshape", out, &[self.id], move |g| {
            vec![Some(Tensor::from_parts(src_shape.clone(), g.data().to_vec()))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, R>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return shape_err("permute", format!("axes {axes:?} for shape {shape:?}"));
        }
        let map = permute_index_map(&shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = Tensor::from_parts(out_shape, map.iter().map(|&i| x.data()[i]).collect());
        self.tape.push_op("permute", out, &[self.id], move |g| {
            let mut gx = vec![R::zero(); map.len()];
            for (&src, &gv) in map.iter().zip(g.data()) {
                gx[src] = gv;
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, R>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err("narrow", format!("axis {axis} [{start}, +{len}) of {shape:?}"));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * full + start) * inner..][..len * inner]);
        }
        self.tape.push_op(
            "narrow",
            Tensor::from_parts(out_shape, out),
            &[self.id],
            move |g| {
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    gx.data_mut()[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                vec![Some(gx)]
            },
        )
    }

    /// Single entry at a row-major offset, as a rank-0 tensor.
    pub fn at(&self, offset: usize) -> Result<Var<'t, R>> {
        let x = self.value();
        if offset >= x.len() {
            return shape_err("at", format!("offset {offset} of {:?}", x.shape()));
        }
        let shape = x.shape().to_vec();
        self.tape.push_op(
            "at",
            Tensor::scalar(x.data()[offset]),
            &[self.id],
            move |g| {
                let mut gx = Tensor::zeros(&shape);
                gx.data_mut()[offset] = g.item();
                vec![Some(gx)]
            },
        )
    }

    /// Zero-pads the last two axes on the trailing side up to `(h, w)`.
    pub fn pad_trailing(&self, h: usize, w: usize) -> Result<Var<'t, R>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let r = shape.len();
        if r < 2 || h < shape[r - 2] || w < shape[r - 1] {
            return shape_err("pad_trailing", format!("{shape:?} -> (.., {h}, {w})"));
        }
        let (sh, sw) = (shape[r - 2], shape[r - 1]);
        if (sh, sw) == (h, w) {
            return Ok(*self);
        }
        let planes = x.len() / (sh * sw);
        let mut out_shape = shape.clone();
        out_shape[r - 2] = h;
        out_shape[r - 1] = w;
        let mut out = vec![R::zero(); planes * h * w];
        for p in 0..planes {
            for i in 0..sh {
                out[(p * h + i) * w..][..sw].copy_from_slice(&x.data()[(p * sh + i) * sw..][..sw]);
            }
        }
        self.tape.push_op(
            "pad_trailing",
            Tensor::from_parts(out_shape, out),
            &[self.id],
            move |g| {
                let mut gx = Vec::with_capacity(planes * sh * sw);
                for p in 0..planes {
                    for i in 0..sh {
                        gx.extend_from_slice(&g.data()[(p * h + i) * w..][..sw]);
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            },
        )
    }
}

impl<R: Real> Tape<R> {
    /// Concatenates along an existing `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, R>], axis: usize) -> Result<Var<'t, R>> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = first.shape();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for {base:?}"));
        }
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return shape_err("concat", format!("{s:?} vs {base:?}"));
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..][..l * inner]);
            }
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push_op(
            "concat",
            Tensor::from_parts(out_shape, out),
            &ids,
            move |g| {
                let mut grads: Vec<Vec<R>> = lens
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g.data()[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                    .collect()
            },
        )
    }

    /// Stacks equally shaped inputs along a new trailing axis.
    pub fn stack_last<'t>(&'t self, parts: &[Var<'t, R>]) -> Result<Var<'t, R>> {
        let Some(first) = parts.first() else {
            return shape_err("stack_last", "no inputs");
        };
        let mut shape = first.shape();
        shape.push(1);
        let expanded = parts
            .iter()
            .map(|p| p.reshape(&shape))
            .collect::<Result<Vec<_>>>()?;
        self.concat(&expanded, shape.len() - 1)
    }

    /// Elementwise sum of equally shaped inputs.
    pub fn sum_all<'t>(&'t self, parts: &[Var<'t, R>]) -> Result<Var<'t, R>> {
        let Some((first, rest)) = parts.split_first() else {
            return shape_err("sum_all", "no inputs");
        };
        rest.iter().try_fold(*first, |acc, p| acc.add(p))
    }
}
