use crate::error::{shape_err, Result};
use crate::tensor::array::split_axis;
use crate::tensor::{Real, Tensor, Var};

impl<'t, R: Real> Var<'t, R> {
    fn check_axis(&self, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return shape_err(op, format!("axis {axis} for shape {shape:?}"));
        }
        Ok(shape)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<'t, R>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let total = x.data().iter().copied().sum();
        self.tape
            .push_op("sum", Tensor::scalar(total), &[self.id], move |g| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(&self) -> Result<Var<'t, R>> {
        let n = R::lit(self.value().len() as f64);
        self.sum()?.scale(R::one() / n)
    }

    /// Sum along `axis`, keeping it with extent one.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, R>> {
        let shape = self.check_axis(axis, "sum_axis")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..][..inner];
                for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        self.tape.push_op(
            "sum_axis",
            Tensor::from_parts(out_shape, out),
            &[self.id],
            move |g| {
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g.data()[o * inner..][..inner]);
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), gx))]
            },
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, R>> {
        let len = self.check_axis(axis, "mean_axis")?[axis];
        self.sum_axis(axis)?.scale(R::one() / R::lit(len as f64))
    }

    /// Max along `axis`, keeping it with extent one. On ties the gradient
    /// goes to the first maximal element.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t, R>> {
        let shape = self.check_axis(axis, "max_axis")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = x.data()[o * len * inner + i];
                for a in 1..len {
                    let v = x.data()[(o * len + a) * inner + i];
                    if v > best_v {
                        best = a;
                        best_v = v;
                    }
                }
                out.push(best_v);
                argmax.push((o * len + best) * inner + i);
            }
        }
        self.tape.push_op(
            "max_axis",
            Tensor::from_parts(out_shape, out),
            &[self.id],
            move |g| {
                let mut gx = Tensor::zeros(&shape);
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                vec![Some(gx)]
            },
        )
    }
}
