use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor, Var};

fn zip_map<R: Real>(a: &Tensor<R>, b: &Tensor<R>, f: impl Fn(R, R) -> R) -> Tensor<R> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl<'t, R: Real> Var<'t, R> {
    fn same_shape(&self, other: &Var<'t, R>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return shape_err(op, format!("{a:?} vs {b:?}"));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var<'t, R>) -> Result<Var<'t, R>> {
        self.same_shape(other, "add")?;
        let out = zip_map(&self.value(), &other.value(), |x, y| x + y);
        self.tape.push_op("add", out, &[self.id, other.id], |g| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Var<'t, R>) -> Result<Var<'t, R>> {
        self.same_shape(other, "sub")?;
        let out = zip_map(&self.value(), &other.value(), |x, y| x - y);
        self.tape.push_op("sub", out, &[self.id, other.id], |g| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(&self, other: &Var<'t, R>) -> Result<Var<'t, R>> {
        self.same_shape(other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let out = zip_map(&a, &b, |x, y| x * y);
        self.tape.push_op("mul", out, &[self.id, other.id], move |g| {
            vec![
                Some(zip_map(g, &b, |gv, bv| gv * bv)),
                Some(zip_map(g, &a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn div(&self, other: &Var<'t, R>) -> Result<Var<'t, R>> {
        self.same_shape(other, "div")?;
        let (a, b) = (self.value(), other.value());
        let out = zip_map(&a, &b, |x, y| x / y);
        self.tape.push_op("div", out, &[self.id, other.id], move |g| {
            let ga = zip_map(g, &b, |gv, bv| gv / bv);
            let gb = Tensor::from_parts(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(a.data())
                    .zip(b.data())
                    .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                    .collect(),
            );
            vec![Some(ga), Some(gb)]
        })
    }

    pub fn scale(&self, c: R) -> Result<Var<'t, R>> {
        let out = self.value().map(|v| v * c);
        self.tape
            .push_op("scale", out, &[self.id], move |g| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&self, c: R) -> Result<Var<'t, R>> {
        let out = self.value().map(|v| v + c);
        self.tape
            .push_op("add_scalar", out, &[self.id], |g| vec![Some(g.clone())])
    }

    pub fn relu(&self) -> Result<Var<'t, R>> {
        let x = self.value();
        let out = x.map(|v| v.max(R::zero()));
        self.tape.push_op("relu", out, &[self.id], move |g| {
            vec![Some(zip_map(g, &x, |gv, xv| if xv > R::zero() { gv } else { R::zero() }))]
        })
    }

    pub fn exp(&self) -> Result<Var<'t, R>> {
        let out = self.value().map(R::exp);
        let y = out.clone();
        self.tape.push_op("exp", out, &[self.id], move |g| {
            vec![Some(zip_map(g, &y, |gv, yv| gv * yv))]
        })
    }

    pub fn ln(&self) -> Result<Var<'t, R>> {
        let x = self.value();
        let out = x.map(R::ln);
        self.tape.push_op("ln", out, &[self.id], move |g| {
            vec![Some(zip_map(g, &x, |gv, xv| gv / xv))]
        })
    }

    pub fn sqrt(&self) -> Result<Var<'t, R>> {
        let out = self.value().map(R::sqrt);
        let y = out.clone();
        self.tape.push_op("sqrt", out, &[self.id], move |g| {
            vec![Some(zip_map(g, &y, |gv, yv| gv / (yv + yv)))]
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: R, hi: R) -> Result<Var<'t, R>> {
        let x = self.value();
        let out = x.map(|v| v.max(lo).min(hi));
        self.tape.push_op("clamp", out, &[self.id], move |g| {
            vec![Some(zip_map(g, &x, |gv, xv| {
                if xv >= lo && xv <= hi {
                    gv
                } else {
                    R::zero()
                }
            }))]
        })
    }

    /// Broadcasts extents of size one up to `shape` (ranks must match).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t, R>> {
        let src_shape = self.shape();
        if src_shape.len() != shape.len()
            || src_shape
                .iter()
                .zip(shape)
                .any(|(&s, &d)| s != d && s != 1)
        {
            return shape_err("broadcast_to", format!("{src_shape:?} -> {shape:?}"));
        }
        if src_shape == shape {
            return Ok(*self);
        }
        let map = broadcast_index_map(&src_shape, shape);
        let x = self.value();
        let out = Tensor::from_parts(shape.to_vec(), map.iter().map(|&i| x.data()[i]).collect());
        self.tape.push_op("broadcast_to", out, &[self.id], move |g| {
            let mut gx = Tensor::zeros(&src_shape);
            let gd = gx.data_mut();
            for (&i, &gv) in map.iter().zip(g.data()) {
                gd[i] += gv;
            }
            vec![Some(gx)]
        })
    }
}

fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let mut src_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { s };
        s *= src[d];
    }
    let total: usize = dst.iter().product();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(idx.iter().zip(&src_strides).map(|(i, st)| i * st).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
