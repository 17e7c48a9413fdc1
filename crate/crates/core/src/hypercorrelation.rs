//! Cosine hypercorrelation between query and support feature pyramids.

use crate::backbone::FeaturePyramid;
use crate::error::{shape_err, Result};
use crate::mask::Mask;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Guard added to the product of feature norms.
pub const NORM_EPS: f64 = 1e-8;

/// One `[Hq, Wq, Hs, Ws, C]` correlation tensor per pyramid group.
#[derive(Clone, Debug)]
pub struct Hypercorrelation<R> {
    pub levels: Vec<Tensor<R>>,
}

/// `relu(<q, s> / (|q| |s| + eps))` for every query/support position pair of
/// `[C, Hq, Wq]` and `[C, Hs, Ws]` maps; result is `[Hq, Wq, Hs, Ws]`.
pub fn cosine_correlation<'t, R: Real>(query: Var<'t, R>, support: Var<'t, R>) -> Result<Var<'t, R>> {
    let (qs, ss) = (query.shape(), support.shape());
    let ([c, hq, wq], [c2, hs, ws]) = (qs.as_slice(), ss.as_slice()) else {
        return shape_err("cosine_correlation", format!("{qs:?} vs {ss:?}"));
    };
    if c != c2 {
        return shape_err("cosine_correlation", format!("channels {c} vs {c2}"));
    }
    let (lq, ls) = (hq * wq, hs * ws);
    let q = query.reshape(&[*c, lq])?;
    let s = support.reshape(&[*c, ls])?;
    let dot = q.permute(&[1, 0])?.matmul(&s)?;
    // The squared-eps floor keeps the sqrt derivative finite at all-zero
    // vectors (masked-out support cells).
    let floor = R::lit(NORM_EPS * NORM_EPS);
    let q_norm = q.mul(&q)?.sum_axis(0)?.add_scalar(floor)?.sqrt()?.reshape(&[lq, 1])?;
    let s_norm = s.mul(&s)?.sum_axis(0)?.add_scalar(floor)?.sqrt()?;
    let denom = q_norm.matmul(&s_norm)?.add_scalar(R::lit(NORM_EPS))?;
    dot.div(&denom)?.relu()?.reshape(&[*hq, *wq, *hs, *ws])
}

/// Weights every support feature map `[C, h, w]` by the fraction of
/// foreground pixels under each cell, so background positions correlate to
/// zero.
pub fn mask_support_features<'t, R: Real>(
    tape: &'t Tape<R>,
    support: &[Vec<Var<'t, R>>],
    mask: &Mask,
) -> Result<Vec<Vec<Var<'t, R>>>> {
    support
        .iter()
        .map(|group| {
            group
                .iter()
                .map(|f| {
                    let s = f.shape();
                    let [c, h, w] = s.as_slice() else {
                        return shape_err("mask_support_features", format!("{s:?}"));
                    };
                    let weights: Vec<R> = mask.area_fractions(*h, *w)?.into_iter().map(R::lit).collect();
                    let weights = tape.constant(Tensor::new(&[1, *h, *w], weights)?);
                    f.mul(&weights.broadcast_to(&[*c, *h, *w])?)
                })
                .collect()
        })
        .collect()
}

/// Differentiable hypercorrelation from per-group feature maps recorded on a tape.
pub fn build_hypercorrelation_on<'t, R: Real>(
    tape: &'t Tape<R>,
    query: &[Vec<Var<'t, R>>],
    support: &[Vec<Var<'t, R>>],
) -> Result<Vec<Var<'t, R>>> {
    if query.len() != support.len() {
        return shape_err(
            "build_hypercorrelation",
            format!("{} query groups vs {} support groups", query.len(), support.len()),
        );
    }
    query
        .iter()
        .zip(support)
        .enumerate()
        .map(|(p, (qg, sg))| {
            if qg.len() != sg.len() || qg.is_empty() {
                return shape_err(
                    "build_hypercorrelation",
                    format!("group {p}: {} vs {} layers", qg.len(), sg.len()),
                );
            }
            let maps = qg
                .iter()
                .zip(sg)
                .map(|(&q, &s)| cosine_correlation(q, s))
                .collect::<Result<Vec<_>>>()?;
            if maps.iter().any(|m| m.shape() != maps[0].shape()) {
                return shape_err("build_hypercorrelation", format!("group {p} spatial mismatch"));
            }
            tape.stack_last(&maps)
        })
        .collect()
}

/// Hypercorrelation pyramid between a query and one support image.
pub fn build_hypercorrelation<R: Real>(
    query: &FeaturePyramid<R>,
    support: &FeaturePyramid<R>,
) -> Result<Hypercorrelation<R>> {
    let tape = Tape::new();
    let lift = |p: &FeaturePyramid<R>| -> Vec<Vec<Var<'_, R>>> {
        p.groups
            .iter()
            .map(|g| g.iter().map(|t| tape.constant(t.clone())).collect())
            .collect()
    };
    let levels = build_hypercorrelation_on(&tape, &lift(query), &lift(support))?;
    Ok(Hypercorrelation {
        levels: levels.into_iter().map(|v| v.value().as_ref().clone()).collect(),
    })
}
