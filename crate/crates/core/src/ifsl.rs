//! Integrative few-shot learning head: class-wise foreground maps, occurrence
//! and segmentation predictions, and the two training losses.
//!
//! Logit maps are `[2, H, W]` with channel 0 the foreground. Segmentation
//! labels are 1-based: `1..=N` name support classes and `N + 1` background.

use crate::error::{shape_err, Error, Result};
use crate::mask::LabelMap;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Lower clip applied to probabilities before taking logarithms.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceConfig {
    pub delta: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { delta: 0.5 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta > 0.0 && self.delta < 1.0 {
            Ok(())
        } else {
            Err(Error::Invalid(format!("occurrence threshold {} outside (0, 1)", self.delta)))
        }
    }
}

/// Form of the classification loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassLossForm {
    /// Binary cross-entropy with both the positive and negative terms.
    #[default]
    Bce,
    /// Only `-y log p`; negatives contribute nothing.
    PositiveOnly,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodePrediction {
    pub occurrence: Vec<u8>,
    pub segmentation: LabelMap,
}

/// Averages K two-channel logit maps and returns the foreground probability
/// `[H, W]` of the 2-way softmax.
pub fn kshot_foreground<'t, R: Real>(tape: &'t Tape<R>, logits: &[Var<'t, R>]) -> Result<Var<'t, R>> {
    let Some(first) = logits.first() else {
        return shape_err("kshot_foreground", "no shots");
    };
    let s = first.shape();
    if s.len() != 3 || s[0] != 2 || logits.iter().any(|l| l.shape() != s) {
        return shape_err("kshot_foreground", format!("logit maps must share a [2, H, W] shape, got {s:?}"));
    }
    let mean = tape.sum_all(logits)?.scale(R::lit(1.0 / logits.len() as f64))?;
    mean.softmax(0)?.narrow(0, 0, 1)?.reshape(&[s[1], s[2]])
}

/// Stacks the N foreground maps with the mean complement as the last channel:
/// `[H, W, N + 1]`.
pub fn merge_background<'t, R: Real>(tape: &'t Tape<R>, maps: &[Var<'t, R>]) -> Result<Var<'t, R>> {
    let Some(first) = maps.first() else {
        return shape_err("merge_background", "no class maps");
    };
    let s = first.shape();
    if s.len() != 2 || maps.iter().any(|m| m.shape() != s) {
        return shape_err("merge_background", format!("maps must share an [H, W] shape, got {s:?}"));
    }
    let n = maps.len() as f64;
    let background = tape.sum_all(maps)?.scale(R::lit(-1.0 / n))?.add_scalar(R::one())?;
    let mut channels = maps.to_vec();
    channels.push(background);
    tape.stack_last(&channels)
}

/// Class `n` is present iff some pixel of its map reaches `delta`.
pub fn predict_occurrence<R: Real>(maps: &[Tensor<R>], cfg: &InferenceConfig) -> Vec<u8> {
    maps.iter()
        .map(|m| u8::from(m.data().iter().any(|&v| v.as_f64() >= cfg.delta)))
        .collect()
}

/// Per-pixel argmax over the `N + 1` channels of `[H, W, N + 1]`; ties go to
/// the lowest channel.
pub fn predict_segmentation<R: Real>(seg: &Tensor<R>) -> Result<LabelMap> {
    let s = seg.shape();
    if s.len() != 3 || s[2] < 2 || s[2] > u8::MAX as usize {
        return shape_err("predict_segmentation", format!("{s:?}"));
    }
    let labels = seg
        .data()
        .chunks(s[2])
        .map(|px| {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate().skip(1) {
                if v > px[best] {
                    best = i;
                }
            }
            best as u8 + 1
        })
        .collect();
    LabelMap::new(s[0], s[1], labels)
}

/// Occurrence and segmentation predictions from the N foreground maps.
pub fn predict<R: Real>(maps: &[Tensor<R>], cfg: &InferenceConfig) -> Result<EpisodePrediction> {
    let tape = Tape::new();
    let vars: Vec<_> = maps.iter().map(|m| tape.constant(m.clone())).collect();
    let seg = merge_background(&tape, &vars)?;
    Ok(EpisodePrediction {
        occurrence: predict_occurrence(maps, cfg),
        segmentation: predict_segmentation(&seg.value())?,
    })
}

fn check_multi_hot(y: &[u8], n: usize) -> Result<()> {
    if y.len() != n || y.iter().any(|&v| v > 1) {
        return Err(Error::Invalid(format!("class labels {y:?} for {n} classes")));
    }
    Ok(())
}

/// Mean over classes of the cross-entropy between `y_gt[n]` and the spatial
/// mean of map `n`, clipped to `[LOG_EPS, 1 - LOG_EPS]`.
pub fn loss_classification<'t, R: Real>(
    tape: &'t Tape<R>,
    maps: &[Var<'t, R>],
    y_gt: &[u8],
    form: ClassLossForm,
) -> Result<Var<'t, R>> {
    check_multi_hot(y_gt, maps.len())?;
    if maps.is_empty() {
        return shape_err("loss_classification", "no class maps");
    }
    let (lo, hi) = (R::lit(LOG_EPS), R::lit(1.0 - LOG_EPS));
    let mut terms = Vec::with_capacity(maps.len());
    for (m, &y) in maps.iter().zip(y_gt) {
        let p = m.mean()?.clamp(lo, hi)?;
        let term = match (y, form) {
            (1, _) => p.ln()?,
            (_, ClassLossForm::Bce) => p.scale(-R::one())?.add_scalar(R::one())?.ln()?,
            (_, ClassLossForm::PositiveOnly) => p.scale(R::zero())?,
        };
        terms.push(term);
    }
    tape.sum_all(&terms)?.scale(R::lit(-1.0 / maps.len() as f64))
}

/// One-hot `[H, W, classes]` encoding of 1-based labels.
pub fn one_hot<R: Real>(labels: &LabelMap, classes: usize) -> Result<Tensor<R>> {
    if labels.data().iter().any(|&l| l == 0 || l as usize > classes) {
        return Err(Error::Invalid(format!("labels outside 1..={classes}")));
    }
    let mut out = Tensor::zeros(&[labels.height(), labels.width(), classes]);
    for (i, &l) in labels.data().iter().enumerate() {
        out.data_mut()[i * classes + l as usize - 1] = R::one();
    }
    Ok(out)
}

/// `-1 / ((N + 1) H W) * sum y_gt * log(clip(y_s))` for `[H, W, N + 1]`
/// predictions and one-hot targets.
pub fn loss_segmentation<'t, R: Real>(seg: Var<'t, R>, y_gt: &Tensor<R>) -> Result<Var<'t, R>> {
    let s = seg.shape();
    if s.len() != 3 || y_gt.shape() != s.as_slice() {
        return shape_err("loss_segmentation", format!("{s:?} vs {:?}", y_gt.shape()));
    }
    let one_hot_ok = y_gt.data().chunks(s[2]).all(|px| {
        px.iter().all(|&v| v == R::zero() || v == R::one()) && px.iter().filter(|&&v| v == R::one()).count() == 1
    });
    if !one_hot_ok {
        return Err(Error::Invalid("segmentation target is not one-hot per pixel".into()));
    }
    let gt = seg.tape().constant(y_gt.clone());
    seg.clamp(R::lit(LOG_EPS), R::one())?
        .ln()?
        .mul(&gt)?
        .sum()?
        .scale(R::lit(-1.0 / y_gt.len() as f64))
}
