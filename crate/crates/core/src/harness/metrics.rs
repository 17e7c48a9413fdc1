//! Episode metrics: 0/1 exact ratio, class accuracy, mIoU and FB-IoU.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mask::LabelMap;

/// Ground truth and prediction of one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeOutcome {
    /// Dataset class of each support slot.
    pub classes: Vec<usize>,
    pub y_gt: Vec<u8>,
    pub y_pred: Vec<u8>,
    pub seg_gt: LabelMap,
    pub seg_pred: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub episodes: usize,
    pub exact_ratio: f64,
    pub class_accuracy: f64,
    pub miou: f64,
    pub fbiou: f64,
    /// `(dataset class, IoU)` for classes with a non-empty union.
    pub per_class_iou: Vec<(usize, f64)>,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        writeln!(out, "episodes,{}", self.episodes).unwrap();
        writeln!(out, "exact_ratio,{}", self.exact_ratio).unwrap();
        writeln!(out, "class_accuracy,{}", self.class_accuracy).unwrap();
        writeln!(out, "miou,{}", self.miou).unwrap();
        writeln!(out, "fbiou,{}", self.fbiou).unwrap();
        for (c, iou) in &self.per_class_iou {
            writeln!(out, "iou_class_{c},{iou}").unwrap();
        }
        out
    }
}

/// Streaming accumulator; intersections and unions are summed over the whole
/// set before dividing.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    episodes: usize,
    exact: usize,
    class_hits: usize,
    class_total: usize,
    inter: BTreeMap<usize, u64>,
    union: BTreeMap<usize, u64>,
    fb_inter: [u64; 2],
    fb_union: [u64; 2],
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, o: &EpisodeOutcome) -> Result<()> {
        let n = o.classes.len();
        if o.y_gt.len() != n || o.y_pred.len() != n {
            return Err(Error::Invalid(format!(
                "{n} classes with {} / {} occurrence labels",
                o.y_gt.len(),
                o.y_pred.len()
            )));
        }
        if o.seg_gt.data().len() != o.seg_pred.data().len() {
            return Err(Error::Invalid("segmentation maps differ in size".into()));
        }
        self.episodes += 1;
        self.exact += usize::from(o.y_gt == o.y_pred);
        self.class_hits += o.y_gt.iter().zip(&o.y_pred).filter(|(a, b)| a == b).count();
        self.class_total += n;
        let bg = n as u8 + 1;
        for (slot, &class) in o.classes.iter().enumerate() {
            let label = slot as u8 + 1;
            let (mut i, mut u) = (0u64, 0u64);
            for (&g, &p) in o.seg_gt.data().iter().zip(o.seg_pred.data()) {
                let (g, p) = (g == label, p == label);
                i += u64::from(g && p);
                u += u64::from(g || p);
            }
            *self.inter.entry(class).or_default() += i;
            *self.union.entry(class).or_default() += u;
        }
        for (&g, &p) in o.seg_gt.data().iter().zip(o.seg_pred.data()) {
            let (g, p) = (usize::from(g != bg), usize::from(p != bg));
            for k in 0..2 {
                let (gk, pk) = (g == k, p == k);
                self.fb_inter[k] += u64::from(gk && pk);
                self.fb_union[k] += u64::from(gk || pk);
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let per_class_iou: Vec<(usize, f64)> = self
            .union
            .iter()
            .filter(|(_, &u)| u > 0)
            .map(|(&c, &u)| (c, self.inter[&c] as f64 / u as f64))
            .collect();
        let miou = if per_class_iou.is_empty() {
            0.0
        } else {
            per_class_iou.iter().map(|(_, v)| v).sum::<f64>() / per_class_iou.len() as f64
        };
        let fb: Vec<f64> = (0..2)
            .filter(|&k| self.fb_union[k] > 0)
            .map(|k| self.fb_inter[k] as f64 / self.fb_union[k] as f64)
            .collect();
        MetricReport {
            episodes: self.episodes,
            exact_ratio: ratio(self.exact, self.episodes),
            class_accuracy: ratio(self.class_hits, self.class_total),
            miou,
            fbiou: if fb.is_empty() { 0.0 } else { fb.iter().sum::<f64>() / fb.len() as f64 },
            per_class_iou,
        }
    }
}

pub fn compute_metrics(outcomes: &[EpisodeOutcome]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for o in outcomes {
        acc.add(o)?;
    }
    Ok(acc.report())
}

/// Metrics from separately held prediction and ground-truth lists.
pub fn compute_metrics_from(
    predictions: &[(Vec<u8>, LabelMap)],
    truths: &[(Vec<usize>, Vec<u8>, LabelMap)],
) -> Result<MetricReport> {
    if predictions.len() != truths.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} episodes",
            predictions.len(),
            truths.len()
        )));
    }
    let outcomes: Vec<_> = predictions
        .iter()
        .zip(truths)
        .map(|((y_pred, seg_pred), (classes, y_gt, seg_gt))| EpisodeOutcome {
            classes: classes.clone(),
            y_gt: y_gt.clone(),
            y_pred: y_pred.clone(),
            seg_gt: seg_gt.clone(),
            seg_pred: seg_pred.clone(),
        })
        .collect();
    compute_metrics(&outcomes)
}

/// One CSV row per episode: index, query image, classes, labels and exactness.
pub fn episode_csv(rows: &[(usize, EpisodeOutcome)]) -> String {
    let join = |v: &[u8]| v.iter().map(u8::to_string).collect::<Vec<_>>().join(" ");
    let mut out = String::from("episode,query,classes,y_gt,y_pred,exact\n");
    for (i, (query, o)) in rows.iter().enumerate() {
        let classes = o.classes.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        writeln!(
            out,
            "{i},{query},{classes},{},{},{}",
            join(&o.y_gt),
            join(&o.y_pred),
            u8::from(o.y_gt == o.y_pred)
        )
        .unwrap();
    }
    out
}
