//! Self-check suites run by `ifsl verify` and the acceptance target.
//!
//! Each suite returns named checks with a pass flag and a short detail
//! string; nothing here panics on a failed comparison.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asnet::{asnet_forward_var, build_asnet, AsnetConfig};
use crate::attentive_squeeze::{as_layer_forward, as_layer_trace, attention_oracle, AsLayerConfig, AsLayerParams};
use crate::backbone::{build_backbone, BackboneConfig};
use crate::error::Result;
use crate::harness::metrics::{compute_metrics, EpisodeOutcome};
use crate::harness::{generate_dataset, Dataset, EpisodeSampler, ShapeWorldSpec};
use crate::hypercorrelation::{build_hypercorrelation, build_hypercorrelation_on, mask_support_features};
use crate::ifsl::{
    kshot_foreground, loss_segmentation, merge_background, one_hot, predict, predict_occurrence, InferenceConfig,
};
use crate::mask::{LabelMap, Mask};
use crate::tensor::{grad_check, Tape, Tensor, Var};
use crate::train::{train, LossMode, Model, ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    /// Passes when `value <= bound`.
    fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self::new(name, value <= bound, format!("{value:.3e} (bound {bound:.0e})"))
    }

    fn from_result(name: impl Into<String>, r: Result<Check>) -> Self {
        let name = name.into();
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }
}

#[derive(Clone, Debug)]
pub struct Suite {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl Suite {
    fn run(name: &'static str, body: impl FnOnce() -> Vec<Check>) -> Self {
        let start = Instant::now();
        let checks = body();
        Self {
            name,
            checks,
            seconds: start.elapsed().as_secs_f64(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Direct sliding-window convolution of `[C_in, H, W]` by `[C_out, C_in, k, k]`.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    Tensor::from_fn(&[c_out, oh, ow], |flat| {
        let (co, oi, oj) = (flat / (oh * ow), flat / ow % oh, flat % ow);
        let mut acc = b.at(&[co]);
        for ci in 0..c_in {
            for ki in 0..k {
                for kj in 0..k {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let jj = (oj * stride + kj) as isize - pad as isize;
                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                        acc += x.at(&[ci, ii as usize, jj as usize]) * w.at(&[co, ci, ki, kj]);
                    }
                }
            }
        }
        acc
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn nonempty_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    loop {
        let m = Mask::from_fn(h, w, |_, _| rng.gen_bool(0.5));
        if m.any() {
            return m;
        }
    }
}

/// Kernel geometries of the squeeze, fusion and decoder layers.
pub const LAYER_GEOMETRIES: [(usize, usize, usize); 4] = [(5, 4, 2), (3, 2, 1), (1, 1, 0), (2, 1, 0)];

/// Attention layer against its nested-loop oracle, and convolution against
/// [`conv_oracle`].
pub fn oracle_suite() -> Suite {
    Suite::run("oracles", || {
        let mut checks = Vec::new();
        let mut worst = 0.0f64;
        let mut failure = None;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (k, s, p) = LAYER_GEOMETRIES[seed as usize % LAYER_GEOMETRIES.len()];
            let cfg = AsLayerConfig {
                c_in: rng.gen_range(1..=4),
                c_out: [4, 8][rng.gen_range(0..2)],
                c_hidden: 8,
                heads: 2,
                kernel: k,
                stride: s,
                padding: p,
                norm_groups: 2,
            };
            let shape = [
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
                cfg.c_in,
            ];
            let corr = uniform(&mut rng, &shape, 0.0, 1.0);
            let mask = (seed % 3 != 0).then(|| nonempty_mask(&mut rng, 8, 8));
            let run = || -> Result<f64> {
                let layer = AsLayerParams::<f64>::init(cfg, seed)?;
                let got = as_layer_trace(&corr, mask.as_ref(), &layer)?;
                let want = attention_oracle(&corr, mask.as_ref(), &layer)?;
                Ok(got
                    .output
                    .max_abs_diff(&want.output)
                    .max(got.weights.max_abs_diff(&want.weights))
                    .max(got.attended.max_abs_diff(&want.attended)))
            };
            match run() {
                Ok(d) => worst = worst.max(d),
                Err(e) => failure = Some(format!("seed {seed}: {e}")),
            }
        }
        checks.push(match failure {
            Some(f) => Check::new("attention layer vs oracle, 20 seeds", false, f),
            None => Check::at_most("attention layer vs oracle, 20 seeds", worst, 1e-10),
        });

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (k, s, p) in LAYER_GEOMETRIES.into_iter().chain([(3, 1, 1), (4, 2, 1)]) {
            let x = uniform(&mut rng, &[3, 9, 7], -1.0, 1.0);
            let w = uniform(&mut rng, &[4, 3, k, k], -1.0, 1.0);
            let b = uniform(&mut rng, &[4], -1.0, 1.0);
            let tape = Tape::new();
            let got = tape
                .constant(x.clone())
                .conv2d(&tape.constant(w.clone()), Some(&tape.constant(b.clone())), s, p)
                .map(|v| v.value().max_abs_diff(&conv_oracle(&x, &w, &b, s, p)));
            checks.push(Check::from_result(
                format!("conv2d k{k} s{s} p{p} vs oracle"),
                got.map(|d| Check::at_most(format!("conv2d k{k} s{s} p{p} vs oracle"), d, 1e-12)),
            ));
        }
        checks
    })
}

type Objective = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

/// A primitive under test: input shapes and a scalar objective.
struct Primitive {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    objective: Objective,
    /// Rejects points too close to a kink or tie.
    admissible: fn(&[Tensor<f64>]) -> bool,
}

fn always(_: &[Tensor<f64>]) -> bool {
    true
}

fn away_from_zero(xs: &[Tensor<f64>]) -> bool {
    xs[0].data().iter().all(|v| v.abs() > 1e-3)
}

fn rows_without_ties(xs: &[Tensor<f64>]) -> bool {
    xs[0].data().chunks(4).all(|row| {
        let mut r = row.to_vec();
        r.sort_by(|a, b| b.total_cmp(a));
        r[0] - r[1] > 1e-3
    })
}

/// Projects an output onto fixed weights so every element reaches the loss.
fn project<'t>(v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let n = v.value().len();
    let w = Tensor::from_fn(v.shape().as_slice(), |i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4);
    debug_assert_eq!(w.len(), n);
    v.mul(&v.tape().constant(w))?.sum()
}

fn primitives() -> Vec<Primitive> {
    let mask = [true, false, true, true];
    vec![
        Primitive {
            name: "add",
            shapes: vec![vec![3, 4], vec![3, 4]],
            objective: Box::new(|_, v| project(v[0].add(&v[1])?)),
            admissible: always,
        },
        Primitive {
            name: "mul",
            shapes: vec![vec![3, 4], vec![3, 4]],
            objective: Box::new(|_, v| project(v[0].mul(&v[1])?)),
            admissible: always,
        },
        Primitive {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 2]],
            objective: Box::new(|_, v| project(v[0].matmul(&v[1])?)),
            admissible: always,
        },
        Primitive {
            name: "relu",
            shapes: vec![vec![3, 4]],
            objective: Box::new(|_, v| project(v[0].relu()?)),
            admissible: away_from_zero,
        },
        Primitive {
            name: "mean",
            shapes: vec![vec![3, 4]],
            objective: Box::new(|_, v| project(v[0].mean_axis(1)?)?.add(&v[0].mean()?)),
            admissible: always,
        },
        Primitive {
            name: "max-reduce",
            shapes: vec![vec![3, 4]],
            objective: Box::new(|_, v| project(v[0].max_axis(1)?)),
            admissible: rows_without_ties,
        },
        Primitive {
            name: "conv2d",
            shapes: vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            objective: Box::new(|_, v| project(v[0].conv2d(&v[1], Some(&v[2]), 2, 1)?)),
            admissible: always,
        },
        Primitive {
            name: "softmax",
            shapes: vec![vec![3, 4]],
            objective: Box::new(|_, v| project(v[0].softmax(1)?)),
            admissible: always,
        },
        Primitive {
            name: "masked softmax",
            shapes: vec![vec![3, 4]],
            objective: Box::new(move |_, v| project(v[0].masked_softmax(1, &mask)?)),
            admissible: always,
        },
        Primitive {
            name: "group_norm",
            shapes: vec![vec![4, 3, 3], vec![4], vec![4]],
            objective: Box::new(|_, v| project(v[0].group_norm(2, &v[1], &v[2], 1e-5)?)),
            admissible: always,
        },
        Primitive {
            name: "bilinear_resize",
            shapes: vec![vec![2, 3, 3]],
            objective: Box::new(|_, v| project(v[0].resize_bilinear(5, 4, true)?)?.add(&project(v[0].resize_bilinear(2, 5, false)?)?)),
            admissible: always,
        },
    ]
}

/// The tiny end-to-end pipeline: correlation of masked support features,
/// network, K-shot map, background merge and segmentation loss on a 16x16
/// episode. Checks every feature and parameter coordinate.
pub fn end_to_end_gradient_error(seed: u64) -> Result<f64> {
    let cfg = AsnetConfig {
        level_channels: vec![1, 2, 1],
        squeeze_channels: [4, 8],
        decoder_channels: 4,
        heads: 2,
        norm_groups: 2,
        ..Default::default()
    };
    let net = build_asnet::<f64>(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = [(1usize, 2usize), (2, 1), (1, 1)];
    let mut inputs = Vec::new();
    for _ in 0..2 {
        for &(n, e) in &layout {
            for _ in 0..n {
                inputs.push(uniform(&mut rng, &[4, e, e], -1.0, 1.0));
            }
        }
    }
    let n_feats = inputs.len();
    let labels = LabelMap::new(16, 16, (0..256).map(|i| if i % 16 < 7 { 1 } else { 2 }).collect())?;
    let gt = one_hot::<f64>(&labels, 2)?;
    let mask = Mask::from_fn(16, 16, |i, j| j < 7 || i < 3);
    inputs.extend(net.params.values());
    grad_check(
        |tape, vars| {
            let (fv, pv) = vars.split_at(n_feats);
            let params = net.params.bind_vars(pv)?;
            let mut it = fv.iter().copied();
            let mut take = || -> Vec<Vec<Var<'_, f64>>> {
                layout
                    .iter()
                    .map(|&(n, _)| (0..n).filter_map(|_| it.next()).collect())
                    .collect()
            };
            let (q, s) = (take(), take());
            let s = mask_support_features(tape, &s, &mask)?;
            let hyper = build_hypercorrelation_on(tape, &q, &s)?;
            let logits = asnet_forward_var(&cfg, &params, &hyper, Some(&mask), 16, 16, None)?;
            let fg = kshot_foreground(tape, &[logits])?;
            loss_segmentation(merge_background(tape, &[fg])?, &gt)
        },
        &inputs,
        1e-5,
    )
}

/// Central-difference checks of every primitive at `points` random inputs,
/// then the end-to-end segmentation pipeline.
pub fn gradient_suite(points: usize) -> Suite {
    Suite::run("gradients", || {
        let mut checks = Vec::new();
        for (i, prim) in primitives().into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + i as u64);
            let mut worst = 0.0f64;
            let mut error = None;
            let mut done = 0;
            while done < points {
                let xs: Vec<_> = prim.shapes.iter().map(|s| uniform(&mut rng, s, -2.0, 2.0)).collect();
                if !(prim.admissible)(&xs) {
                    continue;
                }
                match grad_check(&prim.objective, &xs, 1e-5) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => error = Some(e.to_string()),
                }
                done += 1;
            }
            let name = format!("{} at {points} points", prim.name);
            checks.push(match error {
                Some(e) => Check::new(name, false, e),
                None => Check::at_most(name, worst, 1e-4),
            });
        }
        let name = "end-to-end segmentation pipeline, 16x16 episode";
        checks.push(Check::from_result(
            name,
            end_to_end_gradient_error(11).map(|e| Check::at_most(name, e, 1e-4)),
        ));
        checks
    })
}

fn maps_from(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<Tensor<f64>> {
    (0..n).map(|_| uniform(rng, &[h, w], 0.0, 1.0)).collect()
}

fn merged(maps: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let vars: Vec<_> = maps.iter().map(|m| tape.constant(m.clone())).collect();
    Ok(merge_background(&tape, &vars)?.value().as_ref().clone())
}

fn background_identity() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let map = maps_from(&mut rng, 1, 9, 7).remove(0);
    let seg = merged(std::slice::from_ref(&map))?;
    let worst = map
        .data()
        .iter()
        .zip(seg.data().chunks(2))
        .map(|(&y, px)| (px[1] - (1.0 - y)).abs())
        .fold(0.0, f64::max);
    Ok(Check::at_most("1-way background equals complement", worst, 1e-15))
}

fn masked_attention_rows() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = AsLayerConfig {
        c_in: 3,
        c_out: 4,
        c_hidden: 4,
        heads: 2,
        kernel: 1,
        stride: 1,
        padding: 0,
        norm_groups: 2,
    };
    let layer = AsLayerParams::<f64>::init(cfg, 3)?;
    let corr = uniform(&mut rng, &[2, 2, 4, 4, 3], 0.0, 1.0);
    let mask = nonempty_mask(&mut rng, 4, 4);
    let weights = as_layer_trace(&corr, Some(&mask), &layer)?.weights;
    let l = 16;
    let (mut row_err, mut leak) = (0.0f64, 0.0f64);
    for row in weights.data().chunks(l) {
        row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        for (w, &keep) in row.iter().zip(mask.data()) {
            if !keep {
                leak = leak.max(w.abs());
            }
        }
    }
    Ok(Check::new(
        "masked attention rows",
        row_err <= 1e-10 && leak <= 1e-12,
        format!("row sum error {row_err:.1e}, background weight {leak:.1e}"),
    ))
}

fn threshold_boundary() -> Check {
    let cfg = InferenceConfig::default();
    let at = Tensor::from_fn(&[3, 3], |i| if i == 4 { cfg.delta } else { 0.1 });
    let below = Tensor::from_fn(&[3, 3], |i| if i == 4 { cfg.delta - 1e-9 } else { 0.1 });
    let got = predict_occurrence(&[at, below], &cfg);
    Check::new("maximum equal to threshold counts as present", got == [1, 0], format!("{got:?}"))
}

fn permutation_equivariance() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cfg = InferenceConfig::default();
    let maps = maps_from(&mut rng, 3, 6, 5);
    let perm = [2usize, 0, 1];
    let permuted: Vec<_> = perm.iter().map(|&i| maps[i].clone()).collect();
    let a = predict(&maps, &cfg)?;
    let b = predict(&permuted, &cfg)?;
    let occ_ok = perm.iter().enumerate().all(|(slot, &src)| b.occurrence[slot] == a.occurrence[src]);
    let seg_ok = a.segmentation.data().iter().zip(b.segmentation.data()).all(|(&la, &lb)| {
        let n = perm.len() as u8;
        if la == n + 1 {
            lb == n + 1
        } else {
            perm[lb as usize - 1] == la as usize - 1
        }
    });
    Ok(Check::new(
        "class permutation equivariance",
        occ_ok && seg_ok,
        format!("occurrence {occ_ok}, segmentation {seg_ok}"),
    ))
}

fn kshot_average() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let logits: Vec<_> = (0..3).map(|_| uniform(&mut rng, &[2, 4, 5], -3.0, 3.0)).collect();
    let tape = Tape::new();
    let vars: Vec<_> = logits.iter().map(|l| tape.constant(l.clone())).collect();
    let got = kshot_foreground(&tape, &vars)?.value();
    let mut worst = 0.0f64;
    for i in 0..20 {
        let f: f64 = logits.iter().map(|l| l.data()[i]).sum::<f64>() / 3.0;
        let b: f64 = logits.iter().map(|l| l.data()[20 + i]).sum::<f64>() / 3.0;
        let want = 1.0 / (1.0 + (b - f).exp());
        worst = worst.max((got.data()[i] - want).abs());
    }
    Ok(Check::at_most("k-shot map is the softmax of averaged logits", worst, 1e-12))
}

/// Inference-rule algebra.
pub fn inference_suite() -> Suite {
    Suite::run("inference", || {
        vec![
            Check::from_result("1-way background equals complement", background_identity()),
            Check::from_result("masked attention rows", masked_attention_rows()),
            threshold_boundary(),
            Check::from_result("class permutation equivariance", permutation_equivariance()),
            Check::from_result("k-shot map is the softmax of averaged logits", kshot_average()),
        ]
    })
}

/// Channel plans of the three reference backbones.
pub const REFERENCE_PLANS: [(&str, [usize; 3]); 3] =
    [("resnet50", [4, 6, 3]), ("resnet101", [4, 23, 3]), ("vgg16", [3, 3, 1])];

pub const PARAM_TARGET: f64 = 1.3e6;
pub const PARAM_TOLERANCE: f64 = 0.2;

/// Learnable parameter counts for the reference channel plans.
pub fn parameter_suite() -> Suite {
    Suite::run("parameters", || {
        REFERENCE_PLANS
            .iter()
            .map(|(name, plan)| {
                let cfg = AsnetConfig {
                    level_channels: plan.to_vec(),
                    ..Default::default()
                };
                let label = format!("{name} plan {plan:?}");
                Check::from_result(
                    label.clone(),
                    build_asnet::<f32>(&cfg).map(|net| {
                        let n = net.param_count() as f64;
                        let ok = (n - PARAM_TARGET).abs() <= PARAM_TOLERANCE * PARAM_TARGET;
                        Check::new(label, ok, format!("{n} learnable parameters"))
                    }),
                )
            })
            .collect()
    })
}

fn small_world() -> Result<Dataset> {
    generate_dataset(&ShapeWorldSpec {
        images_per_class: 4,
        objects_per_image: (1, 2),
        ..Default::default()
    })
}

fn correlation_properties() -> Result<Vec<Check>> {
    let bb = build_backbone::<f64>(&BackboneConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a = bb.extract_pyramid(&uniform(&mut rng, &[3, 64, 64], 0.0, 1.0))?;
    let b = bb.extract_pyramid(&uniform(&mut rng, &[3, 64, 64], 0.0, 1.0))?;
    let ab = build_hypercorrelation(&a, &b)?;
    let ba = build_hypercorrelation(&b, &a)?;
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut sym = 0.0f64;
    for (x, y) in ab.levels.iter().zip(&ba.levels) {
        for &v in x.data() {
            range = (range.0.min(v), range.1.max(v));
        }
        let s = x.shape();
        let (hq, wq, hs, ws, c) = (s[0], s[1], s[2], s[3], s[4]);
        for (i, &v) in x.data().iter().enumerate() {
            let (ch, rest) = (i % c, i / c);
            let (sj, si, qj, qi) = (rest % ws, rest / ws % hs, rest / (ws * hs) % wq, rest / (ws * hs * wq));
            let t = (((si * ws + sj) * hq + qi) * wq + qj) * c + ch;
            sym = sym.max((v - y.data()[t]).abs());
        }
    }
    let mut scaled = a.clone();
    for t in scaled.groups.iter_mut().flatten() {
        *t = t.map(|v| v * 3.5);
    }
    let sc = build_hypercorrelation(&scaled, &b)?;
    let scale = ab
        .levels
        .iter()
        .zip(&sc.levels)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max);
    Ok(vec![
        Check::new(
            "correlation range",
            range.0 >= 0.0 && range.1 <= 1.0 + 1e-6,
            format!("[{:.3}, {:.6}]", range.0, range.1),
        ),
        Check::at_most("correlation query/support symmetry", sym, 1e-10),
        Check::at_most("correlation scale invariance", scale, 1e-6),
    ])
}

fn masking_equivalence() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let cfg = AsLayerConfig {
        c_in: 2,
        c_out: 8,
        c_hidden: 4,
        heads: 2,
        kernel: 3,
        stride: 2,
        padding: 1,
        norm_groups: 2,
    };
    let layer = AsLayerParams::<f64>::init(cfg, 5)?;
    let corr = uniform(&mut rng, &[2, 3, 6, 6, 2], 0.0, 1.0);
    let off = as_layer_forward(&corr, None, &layer)?;
    let on = as_layer_forward(&corr, Some(&Mask::filled(6, 6, true)), &layer)?;
    Ok(Check::new(
        "all-foreground mask equals unmasked attention",
        off.data() == on.data(),
        format!("max difference {:.1e}", off.max_abs_diff(&on)),
    ))
}

fn episode_properties(data: &Dataset) -> Result<Vec<Check>> {
    let pool = data.all_classes();
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for (n, k) in [(1, 1), (2, 1), (2, 2)] {
        let sampler = EpisodeSampler::new(data, &pool, n, k, 0.01)?;
        let mut bad = None;
        for i in 0..300 {
            if let Err(e) = sampler.sample(&mut rng).and_then(|ep| ep.validate(data)) {
                bad = Some(format!("episode {i}: {e}"));
                break;
            }
        }
        checks.push(Check::new(
            format!("{n}-way {k}-shot episodes satisfy their invariants"),
            bad.is_none(),
            bad.unwrap_or_else(|| "300 episodes".into()),
        ));
    }

    let sampler = EpisodeSampler::new(data, &pool, 2, 1, 0.01)?;
    let mut outcomes = Vec::new();
    for _ in 0..60 {
        let ep = sampler.sample(&mut rng)?;
        let y_pred = ep.y_gt.iter().map(|&y| if rng.gen_bool(0.2) { 1 - y } else { y }).collect();
        let seg_pred = LabelMap::new(
            ep.seg_gt.height(),
            ep.seg_gt.width(),
            ep.seg_gt.data().iter().map(|&l| if rng.gen_bool(0.1) { 1 + (l % 3) } else { l }).collect(),
        )?;
        outcomes.push(EpisodeOutcome {
            classes: ep.classes.clone(),
            y_gt: ep.y_gt.clone(),
            y_pred,
            seg_gt: ep.seg_gt.clone(),
            seg_pred,
        });
    }
    let forward = compute_metrics(&outcomes)?;
    outcomes.reverse();
    let backward = compute_metrics(&outcomes)?;
    checks.push(Check::new(
        "exact ratio never exceeds class accuracy",
        forward.exact_ratio <= forward.class_accuracy,
        format!("{:.3} <= {:.3}", forward.exact_ratio, forward.class_accuracy),
    ));
    checks.push(Check::new(
        "mIoU independent of episode order",
        forward.miou == backward.miou,
        format!("{:.6} vs {:.6}", forward.miou, backward.miou),
    ));
    Ok(checks)
}

fn dataset_determinism() -> Result<Check> {
    let spec = ShapeWorldSpec {
        images_per_class: 2,
        seed: 9,
        ..Default::default()
    };
    let a = generate_dataset(&spec)?;
    let b = generate_dataset(&spec)?;
    let same = a.samples.iter().zip(&b.samples).all(|(x, y)| x.pixels == y.pixels);
    Ok(Check::new("dataset generation is deterministic", same, format!("{} images", a.len())))
}

fn frozen_backbone(data: &Dataset) -> Result<Check> {
    let config = ModelConfig::default();
    let mut model = Model::<f32>::new(&config)?;
    let before = model.backbone.params().to_bytes();
    let mut cfg = TrainConfig::for_loss(LossMode::Segmentation);
    cfg.steps = 2;
    train(&mut model, data, &data.all_classes(), &cfg, |_, _| {})?;
    Ok(Check::new(
        "frozen backbone is bit-unchanged by training",
        before == model.backbone.params().to_bytes(),
        "2 steps",
    ))
}

/// Cross-module invariants.
pub fn invariant_suite() -> Suite {
    Suite::run("invariants", || {
        let mut checks = Vec::new();
        match correlation_properties() {
            Ok(c) => checks.extend(c),
            Err(e) => checks.push(Check::new("correlation properties", false, e.to_string())),
        }
        checks.push(Check::from_result("all-foreground mask equals unmasked attention", masking_equivalence()));
        checks.push(Check::from_result("dataset generation is deterministic", dataset_determinism()));
        match small_world() {
            Ok(data) => {
                match episode_properties(&data) {
                    Ok(c) => checks.extend(c),
                    Err(e) => checks.push(Check::new("episode properties", false, e.to_string())),
                }
                checks.push(Check::from_result("frozen backbone", frozen_backbone(&data)));
            }
            Err(e) => checks.push(Check::new("shape-world generation", false, e.to_string())),
        }
        checks
    })
}

/// Every suite, in the order `ifsl verify` prints them.
pub fn run_all(gradient_points: usize) -> Vec<Suite> {
    vec![
        oracle_suite(),
        gradient_suite(gradient_points),
        inference_suite(),
        parameter_suite(),
        invariant_suite(),
    ]
}
