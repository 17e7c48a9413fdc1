//! Model wrapper, Adam, and the episodic training and evaluation loops.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::asnet::{asnet_forward_var, build_asnet, AsNet, AsnetConfig};
use crate::backbone::{build_backbone, Backbone, BackboneConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::harness::metrics::{EpisodeOutcome, MetricAccumulator, MetricReport};
use crate::harness::{Dataset, Episode, EpisodeSampler, ShapeWorldSpec};
use crate::hypercorrelation::{build_hypercorrelation_on, mask_support_features};
use crate::ifsl::{
    kshot_foreground, loss_classification, loss_segmentation, merge_background, one_hot, predict, ClassLossForm,
    InferenceConfig,
};
use crate::tensor::{BoundParams, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub asnet: AsnetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let asnet = AsnetConfig {
            level_channels: backbone.layers_per_group.to_vec(),
            ..Default::default()
        };
        Self { backbone, asnet }
    }
}

pub struct Model<R> {
    pub backbone: Backbone<R>,
    pub net: AsNet<R>,
}

impl<R: Real> Model<R> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        if config.asnet.level_channels != config.backbone.layers_per_group {
            return Err(Error::Invalid(format!(
                "network expects level channels {:?}, backbone emits {:?}",
                config.asnet.level_channels, config.backbone.layers_per_group
            )));
        }
        Ok(Self {
            backbone: build_backbone(&config.backbone)?,
            net: build_asnet(&config.asnet)?,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.config().clone(),
            asnet: self.net.config.clone(),
        }
    }

    /// Backbone and network parameters in one store.
    pub fn all_params(&self) -> ParamStore<R> {
        let mut all = self.backbone.params().clone();
        all.extend(self.net.params.clone()).expect("disjoint parameter names");
        all
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.all_params().save(path)
    }

    /// Loads a checkpoint written by [`Model::save`] for the same configuration.
    pub fn load(config: &ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(config)?;
        let store = ParamStore::<R>::load(path)?;
        if store.len() != model.backbone.params().len() + model.net.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters in checkpoint, configuration has {}",
                store.len(),
                model.backbone.params().len() + model.net.params.len()
            )));
        }
        model.backbone.load_params(&store)?;
        let mut net = ParamStore::new();
        for p in model.net.params.iter() {
            let v = store.tensor(&p.name)?;
            if v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("{}: shape {:?}, expected {:?}", p.name, v.shape(), p.value.shape())));
            }
            net.insert(p.name.clone(), v.as_ref().clone(), true);
        }
        model.net.params = net;
        Ok(model)
    }
}

/// Backbone features per dataset image, computed on first use when the
/// backbone is frozen.
pub struct FeatureCache<R> {
    pyramids: Vec<Option<FeaturePyramid<R>>>,
}

impl<R: Real> FeatureCache<R> {
    pub fn new(data: &Dataset) -> Self {
        Self {
            pyramids: vec![None; data.len()],
        }
    }

    pub fn get(&mut self, backbone: &Backbone<R>, data: &Dataset, index: usize) -> Result<&FeaturePyramid<R>> {
        if self.pyramids[index].is_none() {
            self.pyramids[index] = Some(backbone.extract_pyramid(&data.image(index))?);
        }
        Ok(self.pyramids[index].as_ref().expect("filled above"))
    }
}

fn lift<'t, R: Real>(tape: &'t Tape<R>, p: &FeaturePyramid<R>) -> Vec<Vec<Var<'t, R>>> {
    p.groups
        .iter()
        .map(|g| g.iter().map(|t| tape.constant(t.clone())).collect())
        .collect()
}

/// Everything a forward pass needs besides the tape.
pub struct EpisodeContext<'a, R> {
    pub model: &'a Model<R>,
    pub data: &'a Dataset,
    pub support_masks: bool,
}

impl<R: Real> EpisodeContext<'_, R> {
    fn features<'t>(
        &self,
        tape: &'t Tape<R>,
        backbone: Option<&BoundParams<'t, R>>,
        cache: &mut FeatureCache<R>,
        image: usize,
    ) -> Result<Vec<Vec<Var<'t, R>>>> {
        match backbone {
            Some(bound) => self.model.backbone.forward(bound, tape.constant(self.data.image(image))),
            None => Ok(lift(tape, cache.get(&self.model.backbone, self.data, image)?)),
        }
    }

    /// The N class-wise foreground maps `[H, W]` of an episode.
    pub fn foreground_maps<'t>(
        &self,
        tape: &'t Tape<R>,
        net: &BoundParams<'t, R>,
        backbone: Option<&BoundParams<'t, R>>,
        cache: &mut FeatureCache<R>,
        episode: &Episode,
    ) -> Result<Vec<Var<'t, R>>> {
        let size = self.data.image_size();
        let query = self.features(tape, backbone, cache, episode.query)?;
        let mut maps = Vec::with_capacity(episode.n_way());
        for shots in &episode.supports {
            let mut logits = Vec::with_capacity(shots.len());
            for shot in shots {
                let mut support = self.features(tape, backbone, cache, shot.image)?;
                let mask = self.support_masks.then_some(&shot.mask);
                if let Some(m) = mask {
                    support = mask_support_features(tape, &support, m)?;
                }
                let hyper = build_hypercorrelation_on(tape, &query, &support)?;
                logits.push(asnet_forward_var(&self.model.net.config, net, &hyper, mask, size, size, None)?);
            }
            maps.push(kshot_foreground(tape, &logits)?);
        }
        Ok(maps)
    }

    /// Foreground maps as plain tensors, without recording gradients.
    pub fn infer(&self, cache: &mut FeatureCache<R>, episode: &Episode) -> Result<Vec<Tensor<R>>> {
        let tape = Tape::new();
        let mut frozen = self.model.net.params.clone();
        frozen.set_trainable(false);
        let bound = frozen.bind(&tape);
        let maps = self.foreground_maps(&tape, &bound, None, cache, episode)?;
        Ok(maps.into_iter().map(|m| m.value().as_ref().clone()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Classification,
    Segmentation,
    Both,
}

impl LossMode {
    /// Learning rate used when none is configured.
    pub fn default_lr(self) -> f64 {
        match self {
            LossMode::Classification => 1e-4,
            LossMode::Segmentation | LossMode::Both => 1e-3,
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "cls" => Ok(LossMode::Classification),
            "segmentation" | "seg" => Ok(LossMode::Segmentation),
            "both" => Ok(LossMode::Both),
            _ => Err(Error::Invalid(format!("unknown loss mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub loss: LossMode,
    pub class_loss_form: ClassLossForm,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub min_fg_fraction: f64,
    /// Weak supervision sees class tags only, so attention masks are off.
    pub support_masks: bool,
}

impl TrainConfig {
    pub fn for_loss(loss: LossMode) -> Self {
        Self {
            n_way: 1,
            k_shot: 1,
            loss,
            class_loss_form: ClassLossForm::Bce,
            lr: loss.default_lr(),
            steps: 2000,
            batch_size: 1,
            seed: 0,
            min_fg_fraction: 0.01,
            support_masks: loss != LossMode::Classification,
        }
    }
}

/// Adam without weight decay.
pub struct Adam<R> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<Option<(Tensor<R>, Tensor<R>)>>,
}

impl<R: Real> Adam<R> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Updates every trainable parameter that has a gradient; `grads` is in
    /// store order.
    pub fn step(&mut self, params: &mut ParamStore<R>, grads: &[Option<Tensor<R>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Invalid(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.moments.resize_with(params.len(), || None);
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let step = R::lit(self.lr / c1);
        let inv_c2 = R::lit(1.0 / c2);
        let eps = R::lit(self.eps);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let (Some(g), true) = (g, p.trainable) else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::Invalid(format!("gradient shape for {}", p.name)));
            }
            let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let w = Arc::make_mut(&mut p.value);
            for (((w, m), v), &g) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + (R::one() - b1) * g;
                *v = b2 * *v + (R::one() - b2) * g * g;
                *w -= step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Loss of one episode recorded on `tape`.
pub fn episode_loss<'t, R: Real>(
    tape: &'t Tape<R>,
    maps: &[Var<'t, R>],
    episode: &Episode,
    loss: LossMode,
    form: ClassLossForm,
) -> Result<Var<'t, R>> {
    let cls = || loss_classification(tape, maps, &episode.y_gt, form);
    let seg = || -> Result<Var<'t, R>> {
        let target = one_hot::<R>(&episode.seg_gt, episode.n_way() + 1)?;
        loss_segmentation(merge_background(tape, maps)?, &target)
    };
    match loss {
        LossMode::Classification => cls(),
        LossMode::Segmentation => seg(),
        LossMode::Both => cls()?.add(&seg()?),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Trains the network on episodes drawn from `pool`; `on_step` sees each step's loss.
pub fn train<R: Real>(
    model: &mut Model<R>,
    data: &Dataset,
    pool: &[usize],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainLog> {
    if cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Invalid(format!("batch size {} with learning rate {}", cfg.batch_size, cfg.lr)));
    }
    let sampler = EpisodeSampler::new(data, pool, cfg.n_way, cfg.k_shot, cfg.min_fg_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = FeatureCache::new(data);
    let mut net_opt = Adam::new(cfg.lr);
    let mut bb_opt = Adam::new(cfg.lr);
    let train_backbone = !model.backbone.config().frozen;
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let mut net_grads: Vec<Option<Tensor<R>>> = vec![None; model.net.params.len()];
        let mut bb_grads: Vec<Option<Tensor<R>>> = vec![None; model.backbone.params().len()];
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let episode = sampler.sample(&mut rng)?;
            let tape = Tape::new();
            let net_bound = model.net.params.bind(&tape);
            let bb_bound = train_backbone.then(|| model.backbone.params().bind(&tape));
            let ctx = EpisodeContext {
                model,
                data,
                support_masks: cfg.support_masks,
            };
            let maps = ctx.foreground_maps(&tape, &net_bound, bb_bound.as_ref(), &mut cache, &episode)?;
            let loss = episode_loss(&tape, &maps, &episode, cfg.loss, cfg.class_loss_form)?;
            let value = loss.value().item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { step });
            }
            total += value;
            let grads = tape.backward(loss)?;
            let accumulate = |acc: &mut [Option<Tensor<R>>], bound: &BoundParams<'_, R>| {
                for (slot, &v) in acc.iter_mut().zip(bound.vars()) {
                    if let Some(g) = grads.get(v) {
                        match slot {
                            Some(a) => a.add_assign(g),
                            None => *slot = Some(g.clone()),
                        }
                    }
                }
            };
            accumulate(&mut net_grads, &net_bound);
            if let Some(b) = &bb_bound {
                accumulate(&mut bb_grads, b);
            }
        }
        let scale = R::lit(1.0 / cfg.batch_size as f64);
        for g in net_grads.iter_mut().chain(bb_grads.iter_mut()).flatten() {
            *g = g.map(|v| v * scale);
            if !g.all_finite() {
                return Err(Error::Diverged { step });
            }
        }
        net_opt.step(&mut model.net.params, &net_grads)?;
        if train_backbone {
            bb_opt.step(model.backbone.params_mut(), &bb_grads)?;
        }
        let mean = total / cfg.batch_size as f64;
        log.losses.push(mean);
        on_step(step, mean);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub seed: u64,
    pub inference: InferenceConfig,
    pub min_fg_fraction: f64,
    pub support_masks: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 1,
            k_shot: 1,
            episodes: 200,
            seed: 1,
            inference: InferenceConfig::default(),
            min_fg_fraction: 0.01,
            support_masks: true,
        }
    }
}

/// One evaluated episode: query image index and outcome.
pub type EpisodeRecord = (usize, EpisodeOutcome);

/// Runs a seeded stream of episodes through the model.
pub fn evaluate<R: Real>(
    model: &Model<R>,
    data: &Dataset,
    pool: &[usize],
    cfg: &EvalConfig,
) -> Result<(MetricReport, Vec<EpisodeRecord>)> {
    cfg.inference.validate()?;
    let sampler = EpisodeSampler::new(data, pool, cfg.n_way, cfg.k_shot, cfg.min_fg_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = FeatureCache::new(data);
    let ctx = EpisodeContext {
        model,
        data,
        support_masks: cfg.support_masks,
    };
    let mut acc = MetricAccumulator::new();
    let mut records = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        let episode = sampler.sample(&mut rng)?;
        let maps = ctx.infer(&mut cache, &episode)?;
        let pred = predict(&maps, &cfg.inference)?;
        let outcome = EpisodeOutcome {
            classes: episode.classes.clone(),
            y_gt: episode.y_gt.clone(),
            y_pred: pred.occurrence,
            seg_gt: episode.seg_gt.clone(),
            seg_pred: pred.segmentation,
        };
        acc.add(&outcome)?;
        records.push((episode.query, outcome));
    }
    Ok((acc.report(), records))
}

/// A full experiment: dataset, model, optimisation and evaluation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub data: ShapeWorldSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Overfit run on a small single-object shape-world: 8 classes, 3 images
/// each, 64x64, 1-way 1-shot episodes in batches of 8 for 2000 steps,
/// evaluated on 200 episodes from the same images. lr is 5e-4 with a
/// segmentation term and the 1e-4 default for the classification loss alone.
pub fn overfit_protocol(loss: LossMode) -> Protocol {
    let train = TrainConfig {
        lr: if loss == LossMode::Classification { 1e-4 } else { 5e-4 },
        steps: 2000,
        batch_size: 8,
        ..TrainConfig::for_loss(loss)
    };
    Protocol {
        data: ShapeWorldSpec {
            images_per_class: 3,
            ..Default::default()
        },
        model: ModelConfig::default(),
        eval: EvalConfig {
            support_masks: train.support_masks,
            ..Default::default()
        },
        train,
    }
}
