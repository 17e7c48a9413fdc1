//! Run configuration: a TOML file with `[data]`, `[model]`, `[train]` and
//! `[eval]` sections. Missing keys take the library defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use ifsl::asnet::AsnetConfig;
use ifsl::backbone::BackboneConfig;
use ifsl::harness::ShapeWorldSpec;
use ifsl::ifsl::{ClassLossForm, InferenceConfig};
use ifsl::train::{EvalConfig, LossMode, ModelConfig, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub classes: usize,
    pub image_size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub folds: usize,
    pub images_per_class: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_overlap: f64,
    pub seed: u64,
    /// Held-out fold; training then uses the other folds and evaluation this
    /// one. Without it both use every class.
    pub fold: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = ShapeWorldSpec::default();
        Self {
            dir: None,
            classes: spec.num_classes,
            image_size: spec.image_size,
            objects_min: spec.objects_per_image.0,
            objects_max: spec.objects_per_image.1,
            folds: spec.folds,
            images_per_class: spec.images_per_class,
            scale_min: spec.object_scale.0,
            scale_max: spec.object_scale.1,
            max_overlap: spec.max_overlap,
            seed: spec.seed,
            fold: None,
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> ShapeWorldSpec {
        ShapeWorldSpec {
            num_classes: self.classes,
            image_size: self.image_size,
            objects_per_image: (self.objects_min, self.objects_max),
            folds: self.folds,
            images_per_class: self.images_per_class,
            object_scale: (self.scale_min, self.scale_max),
            max_overlap: self.max_overlap,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub stem_channels: usize,
    pub blocks_per_stage: [usize; 3],
    pub layers_per_group: [usize; 3],
    pub backbone_seed: u64,
    pub train_backbone: bool,
    pub squeeze_channels: [usize; 2],
    pub decoder_channels: usize,
    pub hidden_divisor: usize,
    pub heads: usize,
    pub norm_groups: usize,
    pub masked_attention: bool,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let net = AsnetConfig::default();
        Self {
            stem_channels: bb.stem_channels,
            blocks_per_stage: bb.blocks_per_stage,
            layers_per_group: bb.layers_per_group,
            backbone_seed: bb.seed,
            train_backbone: !bb.frozen,
            squeeze_channels: net.squeeze_channels,
            decoder_channels: net.decoder_channels,
            hidden_divisor: net.hidden_divisor,
            heads: net.heads,
            norm_groups: net.norm_groups,
            masked_attention: net.masked_attention,
            seed: net.seed,
        }
    }
}

impl ModelSection {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stem_channels: self.stem_channels,
                blocks_per_stage: self.blocks_per_stage,
                layers_per_group: self.layers_per_group,
                seed: self.backbone_seed,
                frozen: !self.train_backbone,
            },
            asnet: AsnetConfig {
                level_channels: self.layers_per_group.to_vec(),
                squeeze_channels: self.squeeze_channels,
                decoder_channels: self.decoder_channels,
                hidden_divisor: self.hidden_divisor,
                heads: self.heads,
                norm_groups: self.norm_groups,
                masked_attention: self.masked_attention,
                seed: self.seed,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub loss: String,
    pub class_loss: String,
    /// Defaults by loss: 1e-3 with a segmentation term, 1e-4 without.
    pub lr: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub seed: u64,
    pub min_fg_fraction: f64,
    /// Defaults to on unless the loss is classification only.
    pub support_masks: Option<bool>,
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::for_loss(LossMode::Segmentation);
        Self {
            loss: "segmentation".into(),
            class_loss: "bce".into(),
            lr: None,
            steps: t.steps,
            batch_size: t.batch_size,
            n_way: t.n_way,
            k_shot: t.k_shot,
            seed: t.seed,
            min_fg_fraction: t.min_fg_fraction,
            support_masks: None,
            checkpoint: PathBuf::from("model.ckpt"),
            log: None,
        }
    }
}

pub fn parse_class_loss(s: &str) -> Result<ClassLossForm, CliError> {
    match s {
        "bce" => Ok(ClassLossForm::Bce),
        "positive" | "positive-only" => Ok(ClassLossForm::PositiveOnly),
        _ => Err(CliError::Config(format!("unknown class loss {s:?} (bce, positive)"))),
    }
}

impl TrainSection {
    pub fn config(&self) -> Result<TrainConfig, CliError> {
        let loss: LossMode = self.loss.parse().map_err(|e: ifsl::Error| CliError::Config(e.to_string()))?;
        let base = TrainConfig::for_loss(loss);
        Ok(TrainConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            loss,
            class_loss_form: parse_class_loss(&self.class_loss)?,
            lr: self.lr.unwrap_or(base.lr),
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            min_fg_fraction: self.min_fg_fraction,
            support_masks: self.support_masks.unwrap_or(base.support_masks),
        })
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub seed: u64,
    pub delta: f64,
    pub min_fg_fraction: f64,
    /// Defaults to the training setting.
    pub support_masks: Option<bool>,
    pub report: Option<PathBuf>,
    pub episodes_csv: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            n_way: e.n_way,
            k_shot: e.k_shot,
            episodes: e.episodes,
            seed: e.seed,
            delta: e.inference.delta,
            min_fg_fraction: e.min_fg_fraction,
            support_masks: None,
            report: None,
            episodes_csv: None,
            predictions: None,
        }
    }
}

impl EvalSection {
    pub fn config(&self, train: &TrainConfig) -> EvalConfig {
        EvalConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            episodes: self.episodes,
            seed: self.seed,
            inference: InferenceConfig { delta: self.delta },
            min_fg_fraction: self.min_fg_fraction,
            support_masks: self.support_masks.unwrap_or(train.support_masks),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}
