//! Frozen convolutional feature extractor producing a three-group pyramid.
//!
//! Two stride-2 stem convolutions bring the image to 1/4 resolution; each of
//! the three stages then halves the resolution once more (strides 8, 16, 32)
//! and runs `blocks_per_stage[p]` 3x3 convolutions. Every convolution is
//! followed by a parameter-free per-channel normalization. Group `p` of the
//! pyramid holds the last `layers_per_group[p]` normalized outputs of stage
//! `p`, taken before their ReLU.

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Initializer, ParamStore, Real, Tape, Tensor, Var};

pub const GROUPS: usize = 3;

const DOWN_KERNEL: usize = 4;

/// Guard of the per-channel normalization after every convolution.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub blocks_per_stage: [usize; GROUPS],
    pub layers_per_group: [usize; GROUPS],
    pub seed: u64,
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            blocks_per_stage: [2, 2, 1],
            layers_per_group: [2, 2, 1],
            seed: 0,
            frozen: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::Invalid("backbone needs at least one stem channel".into()));
        }
        for p in 0..GROUPS {
            let (blocks, layers) = (self.blocks_per_stage[p], self.layers_per_group[p]);
            if blocks == 0 {
                return Err(Error::Invalid(format!("backbone stage {p} is empty")));
            }
            if layers == 0 || layers > blocks + 1 {
                return Err(Error::Invalid(format!(
                    "stage {p} cannot emit {layers} layers from {blocks} blocks"
                )));
            }
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.stem_channels << (stage + 1)
    }

    /// Spatial extent of group `p` for an input extent `n`.
    pub fn group_extent(&self, n: usize, p: usize) -> usize {
        (0..p + 3).fold(n, |e, _| (e + 2 - DOWN_KERNEL) / 2 + 1)
    }
}

/// Per-image feature maps, grouped by resolution. Each map is `[C, h, w]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<R> {
    pub groups: Vec<Vec<Tensor<R>>>,
}

impl<R: Real> FeaturePyramid<R> {
    pub fn layer_counts(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn spatial(&self, group: usize) -> (usize, usize) {
        let s = self.groups[group][0].shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<R> {
    config: BackboneConfig,
    params: ParamStore<R>,
}

/// Builds a backbone with parameters drawn deterministically from `config.seed`.
pub fn build_backbone<R: Real>(config: &BackboneConfig) -> Result<Backbone<R>> {
    config.validate()?;
    let mut init = Initializer::new(config.seed);
    let mut params = ParamStore::new();
    let trainable = !config.frozen;
    let mut add = |params: &mut ParamStore<R>, name: String, c_in: usize, c_out: usize, k: usize| {
        // He-uniform weights keep activation scale roughly constant through the
        // random stack
        let (w, b) = init.conv::<R>(c_in, c_out, k, 6.0);
        params.insert(format!("{name}.weight"), w, trainable);
        params.insert(format!("{name}.bias"), b, trainable);
    };
    let s = config.stem_channels;
    add(&mut params, "backbone.stem0".into(), 3, s, DOWN_KERNEL);
    add(&mut params, "backbone.stem1".into(), s, s, DOWN_KERNEL);
    let mut c_prev = s;
    for p in 0..GROUPS {
        let c = config.stage_channels(p);
        add(&mut params, format!("backbone.stage{p}.down"), c_prev, c, DOWN_KERNEL);
        for b in 0..config.blocks_per_stage[p] {
            add(&mut params, format!("backbone.stage{p}.block{b}"), c, c, 3);
        }
        c_prev = c;
    }
    Ok(Backbone {
        config: config.clone(),
        params,
    })
}

impl<R: Real> Backbone<R> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    /// Replaces parameters (e.g. from a checkpoint), re-applying the frozen flag.
    pub fn load_params(&mut self, source: &ParamStore<R>) -> Result<()> {
        let mut next = ParamStore::new();
        for p in self.params.iter() {
            let v = source.tensor(&p.name)?;
            if v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            next.insert(p.name.clone(), v.as_ref().clone(), !self.config.frozen);
        }
        self.params = next;
        Ok(())
    }

    /// Extents must be multiples of 16 and at least 64, so the coarsest group
    /// keeps a 2x2 grid for its normalization.
    pub fn check_image_size(&self, h: usize, w: usize) -> Result<()> {
        if h < 64 || w < 64 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
            return Err(Error::Invalid(format!(
                "image {h}x{w}: extents must be multiples of 16 and at least 64"
            )));
        }
        Ok(())
    }

    /// Forward pass on a tape. `image` is `[3, H, W]` with values in `[0, 1]`.
    pub fn forward<'t>(
        &self,
        params: &BoundParams<'t, R>,
        image: Var<'t, R>,
    ) -> Result<Vec<Vec<Var<'t, R>>>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Invalid(format!("backbone input {shape:?}, expected [3, H, W]")));
        }
        self.check_image_size(shape[1], shape[2])?;
        let conv = |x: Var<'t, R>, name: &str, stride: usize, pad: usize| -> Result<Var<'t, R>> {
            let w = params.get(&format!("{name}.weight"))?;
            let b = params.get(&format!("{name}.bias"))?;
            // per-channel normalization stops the random stack from collapsing
            // every position onto one shared direction
            let y = x.conv2d(&w, Some(&b), stride, pad)?;
            let c = y.shape()[0];
            let ones = y.tape().constant(Tensor::full(&[c], R::one()));
            let zeros = y.tape().constant(Tensor::zeros(&[c]));
            y.group_norm(c, &ones, &zeros, R::lit(NORM_EPS))
        };
        let mut x = image.scale(R::lit(2.0))?.add_scalar(R::lit(-1.0))?;
        x = conv(x, "backbone.stem0", 2, 1)?.relu()?;
        x = conv(x, "backbone.stem1", 2, 1)?.relu()?;
        let mut groups = Vec::with_capacity(GROUPS);
        for p in 0..GROUPS {
            let pre = conv(x, &format!("backbone.stage{p}.down"), 2, 1)?;
            x = pre.relu()?;
            let mut outputs = vec![pre];
            for b in 0..self.config.blocks_per_stage[p] {
                let pre = conv(x, &format!("backbone.stage{p}.block{b}"), 1, 1)?;
                x = pre.relu()?;
                outputs.push(pre);
            }
            let keep = self.config.layers_per_group[p];
            groups.push(outputs.split_off(outputs.len() - keep));
        }
        Ok(groups)
    }

    /// Feature pyramid of one image; a pure function of parameters and image.
    pub fn extract_pyramid(&self, image: &Tensor<R>) -> Result<FeaturePyramid<R>> {
        let tape = Tape::new();
        let mut frozen = self.params.clone();
        frozen.set_trainable(false);
        let bound = frozen.bind(&tape);
        let groups = self.forward(&bound, tape.constant(image.clone()))?;
        Ok(FeaturePyramid {
            groups: groups
                .into_iter()
                .map(|g| g.into_iter().map(|v| v.value().as_ref().clone()).collect())
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_extents_follow_floor_arithmetic() {
        let cfg = BackboneConfig::default();
        let sizes: Vec<_> = (0..3).map(|p| cfg.group_extent(128, p)).collect();
        assert_eq!(sizes, vec![16, 8, 4]);
        let sizes: Vec<_> = (0..3).map(|p| cfg.group_extent(400, p)).collect();
        assert_eq!(sizes, vec![50, 25, 12]);
    }

    #[test]
    fn rejects_invalid_configs() {
        let cfg = BackboneConfig {
            stem_channels: 0,
            ..Default::default()
        };
        assert!(build_backbone::<f32>(&cfg).is_err());
        let mut cfg = BackboneConfig::default();
        cfg.blocks_per_stage[1] = 0;
        assert!(build_backbone::<f32>(&cfg).is_err());
        let mut cfg = BackboneConfig::default();
        cfg.layers_per_group[2] = 3;
        assert!(build_backbone::<f32>(&cfg).is_err());
    }

    #[test]
    fn rejects_indivisible_images() {
        let bb = build_backbone::<f32>(&BackboneConfig::default()).unwrap();
        assert!(bb.extract_pyramid(&Tensor::zeros(&[3, 72, 64])).is_err());
        assert!(bb.extract_pyramid(&Tensor::zeros(&[3, 16, 16])).is_err());
        assert!(bb.extract_pyramid(&Tensor::zeros(&[3, 48, 48])).is_err());
    }
}
