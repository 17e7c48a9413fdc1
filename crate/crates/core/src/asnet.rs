//! Full correlation-to-mask network: per-level attentive squeeze stacks,
//! coarse-to-fine fusion, and a convolutional decoder producing two logit
//! channels (foreground, background).

use crate::attentive_squeeze::{as_layer_cf, init_as_layer, AsLayerConfig};
use crate::error::{shape_err, Error, Result};
use crate::hypercorrelation::Hypercorrelation;
use crate::mask::Mask;
use crate::tensor::{BoundParams, Initializer, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AsnetConfig {
    /// Correlation channels per pyramid level, finest first.
    pub level_channels: Vec<usize>,
    /// Output widths of the two squeeze layers of each level; the second is
    /// also the width of every fusion layer.
    pub squeeze_channels: [usize; 2],
    pub decoder_channels: usize,
    /// Attention width is `c_out / hidden_divisor`.
    pub hidden_divisor: usize,
    pub heads: usize,
    pub norm_groups: usize,
    pub masked_attention: bool,
    pub align_corners: bool,
    pub seed: u64,
}

impl Default for AsnetConfig {
    fn default() -> Self {
        Self {
            level_channels: vec![2, 2, 1],
            squeeze_channels: [32, 128],
            decoder_channels: 64,
            hidden_divisor: 2,
            heads: 8,
            norm_groups: 4,
            masked_attention: true,
            align_corners: true,
            seed: 0,
        }
    }
}

/// One named layer of the network.
#[derive(Clone, Debug)]
pub struct PlannedLayer {
    pub name: String,
    pub config: AsLayerConfig,
}

impl AsnetConfig {
    pub fn levels(&self) -> usize {
        self.level_channels.len()
    }

    fn as_config(&self, c_in: usize, c_out: usize, (kernel, stride, padding): (usize, usize, usize)) -> AsLayerConfig {
        AsLayerConfig {
            c_in,
            c_out,
            c_hidden: c_out / self.hidden_divisor.max(1),
            heads: self.heads,
            kernel,
            stride,
            padding,
            norm_groups: self.norm_groups,
        }
    }

    /// Squeeze stack of level `p` (0 = finest).
    pub fn level_plan(&self, p: usize) -> Vec<PlannedLayer> {
        let [c0, c1] = self.squeeze_channels;
        let second = if p + 1 == self.levels() { (3, 2, 1) } else { (5, 4, 2) };
        vec![
            PlannedLayer {
                name: format!("level{p}.as0"),
                config: self.as_config(self.level_channels[p], c0, (5, 4, 2)),
            },
            PlannedLayer {
                name: format!("level{p}.as1"),
                config: self.as_config(c0, c1, second),
            },
        ]
    }

    /// Fusion pair that merges into level `p`.
    pub fn fusion_plan(&self, p: usize) -> Vec<PlannedLayer> {
        let c = self.squeeze_channels[1];
        vec![
            PlannedLayer {
                name: format!("fuse{p}.as0"),
                config: self.as_config(c, c, (1, 1, 0)),
            },
            PlannedLayer {
                name: format!("fuse{p}.as1"),
                config: self.as_config(c, c, (2, 1, 0)),
            },
        ]
    }

    /// Decoder convolutions as `(name, c_in, c_out)`, all 3x3.
    pub fn decoder_plan(&self) -> Vec<(String, usize, usize)> {
        let (c, d) = (self.squeeze_channels[1], self.decoder_channels);
        [(c, c), (c, d), (d, d), (d, 2)]
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| (format!("decoder.conv{i}"), a, b))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels() < 1 || self.level_channels.contains(&0) {
            return Err(Error::Invalid(format!("level channels {:?}", self.level_channels)));
        }
        if self.decoder_channels == 0 || self.hidden_divisor == 0 {
            return Err(Error::Invalid("decoder width and hidden divisor must be positive".into()));
        }
        for p in 0..self.levels() {
            for l in self.level_plan(p).iter().chain(&self.fusion_plan(p)) {
                l.config.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AsNet<R> {
    pub config: AsnetConfig,
    pub params: ParamStore<R>,
}

pub fn build_asnet<R: Real>(config: &AsnetConfig) -> Result<AsNet<R>> {
    config.validate()?;
    let mut init = Initializer::new(config.seed);
    let mut params = ParamStore::new();
    for p in 0..config.levels() {
        for l in config.level_plan(p) {
            init_as_layer(&l.config, &l.name, &mut init, &mut params)?;
        }
    }
    for p in (0..config.levels() - 1).rev() {
        for l in config.fusion_plan(p) {
            init_as_layer(&l.config, &l.name, &mut init, &mut params)?;
        }
    }
    for (name, c_in, c_out) in config.decoder_plan() {
        let (w, b) = init.conv::<R>(c_in, c_out, 3, 1.0);
        params.insert(format!("{name}.weight"), w, true);
        params.insert(format!("{name}.bias"), b, true);
    }
    Ok(AsNet {
        config: config.clone(),
        params,
    })
}

impl<R: Real> AsNet<R> {
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }
}

/// A level representation: a batch over query positions of support tensors.
struct Rep<'t, R> {
    x: Var<'t, R>,
    query: (usize, usize),
}

impl<'t, R: Real> Rep<'t, R> {
    fn support(&self) -> (usize, usize) {
        let s = self.x.shape();
        (s[2], s[3])
    }

    fn pool_support(self) -> Result<Self> {
        if self.support() == (1, 1) {
            return Ok(self);
        }
        Ok(Self {
            x: self.x.mean_axis(3)?.mean_axis(2)?,
            query: self.query,
        })
    }
}

/// Value after each named stage; level and fusion stages are `[B, C, Hs, Ws]`.
pub type StageTrace<R> = Vec<(String, Tensor<R>)>;

/// Forward pass on a tape. `hyper` holds one channel-last `[Hq, Wq, Hs, Ws, C]`
/// correlation per level, finest first. Returns `[2, out_h, out_w]` logits.
pub fn asnet_forward_var<'t, R: Real>(
    config: &AsnetConfig,
    params: &BoundParams<'t, R>,
    hyper: &[Var<'t, R>],
    mask: Option<&Mask>,
    out_h: usize,
    out_w: usize,
    mut trace: Option<&mut StageTrace<R>>,
) -> Result<Var<'t, R>> {
    if hyper.len() != config.levels() {
        return shape_err("asnet", format!("{} levels, expected {}", hyper.len(), config.levels()));
    }
    if out_h == 0 || out_w == 0 {
        return shape_err("asnet", format!("output size {out_h}x{out_w}"));
    }
    let mask = mask.filter(|_| config.masked_attention);
    let mut record = |name: &str, v: &Var<'t, R>| {
        if let Some(t) = trace.as_deref_mut() {
            t.push((name.to_string(), v.value().as_ref().clone()));
        }
    };

    let mut reps = Vec::with_capacity(hyper.len());
    for (p, h) in hyper.iter().enumerate() {
        let s = h.shape();
        let [hq, wq, hs, ws, c] = s.as_slice() else {
            return shape_err("asnet", format!("level {p} correlation {s:?}"));
        };
        if *c != config.level_channels[p] {
            return shape_err("asnet", format!("level {p}: {c} channels, expected {}", config.level_channels[p]));
        }
        let mut x = h.permute(&[0, 1, 4, 2, 3])?.reshape(&[hq * wq, *c, *hs, *ws])?;
        if p == 0 {
            x = x.avg_pool_half()?;
            record("level0.pool", &x);
        }
        for l in config.level_plan(p) {
            x = as_layer_cf(&l.config, params, &l.name, x, mask)?.output;
            record(&l.name, &x);
        }
        reps.push(Rep { x, query: (*hq, *wq) });
    }

    let mut current = reps.pop().expect("at least one level");
    while let Some(fine) = reps.pop() {
        let p = reps.len();
        let target = fine.support();
        if current.support() != target {
            current = current.pool_support()?;
        }
        let (hs, ws) = current.support();
        let ch = current.x.shape()[1];
        let (hq, wq) = current.query;
        let (fq_h, fq_w) = fine.query;
        let up = current
            .x
            .reshape(&[hq, wq, ch * hs * ws])?
            .permute(&[2, 0, 1])?
            .resize_bilinear(fq_h, fq_w, config.align_corners)?
            .permute(&[1, 2, 0])?
            .reshape(&[fq_h * fq_w, ch, hs, ws])?
            .broadcast_to(&[fq_h * fq_w, ch, target.0, target.1])?;
        let mut x = up.add(&fine.x)?;
        for l in config.fusion_plan(p) {
            x = as_layer_cf(&l.config, params, &l.name, x, mask)?.output;
            record(&l.name, &x);
        }
        current = Rep { x, query: fine.query };
    }
    let current = current.pool_support()?;
    record("squeezed", &current.x);

    let (hq, wq) = current.query;
    let ch = current.x.shape()[1];
    let mut y = current.x.reshape(&[hq, wq, ch])?.permute(&[2, 0, 1])?;
    let plan = config.decoder_plan();
    for (i, (name, _, _)) in plan.iter().enumerate() {
        if i == 2 {
            y = y.resize_bilinear(2 * hq, 2 * wq, config.align_corners)?;
        }
        let w = params.get(&format!("{name}.weight"))?;
        let b = params.get(&format!("{name}.bias"))?;
        y = y.conv2d(&w, Some(&b), 1, 1)?;
        if i + 1 < plan.len() {
            y = y.relu()?;
        }
    }
    let out = y.resize_bilinear(out_h, out_w, config.align_corners)?;
    record("logits", &out);
    Ok(out)
}

/// Plain-tensor forward: `[2, out_h, out_w]` foreground/background logits.
pub fn asnet_forward<R: Real>(
    hyper: &Hypercorrelation<R>,
    mask: Option<&Mask>,
    net: &AsNet<R>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<R>> {
    Ok(asnet_trace(hyper, mask, net, out_h, out_w)?.0)
}

/// Like [`asnet_forward`], also returning the value after every stage.
pub fn asnet_trace<R: Real>(
    hyper: &Hypercorrelation<R>,
    mask: Option<&Mask>,
    net: &AsNet<R>,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor<R>, StageTrace<R>)> {
    if hyper.levels.iter().any(|l| !l.all_finite()) {
        return Err(Error::NonFinite("asnet input"));
    }
    let tape = Tape::new();
    let mut frozen = net.params.clone();
    frozen.set_trainable(false);
    let bound = frozen.bind(&tape);
    let levels: Vec<_> = hyper.levels.iter().map(|l| tape.constant(l.clone())).collect();
    let mut trace = Vec::new();
    let out = asnet_forward_var(&net.config, &bound, &levels, mask, out_h, out_w, Some(&mut trace))?;
    Ok((out.value().as_ref().clone(), trace))
}
