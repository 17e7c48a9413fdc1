//! Attentive squeeze layer: strided multi-head self-attention over each
//! support correlation tensor, shared across query positions.
//!
//! Internally a correlation with query extent `Hq x Wq` is a batch of
//! `B = Hq * Wq` channel-first support tensors `[B, C, Hs, Ws]`; the public
//! entry points take and return the channel-last `[Hq, Wq, Hs, Ws, C]` layout.

use crate::error::{shape_err, Error, Result};
use crate::mask::Mask;
use crate::tensor::{conv_out_extent, BoundParams, Initializer, ParamStore, Real, Tape, Tensor, Var};

/// Group-norm epsilon used by both activation blocks.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsLayerConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub c_hidden: usize,
    pub heads: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub norm_groups: usize,
}

impl AsLayerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.c_in == 0 || self.c_out == 0 || self.c_hidden == 0 || self.heads == 0 {
            return bad(format!("AS layer with zero width: {self:?}"));
        }
        if !self.c_hidden.is_multiple_of(self.heads) {
            return bad(format!("{} hidden channels over {} heads", self.c_hidden, self.heads));
        }
        if self.kernel == 0 || self.stride == 0 {
            return bad(format!("AS layer kernel {} stride {}", self.kernel, self.stride));
        }
        if self.norm_groups == 0 || !self.c_out.is_multiple_of(self.norm_groups) {
            return bad(format!("{} channels into {} norm groups", self.c_out, self.norm_groups));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.c_hidden / self.heads
    }

    /// Whether the residual path needs its own projection: channel counts
    /// differ or the embedding changes the support extent.
    pub fn has_input_projection(&self) -> bool {
        self.c_in != self.c_out || self.stride > 1 || self.kernel != 2 * self.padding + 1
    }

    /// Smallest support extent the embedding accepts; smaller inputs are
    /// zero-padded on the trailing side.
    pub fn min_extent(&self) -> usize {
        self.kernel.saturating_sub(2 * self.padding).max(1)
    }

    /// Output support extent for input extent `n`.
    pub fn out_extent(&self, n: usize) -> usize {
        conv_out_extent(n.max(self.min_extent()), self.kernel, self.stride, self.padding)
            .expect("padded extent always admits one window")
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let embed = 3 * (self.c_in * self.c_hidden * k2 + self.c_hidden);
        let out = self.c_hidden * self.c_out + self.c_out;
        let proj = if self.has_input_projection() {
            self.c_in * self.c_out * k2 + self.c_out
        } else {
            0
        };
        let ff = self.c_out * self.c_out + self.c_out;
        embed + out + proj + ff + 4 * self.c_out
    }
}

/// Adds the parameters of one layer under `prefix` to `store`.
pub fn init_as_layer<R: Real>(
    cfg: &AsLayerConfig,
    prefix: &str,
    init: &mut Initializer,
    store: &mut ParamStore<R>,
) -> Result<()> {
    cfg.validate()?;
    let mut conv = |store: &mut ParamStore<R>, name: &str, c_in: usize, c_out: usize, k: usize| {
        let (w, b) = init.conv::<R>(c_in, c_out, k, 1.0);
        store.insert(format!("{prefix}.{name}.weight"), w, true);
        store.insert(format!("{prefix}.{name}.bias"), b, true);
    };
    for name in ["target", "key", "value"] {
        conv(store, name, cfg.c_in, cfg.c_hidden, cfg.kernel);
    }
    conv(store, "out", cfg.c_hidden, cfg.c_out, 1);
    if cfg.has_input_projection() {
        conv(store, "input_proj", cfg.c_in, cfg.c_out, cfg.kernel);
    }
    conv(store, "ff", cfg.c_out, cfg.c_out, 1);
    for norm in ["norm1", "norm2"] {
        store.insert(format!("{prefix}.{norm}.gamma"), Tensor::ones(&[cfg.c_out]), true);
        store.insert(format!("{prefix}.{norm}.beta"), Tensor::zeros(&[cfg.c_out]), true);
    }
    Ok(())
}

/// A standalone layer: configuration plus its own parameter store.
#[derive(Clone, Debug)]
pub struct AsLayerParams<R> {
    pub config: AsLayerConfig,
    pub prefix: String,
    pub store: ParamStore<R>,
}

impl<R: Real> AsLayerParams<R> {
    pub fn init(config: AsLayerConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let prefix = "as".to_string();
        init_as_layer(&config, &prefix, &mut Initializer::new(seed), &mut store)?;
        Ok(Self {
            config,
            prefix,
            store,
        })
    }

    fn tensor(&self, name: &str) -> Result<&Tensor<R>> {
        Ok(self.store.tensor(&format!("{}.{name}", self.prefix))?.as_ref())
    }
}

/// Intermediate values of one forward pass.
pub struct AsOutputs<'t, R> {
    /// `[B, C_out, Hs', Ws']`
    pub output: Var<'t, R>,
    /// `[B, heads, L, L]` with `L = Hs' * Ws'`, targets by keys.
    pub weights: Var<'t, R>,
    /// `[B, C_hidden, Hs', Ws']`, heads concatenated, before the output projection.
    pub attended: Var<'t, R>,
}

/// Forward on a channel-first batch `[B, C_in, Hs, Ws]`. `mask` is at image
/// resolution and is downsampled to the key grid.
pub fn as_layer_cf<'t, R: Real>(
    cfg: &AsLayerConfig,
    params: &BoundParams<'t, R>,
    prefix: &str,
    x: Var<'t, R>,
    mask: Option<&Mask>,
) -> Result<AsOutputs<'t, R>> {
    let xs = x.shape();
    let [b, c, hs, ws] = xs.as_slice() else {
        return shape_err("as_layer", format!("input {xs:?}, expected [B, C, Hs, Ws]"));
    };
    let (b, hs, ws) = (*b, *hs, *ws);
    if *c != cfg.c_in {
        return shape_err("as_layer", format!("{c} input channels, layer expects {}", cfg.c_in));
    }
    let p = |name: &str| params.get(&format!("{prefix}.{name}"));
    let m = cfg.min_extent();
    let x = x.pad_trailing(hs.max(m), ws.max(m))?;
    let embed = |name: &str| -> Result<Var<'t, R>> {
        x.conv2d(&p(&format!("{name}.weight"))?, Some(&p(&format!("{name}.bias"))?), cfg.stride, cfg.padding)
    };
    let (t, k, v) = (embed("target")?, embed("key")?, embed("value")?);
    let (ho, wo) = (t.shape()[2], t.shape()[3]);
    let (heads, d, l) = (cfg.heads, cfg.head_dim(), ho * wo);

    // [B, Ch, Ho, Wo] -> per-head [B*h, L, d] targets/values and [B*h, d, L] keys
    let tokens = |e: Var<'t, R>| -> Result<Var<'t, R>> {
        e.reshape(&[b, heads, d, l])?.permute(&[0, 1, 3, 2])?.reshape(&[b * heads, l, d])
    };
    let keys = k.reshape(&[b * heads, d, l])?;
    let logits = tokens(t)?.matmul(&keys)?.scale(R::lit(1.0 / (d as f64).sqrt()))?;
    let key_mask = match mask {
        Some(m) => Some(m.downsample(ho, wo)?),
        None => None,
    };
    let weights = match &key_mask {
        // an emptied mask leaves no admissible key; attend everywhere instead
        Some(km) if km.any() => logits.masked_softmax(2, km.data())?,
        _ => logits.softmax(2)?,
    };
    let attended = weights
        .matmul(&tokens(v)?)?
        .reshape(&[b, heads, l, d])?
        .permute(&[0, 1, 3, 2])?
        .reshape(&[b, cfg.c_hidden, ho, wo])?;

    let projected = attended.conv2d(&p("out.weight")?, Some(&p("out.bias")?), 1, 0)?;
    let residual = if cfg.has_input_projection() {
        x.conv2d(&p("input_proj.weight")?, Some(&p("input_proj.bias")?), cfg.stride, cfg.padding)?
    } else {
        x
    };
    let eps = R::lit(NORM_EPS);
    let h = projected
        .add(&residual)?
        .group_norm(cfg.norm_groups, &p("norm1.gamma")?, &p("norm1.beta")?, eps)?
        .relu()?;
    let output = h
        .conv2d(&p("ff.weight")?, Some(&p("ff.bias")?), 1, 0)?
        .add(&h)?
        .group_norm(cfg.norm_groups, &p("norm2.gamma")?, &p("norm2.beta")?, eps)?
        .relu()?;
    Ok(AsOutputs {
        output,
        weights: weights.reshape(&[b, heads, l, l])?,
        attended,
    })
}

/// Channel-last wrapper: `[Hq, Wq, Hs, Ws, C_in]` to `[Hq, Wq, Hs', Ws', C_out]`.
pub fn as_layer_var<'t, R: Real>(
    cfg: &AsLayerConfig,
    params: &BoundParams<'t, R>,
    prefix: &str,
    corr: Var<'t, R>,
    mask: Option<&Mask>,
) -> Result<Var<'t, R>> {
    let s = corr.shape();
    let [hq, wq, hs, ws, c] = s.as_slice() else {
        return shape_err("as_layer", format!("correlation {s:?}, expected rank 5"));
    };
    let x = corr.permute(&[0, 1, 4, 2, 3])?.reshape(&[hq * wq, *c, *hs, *ws])?;
    let out = as_layer_cf(cfg, params, prefix, x, mask)?.output;
    let os = out.shape();
    out.reshape(&[*hq, *wq, os[1], os[2], os[3]])?.permute(&[0, 1, 3, 4, 2])
}

/// Plain-tensor results of one layer, in channel-last layout.
#[derive(Clone, Debug)]
pub struct AsLayerTrace<R> {
    /// `[Hq, Wq, Hs', Ws', C_out]`
    pub output: Tensor<R>,
    /// `[Hq, Wq, heads, L, L]`
    pub weights: Tensor<R>,
    /// `[Hq, Wq, Hs', Ws', C_hidden]`
    pub attended: Tensor<R>,
}

fn check_corr<R: Real>(corr: &Tensor<R>, mask: Option<&Mask>) -> Result<()> {
    if corr.rank() != 5 {
        return shape_err("as_layer", format!("correlation {:?}, expected rank 5", corr.shape()));
    }
    if !corr.all_finite() {
        return Err(Error::NonFinite("as_layer input"));
    }
    if let Some(m) = mask {
        if !m.any() {
            return Err(Error::Invalid("support mask has no foreground".into()));
        }
    }
    Ok(())
}

/// Runs one layer on a correlation tensor, returning output, attention
/// weights and the attended values.
pub fn as_layer_trace<R: Real>(
    corr: &Tensor<R>,
    mask: Option<&Mask>,
    params: &AsLayerParams<R>,
) -> Result<AsLayerTrace<R>> {
    check_corr(corr, mask)?;
    let s = corr.shape().to_vec();
    let tape = Tape::new();
    let mut frozen = params.store.clone();
    frozen.set_trainable(false);
    let bound = frozen.bind(&tape);
    let x = tape
        .constant(corr.clone())
        .permute(&[0, 1, 4, 2, 3])?
        .reshape(&[s[0] * s[1], s[4], s[2], s[3]])?;
    let outs = as_layer_cf(&params.config, &bound, &params.prefix, x, mask)?;
    let to_last = |v: Var<'_, R>| -> Result<Tensor<R>> {
        let vs = v.shape();
        let t = v.reshape(&[s[0], s[1], vs[1], vs[2], vs[3]])?.permute(&[0, 1, 3, 4, 2])?;
        Ok(t.value().as_ref().clone())
    };
    let ws = outs.weights.shape();
    Ok(AsLayerTrace {
        output: to_last(outs.output)?,
        weights: outs.weights.value().as_ref().clone().reshaped(&[s[0], s[1], ws[1], ws[2], ws[3]])?,
        attended: to_last(outs.attended)?,
    })
}

/// `[Hq, Wq, Hs, Ws, C_in]` to `[Hq, Wq, Hs', Ws', C_out]`.
pub fn as_layer_forward<R: Real>(
    corr: &Tensor<R>,
    mask: Option<&Mask>,
    params: &AsLayerParams<R>,
) -> Result<Tensor<R>> {
    Ok(as_layer_trace(corr, mask, params)?.output)
}

/// Nearest-neighbour mask subsampling.
pub fn downsample_mask(mask: &Mask, height: usize, width: usize) -> Result<Mask> {
    mask.downsample(height, width)
}

/// Reference implementation of [`as_layer_trace`] by explicit loops over query
/// positions, heads, targets and keys. Meant for small tensors.
pub fn attention_oracle<R: Real>(
    corr: &Tensor<R>,
    mask: Option<&Mask>,
    params: &AsLayerParams<R>,
) -> Result<AsLayerTrace<R>> {
    check_corr(corr, mask)?;
    let cfg = &params.config;
    let s = corr.shape();
    let (hq, wq, hs, ws, c_in) = (s[0], s[1], s[2], s[3], s[4]);
    if c_in != cfg.c_in {
        return shape_err("attention_oracle", format!("{c_in} channels vs {}", cfg.c_in));
    }
    let me = cfg.min_extent();
    let (hp, wp) = (hs.max(me), ws.max(me));
    let (ho, wo) = (cfg.out_extent(hs), cfg.out_extent(ws));
    let (heads, d, l) = (cfg.heads, cfg.head_dim(), ho * wo);
    let (ch, co) = (cfg.c_hidden, cfg.c_out);

    let key_ok: Vec<bool> = match mask {
        Some(m) => {
            let mut ok = vec![false; l];
            for i in 0..ho {
                for j in 0..wo {
                    ok[i * wo + j] = m.get(i * m.height() / ho, j * m.width() / wo);
                }
            }
            if ok.iter().any(|&b| b) {
                ok
            } else {
                vec![true; l]
            }
        }
        None => vec![true; l],
    };

    let conv = |input: &[f64], c_src: usize, h: usize, w: usize, name: &str, k: usize, st: usize, pd: usize| -> Result<Vec<f64>> {
        let wt = params.tensor(&format!("{name}.weight"))?;
        let bs = params.tensor(&format!("{name}.bias"))?;
        let c_dst = wt.shape()[0];
        let oh = (h + 2 * pd - k) / st + 1;
        let ow = (w + 2 * pd - k) / st + 1;
        let mut out = vec![0.0; c_dst * oh * ow];
        for o in 0..c_dst {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bs.data()[o].as_f64();
                    for ci in 0..c_src {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (i * st + ki) as isize - pd as isize;
                                let jj = (j * st + kj) as isize - pd as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += input[(ci * h + ii as usize) * w + jj as usize]
                                        * wt.at(&[o, ci, ki, kj]).as_f64();
                                }
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        Ok(out)
    };
    let norm_relu = |x: &[f64], name: &str| -> Result<Vec<f64>> {
        let gamma = params.tensor(&format!("{name}.gamma"))?;
        let beta = params.tensor(&format!("{name}.beta"))?;
        let cpg = co / cfg.norm_groups;
        let n = (cpg * l) as f64;
        let mut out = vec![0.0; x.len()];
        for g in 0..cfg.norm_groups {
            let seg = &x[g * cpg * l..(g + 1) * cpg * l];
            let mean = seg.iter().sum::<f64>() / n;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            for cc in g * cpg..(g + 1) * cpg {
                for t in 0..l {
                    let xh = (x[cc * l + t] - mean) / (var + NORM_EPS).sqrt();
                    out[cc * l + t] = (gamma.data()[cc].as_f64() * xh + beta.data()[cc].as_f64()).max(0.0);
                }
            }
        }
        Ok(out)
    };

    let mut output = vec![0.0; hq * wq * l * co];
    let mut weights = vec![0.0; hq * wq * heads * l * l];
    let mut attended_all = vec![0.0; hq * wq * l * ch];
    for a in 0..hq {
        for bq in 0..wq {
            let q = a * wq + bq;
            let mut x = vec![0.0; c_in * hp * wp];
            for c in 0..c_in {
                for i in 0..hs {
                    for j in 0..ws {
                        x[(c * hp + i) * wp + j] = corr.at(&[a, bq, i, j, c]).as_f64();
                    }
                }
            }
            let (k, st, pd) = (cfg.kernel, cfg.stride, cfg.padding);
            let t = conv(&x, c_in, hp, wp, "target", k, st, pd)?;
            let kk = conv(&x, c_in, hp, wp, "key", k, st, pd)?;
            let v = conv(&x, c_in, hp, wp, "value", k, st, pd)?;
            let mut attended = vec![0.0; ch * l];
            for h in 0..heads {
                for tgt in 0..l {
                    let mut logits = vec![f64::NEG_INFINITY; l];
                    for key in 0..l {
                        if !key_ok[key] {
                            continue;
                        }
                        let mut dot = 0.0;
                        for dd in 0..d {
                            let c = h * d + dd;
                            dot += t[c * l + tgt] * kk[c * l + key];
                        }
                        logits[key] = dot / (d as f64).sqrt();
                    }
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|&z| if z.is_finite() { (z - mx).exp() } else { 0.0 }).collect();
                    let total: f64 = exps.iter().sum();
                    for key in 0..l {
                        let w = exps[key] / total;
                        weights[((q * heads + h) * l + tgt) * l + key] = w;
                        for dd in 0..d {
                            let c = h * d + dd;
                            attended[c * l + tgt] += w * v[c * l + key];
                        }
                    }
                }
            }
            let projected = conv(&attended, ch, ho, wo, "out", 1, 1, 0)?;
            let residual = if cfg.has_input_projection() {
                conv(&x, c_in, hp, wp, "input_proj", k, st, pd)?
            } else {
                x.clone()
            };
            let sum1: Vec<f64> = projected.iter().zip(&residual).map(|(p, r)| p + r).collect();
            let h1 = norm_relu(&sum1, "norm1")?;
            let ff = conv(&h1, co, ho, wo, "ff", 1, 1, 0)?;
            let sum2: Vec<f64> = ff.iter().zip(&h1).map(|(f, h)| f + h).collect();
            let out = norm_relu(&sum2, "norm2")?;
            for t in 0..l {
                for c in 0..co {
                    output[(q * l + t) * co + c] = out[c * l + t];
                }
                for c in 0..ch {
                    attended_all[(q * l + t) * ch + c] = attended[c * l + t];
                }
            }
        }
    }
    let cast = |v: Vec<f64>, shape: &[usize]| Tensor::new(shape, v.into_iter().map(R::lit).collect());
    Ok(AsLayerTrace {
        output: cast(output, &[hq, wq, ho, wo, co])?,
        weights: cast(weights, &[hq, wq, heads, l, l])?,
        attended: cast(attended_all, &[hq, wq, ho, wo, ch])?,
    })
}
