//! Procedural "shape-world" dataset: coloured shapes on a noisy grey
//! background, with exact per-object visibility masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Real, Tensor};

pub const ARCHETYPES: [&str; 8] = ["disk", "square", "triangle", "diamond", "cross", "hexagon", "halfdisk", "frame"];

const PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeWorldSpec {
    pub num_classes: usize,
    pub image_size: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    pub folds: usize,
    pub images_per_class: usize,
    /// Object bounding-box side as a fraction of the image side.
    pub object_scale: (f64, f64),
    /// Largest fraction of any object's area another object may cover.
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for ShapeWorldSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            image_size: 64,
            objects_per_image: (1, 1),
            folds: 4,
            images_per_class: 20,
            object_scale: (0.35, 0.6),
            max_overlap: 0.2,
            seed: 0,
        }
    }
}

impl ShapeWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.num_classes == 0 || self.folds == 0 || !self.num_classes.is_multiple_of(self.folds) {
            return bad(format!("{} classes cannot split into {} folds", self.num_classes, self.folds));
        }
        if self.num_classes > 255 {
            return bad("at most 255 classes".into());
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("objects per image {lo}..={hi}"));
        }
        if self.image_size < 8 || self.images_per_class == 0 {
            return bad(format!("image size {} with {} images per class", self.image_size, self.images_per_class));
        }
        let (smin, smax) = self.object_scale;
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return bad(format!("object scale {smin}..{smax}"));
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return bad(format!("overlap limit {}", self.max_overlap));
        }
        Ok(())
    }

    pub fn fold_of(&self, class: usize) -> usize {
        class / (self.num_classes / self.folds)
    }

    pub fn class_name(&self, class: usize) -> String {
        format!("{class:02}_{}", ARCHETYPES[class % ARCHETYPES.len()])
    }
}

/// One object with the pixels it still shows after occlusion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectRecord {
    pub class: usize,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub name: String,
    /// Class of the first object; decides the directory on disk.
    pub primary_class: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
    pub objects: Vec<ObjectRecord>,
}

impl Sample {
    pub fn class_mask(&self, class: usize) -> Mask {
        let (h, w) = (self.objects[0].mask.height(), self.objects[0].mask.width());
        Mask::from_fn(h, w, |i, j| self.objects.iter().any(|o| o.class == class && o.mask.get(i, j)))
    }

    /// Classes with at least one visible pixel, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<_> = self.objects.iter().filter(|o| o.mask.any()).map(|o| o.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: ShapeWorldSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }

    /// `[3, H, W]` image with values in `[0, 1]`.
    pub fn image<R: Real>(&self, index: usize) -> Tensor<R> {
        let s = self.spec.image_size;
        let px = &self.samples[index].pixels;
        Tensor::from_fn(&[3, s, s], |flat| {
            let (c, p) = (flat / (s * s), flat % (s * s));
            R::lit(px[p * 3 + c] as f64 / 255.0)
        })
    }

    pub fn fold_classes(&self, fold: usize) -> Vec<usize> {
        (0..self.spec.num_classes).filter(|&c| self.spec.fold_of(c) == fold).collect()
    }

    /// Every class outside `fold`.
    pub fn train_classes(&self, fold: usize) -> Vec<usize> {
        (0..self.spec.num_classes).filter(|&c| self.spec.fold_of(c) != fold).collect()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        (0..self.spec.num_classes).collect()
    }
}

fn inside(archetype: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match archetype {
        0 => u * u + v * v <= 1.0,
        1 => au <= 0.85 && av <= 0.85,
        2 => v <= 1.0 && au <= (v + 1.0) / 2.0,
        3 => au + av <= 1.0,
        4 => (au <= 0.35 && av <= 1.0) || (av <= 0.35 && au <= 1.0),
        5 => av <= 0.866 && 1.732 * au + av <= 1.732,
        6 => u * u + v * v <= 1.0 && v >= -0.2,
        _ => au.max(av) <= 1.0 && au.max(av) >= 0.5,
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Placed {
    class: usize,
    raw: Mask,
    color: [f64; 3],
}

fn place(spec: &ShapeWorldSpec, class: usize, taken: &[Placed], rng: &mut ChaCha8Rng) -> Result<Placed> {
    let n = spec.image_size;
    let archetype = class % ARCHETYPES.len();
    // classes sharing an archetype differ in aspect ratio
    let aspect = 1.0 + 0.35 * (class / ARCHETYPES.len()) as f64;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let side = rng.gen_range(spec.object_scale.0..=spec.object_scale.1) * n as f64;
        let (half_h, half_w) = (side / 2.0, side / 2.0 / aspect);
        let ci = rng.gen_range(half_h..=n as f64 - half_h);
        let cj = rng.gen_range(half_w..=n as f64 - half_w);
        let raw = Mask::from_fn(n, n, |i, j| {
            inside(archetype, (j as f64 + 0.5 - cj) / half_w, (i as f64 + 0.5 - ci) / half_h)
        });
        let area = raw.count();
        if area == 0 {
            continue;
        }
        // every earlier object must keep most of its area visible under all
        // objects painted after it, including this one
        let fits = taken.iter().enumerate().all(|(k, t)| {
            let hidden = (0..n * n)
                .filter(|&p| t.raw.data()[p] && (raw.data()[p] || taken[k + 1..].iter().any(|u| u.raw.data()[p])))
                .count();
            hidden as f64 <= spec.max_overlap * t.raw.count() as f64
        });
        if fits {
            let hue = 360.0 * class as f64 / spec.num_classes as f64 + rng.gen_range(-8.0..8.0);
            let color = hsv_to_rgb(hue, rng.gen_range(0.75..0.95), rng.gen_range(0.75..0.95));
            return Ok(Placed { class, raw, color });
        }
    }
    Err(Error::Dataset(format!(
        "could not place a class {class} object within the overlap limit {}",
        spec.max_overlap
    )))
}

fn render(spec: &ShapeWorldSpec, name: String, classes: &[usize], rng: &mut ChaCha8Rng) -> Result<Sample> {
    let n = spec.image_size;
    let mut placed: Vec<Placed> = Vec::with_capacity(classes.len());
    for &c in classes {
        let p = place(spec, c, &placed, rng)?;
        placed.push(p);
    }
    let grey = rng.gen_range(0.2..0.45);
    let tint: Vec<f64> = (0..3).map(|_| grey + rng.gen_range(-0.03..0.03)).collect();
    // later objects occlude earlier ones
    let mut owner = vec![usize::MAX; n * n];
    for (k, p) in placed.iter().enumerate() {
        for (o, &b) in owner.iter_mut().zip(p.raw.data()) {
            if b {
                *o = k;
            }
        }
    }
    let mut pixels = Vec::with_capacity(n * n * 3);
    for &o in &owner {
        let base: &[f64] = if o == usize::MAX { &tint } else { &placed[o].color };
        for &v in base {
            pixels.push(to_byte(v + rng.gen_range(-0.04..0.04)));
        }
    }
    let objects = placed
        .iter()
        .enumerate()
        .map(|(k, p)| ObjectRecord {
            class: p.class,
            mask: Mask::from_fn(n, n, |i, j| owner[i * n + j] == k),
        })
        .collect();
    Ok(Sample {
        name,
        primary_class: classes[0],
        pixels,
        objects,
    })
}

/// Deterministic dataset: `images_per_class` images led by each class.
pub fn generate_dataset(spec: &ShapeWorldSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.images_per_class);
    for class in 0..spec.num_classes {
        for i in 0..spec.images_per_class {
            let count = rng.gen_range(spec.objects_per_image.0..=spec.objects_per_image.1);
            let mut classes = vec![class];
            while classes.len() < count {
                let c = rng.gen_range(0..spec.num_classes);
                if c != class || spec.num_classes == 1 {
                    classes.push(c);
                }
            }
            let name = format!("img_{class:02}_{i:04}");
            samples.push(render(spec, name, &classes, &mut rng)?);
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}
