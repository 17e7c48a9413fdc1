//! Netpbm images and the dataset manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::shapeworld::{Dataset, ObjectRecord, Sample, ShapeWorldSpec};
use crate::mask::{LabelMap, Mask};

pub const MANIFEST: &str = "manifest.txt";

fn encode_pnm(magic: &str, width: usize, height: usize, body: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(body);
    out
}

/// Parses a binary P5/P6 file with maxval 255; returns `(width, height, body)`.
fn decode_pnm<'a>(bytes: &'a [u8], magic: &str, channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let bad = |m: &str| Error::Dataset(format!("{magic} image: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != magic {
        return Err(bad(&format!("magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s:?}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad(&format!("maxval {max}")));
    }
    if pos >= bytes.len() {
        return Err(bad("missing pixel data"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * channels {
        return Err(bad(&format!("{} bytes for {w}x{h}", body.len())));
    }
    Ok((w, h, body))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    Ok(fs::write(path, encode_pnm("P6", width, height, rgb))?)
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (w, h, body) = decode_pnm(&bytes, "P6", 3)?;
    Ok((w, h, body.to_vec()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    Ok(fs::write(path, encode_pnm("P5", width, height, gray))?)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (w, h, body) = decode_pnm(&bytes, "P5", 1)?;
    Ok((w, h, body.to_vec()))
}

/// Binary mask as a PGM with 0 / 255.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let body: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_pgm(path, mask.width(), mask.height(), &body)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let (w, h, body) = read_pgm(path)?;
    Mask::new(h, w, body.iter().map(|&v| v >= 128).collect())
}

/// Label map as a PGM holding the raw label values.
pub fn write_label_map(path: &Path, labels: &LabelMap) -> Result<()> {
    write_pgm(path, labels.width(), labels.height(), labels.data())
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let (w, h, body) = read_pgm(path)?;
    LabelMap::new(h, w, body)
}

fn spec_line(spec: &ShapeWorldSpec) -> String {
    format!(
        "spec num_classes={} image_size={} objects_min={} objects_max={} folds={} images_per_class={} scale_min={} scale_max={} max_overlap={} seed={}",
        spec.num_classes,
        spec.image_size,
        spec.objects_per_image.0,
        spec.objects_per_image.1,
        spec.folds,
        spec.images_per_class,
        spec.object_scale.0,
        spec.object_scale.1,
        spec.max_overlap,
        spec.seed
    )
}

fn parse_spec(line: &str) -> Result<ShapeWorldSpec> {
    let mut spec = ShapeWorldSpec::default();
    for kv in line.split_whitespace().skip(1) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Dataset(format!("manifest spec field {kv:?}")))?;
        let bad = || Error::Dataset(format!("manifest spec value {kv:?}"));
        let int = || v.parse::<usize>().map_err(|_| bad());
        let real = || v.parse::<f64>().map_err(|_| bad());
        match k {
            "num_classes" => spec.num_classes = int()?,
            "image_size" => spec.image_size = int()?,
            "objects_min" => spec.objects_per_image.0 = int()?,
            "objects_max" => spec.objects_per_image.1 = int()?,
            "folds" => spec.folds = int()?,
            "images_per_class" => spec.images_per_class = int()?,
            "scale_min" => spec.object_scale.0 = real()?,
            "scale_max" => spec.object_scale.1 = real()?,
            "max_overlap" => spec.max_overlap = real()?,
            "seed" => spec.seed = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::Dataset(format!("unknown manifest spec field {k:?}"))),
        }
    }
    spec.validate()?;
    Ok(spec)
}

impl Dataset {
    /// Writes one directory per class (images as PPM, object masks as PGM)
    /// and a manifest listing classes, folds and objects.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let spec = &self.spec;
        let n = spec.image_size;
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("shapeworld 1\n");
        writeln!(manifest, "{}", spec_line(spec)).unwrap();
        for c in 0..spec.num_classes {
            fs::create_dir_all(dir.join(spec.class_name(c)))?;
            writeln!(manifest, "class {c} {} fold={}", spec.class_name(c), spec.fold_of(c)).unwrap();
        }
        for s in &self.samples {
            let rel = format!("{}/{}", spec.class_name(s.primary_class), s.name);
            write_ppm(&dir.join(format!("{rel}.ppm")), n, n, &s.pixels)?;
            writeln!(manifest, "image {rel}.ppm").unwrap();
            for (k, o) in s.objects.iter().enumerate() {
                let mask_rel = format!("{rel}_obj{k}.pgm");
                write_mask(&dir.join(&mask_rel), &o.mask)?;
                writeln!(manifest, "object {k} class={} mask={mask_rel}", o.class).unwrap();
            }
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let mut lines = text.lines();
        if lines.next() != Some("shapeworld 1") {
            return Err(Error::Dataset("manifest header".into()));
        }
        let spec = parse_spec(lines.next().unwrap_or(""))?;
        let n = spec.image_size;
        let mut samples: Vec<Sample> = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("class") | None => {}
                Some("image") => {
                    let rel = parts.next().ok_or_else(|| Error::Dataset(format!("manifest line {line:?}")))?;
                    let (w, h, pixels) = read_ppm(&dir.join(rel))?;
                    if (w, h) != (n, n) {
                        return Err(Error::Dataset(format!("{rel}: {w}x{h}, expected {n}x{n}")));
                    }
                    let name = Path::new(rel)
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default()
                        .to_string();
                    samples.push(Sample {
                        name,
                        primary_class: usize::MAX,
                        pixels,
                        objects: Vec::new(),
                    });
                }
                Some("object") => {
                    let sample = samples
                        .last_mut()
                        .ok_or_else(|| Error::Dataset("object before any image".into()))?;
                    let mut class = None;
                    let mut mask = None;
                    for kv in parts.skip(1) {
                        match kv.split_once('=') {
                            Some(("class", v)) => class = v.parse::<usize>().ok(),
                            Some(("mask", v)) => mask = Some(read_mask(&dir.join(v))?),
                            _ => {}
                        }
                    }
                    let (Some(class), Some(mask)) = (class, mask) else {
                        return Err(Error::Dataset(format!("manifest line {line:?}")));
                    };
                    if class >= spec.num_classes || (mask.height(), mask.width()) != (n, n) {
                        return Err(Error::Dataset(format!("manifest line {line:?}")));
                    }
                    if sample.objects.is_empty() {
                        sample.primary_class = class;
                    }
                    sample.objects.push(ObjectRecord { class, mask });
                }
                Some(other) => return Err(Error::Dataset(format!("unknown manifest entry {other:?}"))),
            }
        }
        if let Some(s) = samples.iter().find(|s| s.objects.is_empty()) {
            return Err(Error::Dataset(format!("image {} has no objects", s.name)));
        }
        Ok(Dataset { spec, samples })
    }
}
