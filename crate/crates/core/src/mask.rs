//! Binary masks and integer label maps.

use crate::error::{Error, Result};

/// Row-major binary map.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Invalid(format!(
                "mask {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Nearest-neighbour subsampling: output `(i, j)` reads source
    /// `(floor(i * H / h), floor(j * W / w))`.
    pub fn downsample(&self, height: usize, width: usize) -> Result<Mask> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("downsample to {height}x{width}")));
        }
        Ok(Mask::from_fn(height, width, |i, j| {
            self.get(i * self.height / height, j * self.width / width)
        }))
    }
}

impl Mask {
    /// Fraction of set pixels inside each cell of a `height x width` grid laid
    /// over the mask; cell `i` spans rows `floor(i * H / h)` up to
    /// `floor((i + 1) * H / h)` (at least one row).
    pub fn area_fractions(&self, height: usize, width: usize) -> Result<Vec<f64>> {
        if height == 0 || width == 0 || height > self.height || width > self.width {
            return Err(Error::Invalid(format!(
                "area fractions of a {}x{} mask on a {height}x{width} grid",
                self.height, self.width
            )));
        }
        let span = |i: usize, n: usize, total: usize| {
            let lo = i * total / n;
            (lo, ((i + 1) * total / n).max(lo + 1))
        };
        let mut out = Vec::with_capacity(height * width);
        for i in 0..height {
            let (r0, r1) = span(i, height, self.height);
            for j in 0..width {
                let (c0, c1) = span(j, width, self.width);
                let set = (r0..r1)
                    .flat_map(|r| (c0..c1).map(move |c| (r, c)))
                    .filter(|&(r, c)| self.get(r, c))
                    .count();
                out.push(set as f64 / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
        Ok(out)
    }
}

/// Per-pixel labels; episode label maps use `1..=N` for support classes and
/// `N + 1` for background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Invalid(format!(
                "label map {height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn mask_of(&self, label: u8) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&l| l == label).collect(),
        }
    }
}
