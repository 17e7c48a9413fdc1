use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"IFSL";
const FORMAT_VERSION: u32 = 1;

/// A named parameter.
#[derive(Clone, Debug)]
pub struct Param<R> {
    pub name: String,
    pub value: Arc<Tensor<R>>,
    pub trainable: bool,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R> {
    params: Vec<Param<R>>,
    index: HashMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<R>, trainable: bool) {
        let name = name.into();
        let param = Param {
            name: name.clone(),
            value: Arc::new(value),
            trainable,
        };
        match self.index.get(&name) {
            Some(&i) => self.params[i] = param,
            None => {
                self.index.insert(name, self.params.len());
                self.params.push(param);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param<R>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Arc<Tensor<R>>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<R>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<R>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar values across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamStore<R>) -> Result<()> {
        for p in other.params {
            if self.index.contains_key(&p.name) {
                return Err(Error::Invalid(format!("duplicate parameter {}", p.name)));
            }
            self.index.insert(p.name.clone(), self.params.len());
            self.params.push(p);
        }
        Ok(())
    }

    /// Serializes to the `IFSL` checkpoint container: magic, format version,
    /// value width in bytes, then one record per parameter (name length,
    /// UTF-8 name, rank, u64 extents, little-endian values). Trainability is
    /// not stored; loaded parameters come back trainable.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(R::BYTES as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let width = cur.u32()? as usize;
        if width != R::BYTES {
            return Err(Error::Checkpoint(format!(
                "file stores {width}-byte reals, expected {}",
                R::BYTES
            )));
        }
        let mut store = Self::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = cur.take(count * width)?;
            let data = raw.chunks_exact(width).map(R::read_le).collect();
            let value = Tensor::new(&shape, data)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            store.insert(name, value, true);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Records every parameter on `tape`; trainable ones are gradient-tracked.
    pub fn bind<'t>(&self, tape: &'t Tape<R>) -> BoundParams<'t, R> {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| tape.param(&p.value, p.trainable))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Binds caller-provided variables, one per parameter in store order.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t, R>]) -> Result<BoundParams<'t, R>> {
        if vars.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter().zip(vars) {
            if p.value.shape() != v.shape().as_slice() {
                return Err(Error::Invalid(format!("{}: shape {:?}", p.name, v.shape())));
            }
        }
        Ok(BoundParams {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }

    /// Copies of every value in store order.
    pub fn values(&self) -> Vec<Tensor<R>> {
        self.params.iter().map(|p| p.value.as_ref().clone()).collect()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parameters recorded on one tape, addressable by name.
pub struct BoundParams<'t, R> {
    vars: Vec<Var<'t, R>>,
    index: HashMap<String, usize>,
}

impl<'t, R: Real> BoundParams<'t, R> {
    pub fn get(&self, name: &str) -> Result<Var<'t, R>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    /// Variables in store order.
    pub fn vars(&self) -> &[Var<'t, R>] {
        &self.vars
    }
}

/// Seeded parameter initializer: uniform in `±sqrt(gain / fan_in)`.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<R: Real>(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<R> {
        let bound = (gain / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| R::lit(self.rng.gen_range(-bound..=bound)))
    }

    /// Convolution kernel `[c_out, c_in, k, k]` and bias `[c_out]`.
    pub fn conv<R: Real>(&mut self, c_in: usize, c_out: usize, k: usize, gain: f64) -> (Tensor<R>, Tensor<R>) {
        let fan_in = c_in * k * k;
        let w = self.uniform(&[c_out, c_in, k, k], fan_in, gain);
        let b = self.uniform(&[c_out], fan_in, 1.0);
        (w, b)
    }
}
