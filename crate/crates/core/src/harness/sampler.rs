//! N-way K-shot episode sampling with positive-inclusion balancing.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::harness::shapeworld::Dataset;
use crate::mask::{LabelMap, Mask};

/// Probability that the support set is forced to contain a query class.
pub const POSITIVE_PROB: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportShot {
    pub image: usize,
    pub class: usize,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub query: usize,
    /// Dataset class of each support slot.
    pub classes: Vec<usize>,
    /// `N` slots of `K` shots.
    pub supports: Vec<Vec<SupportShot>>,
    pub y_gt: Vec<u8>,
    /// `1..=N` for support slots, `N + 1` for background.
    pub seg_gt: LabelMap,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn k_shot(&self) -> usize {
        self.supports.first().map_or(0, Vec::len)
    }

    /// Checks the structural invariants against the dataset it came from.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        let n = self.n_way();
        let bad = |m: String| Err(Error::Invalid(format!("episode: {m}")));
        let mut distinct = self.classes.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if n == 0 || distinct.len() != n || self.supports.len() != n || self.y_gt.len() != n {
            return bad(format!("{n} classes, {} slots", self.supports.len()));
        }
        let k = self.k_shot();
        for (slot, shots) in self.supports.iter().enumerate() {
            if shots.len() != k || k == 0 {
                return bad(format!("slot {slot} has {} shots", shots.len()));
            }
            for s in shots {
                if s.class != self.classes[slot] || s.image == self.query || !s.mask.any() {
                    return bad(format!("slot {slot} shot from image {}", s.image));
                }
                if s.mask != data.samples[s.image].class_mask(s.class) {
                    return bad(format!("slot {slot} mask mismatch"));
                }
            }
        }
        let q = &data.samples[self.query];
        let masks: Vec<Mask> = self.classes.iter().map(|&cl| q.class_mask(cl)).collect();
        let mut present = vec![0u8; n];
        for (i, &l) in self.seg_gt.data().iter().enumerate() {
            if l == 0 || l as usize > n + 1 {
                return bad(format!("label {l}"));
            }
            let truth = masks.iter().position(|m| m.data()[i]);
            if truth.map_or(n + 1, |s| s + 1) != l as usize {
                return bad(format!("pixel {i} labelled {l}"));
            }
            if (l as usize) <= n {
                present[l as usize - 1] = 1;
            }
        }
        if present != self.y_gt {
            return bad(format!("y_gt {:?} vs labels {:?}", self.y_gt, present));
        }
        Ok(())
    }
}

/// Draws episodes whose classes come from a fixed pool.
pub struct EpisodeSampler<'a> {
    data: &'a Dataset,
    pool: Vec<usize>,
    n_way: usize,
    k_shot: usize,
    /// Per pool class: images whose class mask covers at least the minimum fraction.
    eligible: Vec<Vec<usize>>,
    queries: Vec<usize>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(data: &'a Dataset, pool: &[usize], n_way: usize, k_shot: usize, min_fg_fraction: f64) -> Result<Self> {
        if n_way == 0 || k_shot == 0 {
            return Err(Error::Invalid(format!("{n_way}-way {k_shot}-shot")));
        }
        let mut pool = pool.to_vec();
        pool.sort_unstable();
        pool.dedup();
        if pool.len() < n_way {
            return Err(Error::InsufficientData(format!(
                "{} classes in pool for {n_way}-way episodes",
                pool.len()
            )));
        }
        let mut eligible = Vec::with_capacity(pool.len());
        for &c in &pool {
            let imgs: Vec<usize> = (0..data.len())
                .filter(|&i| data.samples[i].class_mask(c).fraction() >= min_fg_fraction)
                .collect();
            if imgs.len() < k_shot + 1 {
                return Err(Error::InsufficientData(format!(
                    "class {c} has {} usable images, {k_shot}-shot needs {}",
                    imgs.len(),
                    k_shot + 1
                )));
            }
            eligible.push(imgs);
        }
        let queries = (0..data.len())
            .filter(|&i| data.samples[i].classes().iter().any(|c| pool.binary_search(c).is_ok()))
            .collect();
        Ok(Self {
            data,
            pool,
            n_way,
            k_shot,
            eligible,
            queries,
        })
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    fn pool_classes_of(&self, image: usize) -> Vec<usize> {
        self.data.samples[image]
            .classes()
            .into_iter()
            .filter(|c| self.pool.binary_search(c).is_ok())
            .collect()
    }

    pub fn sample<G: Rng>(&self, rng: &mut G) -> Result<Episode> {
        let query = *self.queries.choose(rng).expect("pool classes have images");
        let present = self.pool_classes_of(query);
        let classes: Vec<usize> = if rng.gen_bool(POSITIVE_PROB) {
            let forced = *present.choose(rng).expect("query shows a pool class");
            let rest: Vec<usize> = self.pool.iter().copied().filter(|&c| c != forced).collect();
            let mut chosen: Vec<usize> = rest.choose_multiple(rng, self.n_way - 1).copied().collect();
            chosen.push(forced);
            chosen.shuffle(rng);
            chosen
        } else {
            self.pool.choose_multiple(rng, self.n_way).copied().collect()
        };
        let mut supports = Vec::with_capacity(self.n_way);
        for &c in &classes {
            let slot = self.pool.binary_search(&c).expect("pool class");
            let candidates: Vec<usize> = self.eligible[slot].iter().copied().filter(|&i| i != query).collect();
            let shots = candidates
                .choose_multiple(rng, self.k_shot)
                .map(|&image| SupportShot {
                    image,
                    class: c,
                    mask: self.data.samples[image].class_mask(c),
                })
                .collect();
            supports.push(shots);
        }
        let (seg_gt, y_gt) = relabel(self.data, query, &classes);
        Ok(Episode {
            query,
            classes,
            supports,
            y_gt,
            seg_gt,
        })
    }

    /// Expected fraction of episodes with at least one positive class.
    pub fn analytic_positive_rate(&self) -> f64 {
        let p = self.pool.len();
        let total = binomial(p, self.n_way);
        let free: f64 = self
            .queries
            .iter()
            .map(|&q| {
                let m = self.pool_classes_of(q).len();
                1.0 - binomial(p - m, self.n_way) / total
            })
            .sum::<f64>()
            / self.queries.len() as f64;
        POSITIVE_PROB + (1.0 - POSITIVE_PROB) * free
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Query ground truth relative to the support classes: pixels of other
/// classes become background.
pub fn relabel(data: &Dataset, query: usize, classes: &[usize]) -> (LabelMap, Vec<u8>) {
    let n = data.image_size();
    let bg = classes.len() as u8 + 1;
    let mut labels = LabelMap::filled(n, n, bg);
    let mut y = vec![0u8; classes.len()];
    for (slot, &c) in classes.iter().enumerate() {
        let m = data.samples[query].class_mask(c);
        for (l, &b) in labels.data_mut().iter_mut().zip(m.data()) {
            if b {
                *l = slot as u8 + 1;
                y[slot] = 1;
            }
        }
    }
    (labels, y)
}
