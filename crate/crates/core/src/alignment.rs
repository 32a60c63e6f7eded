//! Global-local alignment between a composed query and a target image.
//!
//! Local: `k` sigmoid-gated region masks per level, each giving a descriptor
//! `mean_p(x[p] · mask_j[p])`; the `k` descriptors are averaged and compared by
//! cosine. Global: cosine between mean-pooled maps. Both are summed over the
//! three levels and fused as `β·S_local + (1−β)·S_global`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, Level, MultiLevelFeatures};
use crate::params::{BoundParams, Init, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_BETA: f64 = 0.6;

/// Position-wise `d→k` linear map followed by a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMaskGenerator {
    level: Level,
    dim: usize,
    k: usize,
    weight: ParamId,
    bias: ParamId,
}

pub fn param_prefix(level: Level) -> String {
    format!("masks.{level}.")
}

impl RegionMaskGenerator {
    pub fn init(
        level: Level,
        dim: usize,
        k: usize,
        init_std: f64,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("number of region masks must be positive"));
        }
        let prefix = param_prefix(level);
        store.insert(
            format!("{prefix}weight"),
            Init::Normal { std: init_std }.tensor(vec![dim, k], rng),
        )?;
        store.insert(format!("{prefix}bias"), Init::Zeros.tensor(vec![k], rng))?;
        Self::attach(level, dim, k, store)
    }

    pub fn attach(level: Level, dim: usize, k: usize, store: &ParamStore) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("number of region masks must be positive"));
        }
        let prefix = param_prefix(level);
        let lookup = |suffix: &str, shape: &[usize]| -> Result<ParamId> {
            let name = format!("{prefix}{suffix}");
            let id = store
                .id(&name)
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shape {
                return Err(Error::dim(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        Ok(Self {
            level,
            dim,
            k,
            weight: lookup("weight", &[dim, k])?,
            bias: lookup("bias", &[k])?,
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// `(h·w)×k` mask values for a `(h·w)×d` map on the tape.
    pub fn forward_masks(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let logits = tape.matmul(x, p[self.weight])?;
        let logits = tape.add_row(logits, p[self.bias])?;
        Ok(tape.sigmoid(logits))
    }

    /// `k×d` region descriptors on the tape.
    pub fn forward_descriptors(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let masks = self.forward_masks(tape, p, x)?;
        masked_means(tape, masks, x)
    }

    fn check_level(&self, x: &FeatureMap) -> Result<()> {
        if x.level() != self.level {
            return Err(Error::config(format!(
                "mask generator for level {} applied to a level {} map",
                self.level,
                x.level()
            )));
        }
        if x.dims().d != self.dim {
            return Err(Error::dim(format!(
                "mask generator expects width {}, got {}",
                self.dim,
                x.dims().d
            )));
        }
        Ok(())
    }

    /// The `k` masks, each `h×w×1`.
    pub fn region_masks(&self, store: &ParamStore, x: &FeatureMap) -> Result<Vec<Tensor>> {
        self.check_level(x)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.positions());
        let m = self.forward_masks(&mut tape, &p, xv)?;
        let (positions, k) = tape.value(m).matrix_dims()?;
        let dims = x.dims();
        let values = tape.value(m).data();
        (0..k)
            .map(|j| {
                let col = (0..positions).map(|r| values[r * k + j]).collect();
                Tensor::new(vec![dims.h, dims.w, 1], col)
            })
            .collect()
    }

    pub fn region_descriptors(
        &self,
        store: &ParamStore,
        x: &FeatureMap,
    ) -> Result<RegionDescriptorSet> {
        self.check_level(x)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.positions());
        let e = self.forward_descriptors(&mut tape, &p, xv)?;
        RegionDescriptorSet::new(self.level, tape.value(e).clone())
    }
}

/// `(1/P) · Mᵀ X`: row `j` is the positional mean of `x ⊙ mask_j`.
pub fn masked_means(tape: &mut Tape, masks: Var, x: Var) -> Result<Var> {
    let (positions, _) = tape.value(x).matrix_dims()?;
    let sums = tape.matmul_tn(masks, x)?;
    Ok(tape.scale(sums, 1.0 / positions as f64))
}

/// Descriptors from explicit masks (each `h×w×1`), bypassing the generator.
pub fn descriptors_from_masks(x: &FeatureMap, masks: &[Tensor]) -> Result<RegionDescriptorSet> {
    let dims = x.dims();
    if masks.is_empty() {
        return Err(Error::dim("no masks"));
    }
    let mut cols = Vec::with_capacity(dims.positions() * masks.len());
    for m in masks {
        if m.len() != dims.positions() {
            return Err(Error::dim(format!(
                "mask with {} values for a {}×{} map",
                m.len(),
                dims.h,
                dims.w
            )));
        }
    }
    for p in 0..dims.positions() {
        cols.extend(masks.iter().map(|m| m.data()[p]));
    }
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::new(vec![dims.positions(), masks.len()], cols)?);
    let xv = tape.constant(x.positions());
    let e = masked_means(&mut tape, m, xv)?;
    RegionDescriptorSet::new(x.level(), tape.value(e).clone())
}

/// `k×d` region descriptors of one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDescriptorSet {
    level: Level,
    descriptors: Tensor,
}

impl RegionDescriptorSet {
    pub fn new(level: Level, descriptors: Tensor) -> Result<Self> {
        let (k, d) = descriptors.matrix_dims()?;
        if k == 0 || d == 0 {
            return Err(Error::dim("empty descriptor set"));
        }
        Ok(Self { level, descriptors })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn k(&self) -> usize {
        self.descriptors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.descriptors.shape()[1]
    }

    pub fn descriptors(&self) -> &Tensor {
        &self.descriptors
    }

    /// Average of the `k` descriptors.
    pub fn mean(&self) -> Vec<f64> {
        tensor::mean_rows(self.descriptors.data(), self.k(), self.dim())
    }

    pub fn negated(&self) -> Self {
        let data = self.descriptors.data().iter().map(|v| -v).collect();
        Self {
            level: self.level,
            descriptors: Tensor::new(self.descriptors.shape().to_vec(), data).expect("same shape"),
        }
    }
}

/// Convex weight β between local and global similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FusionWeight(f64);

impl FusionWeight {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config(format!("fusion weight {beta} outside [0, 1]")));
        }
        Ok(Self(beta))
    }

    pub fn beta(self) -> f64 {
        self.0
    }
}

impl Default for FusionWeight {
    fn default() -> Self {
        Self(DEFAULT_BETA)
    }
}

impl TryFrom<f64> for FusionWeight {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FusionWeight> for f64 {
    fn from(w: FusionWeight) -> f64 {
        w.0
    }
}

/// Sum over levels of the cosine between the mean region descriptors.
pub fn local_similarity(q: &[RegionDescriptorSet], t: &[RegionDescriptorSet]) -> Result<f64> {
    if q.len() != Level::ALL.len() || t.len() != Level::ALL.len() {
        return Err(Error::dim("local similarity needs one descriptor set per level"));
    }
    let mut total = 0.0;
    for (level, (qs, ts)) in Level::ALL.iter().zip(q.iter().zip(t)) {
        if qs.level() != *level || ts.level() != *level {
            return Err(Error::config(format!("descriptor sets out of level order at {level}")));
        }
        if qs.k() != ts.k() {
            return Err(Error::dim(format!(
                "level {level}: {} query regions vs {} target regions",
                qs.k(),
                ts.k()
            )));
        }
        total += tensor::cosine_similarity(&qs.mean(), &ts.mean())?;
    }
    Ok(total)
}

/// Sum over levels of the cosine between mean-pooled maps.
pub fn global_similarity(q: &MultiLevelFeatures, t: &MultiLevelFeatures) -> Result<f64> {
    let mut total = 0.0;
    for level in Level::ALL {
        let (qm, tm) = (q.get(level), t.get(level));
        if qm.dims() != tm.dims() {
            return Err(Error::dim(format!(
                "level {level}: query {} vs target {}",
                qm.dims(),
                tm.dims()
            )));
        }
        total += tensor::cosine_similarity(&qm.mean_pool(), &tm.mean_pool())?;
    }
    Ok(total)
}

pub fn fuse(s_local: f64, s_global: f64, w: FusionWeight) -> f64 {
    w.beta() * s_local + (1.0 - w.beta()) * s_global
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::features::LevelDims;

    fn grid(level: Level, vals: &[f64]) -> FeatureMap {
        FeatureMap::new(level, LevelDims::new(2, 2, 1), vals.to_vec()).unwrap()
    }

    #[test]
    fn zero_generator_gives_half_masks() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = RegionMaskGenerator::init(Level::Low, 1, 3, 0.0, &mut store, &mut rng).unwrap();
        let masks = gen.region_masks(&store, &grid(Level::Low, &[1.0, -2.0, 3.0, 4.0])).unwrap();
        assert_eq!(masks.len(), 3);
        for m in masks {
            assert_eq!(m.shape(), &[2, 2, 1]);
            assert!(m.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn mask_logits_zero_and_ln3() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = RegionMaskGenerator::init(Level::Low, 1, 1, 0.0, &mut store, &mut rng).unwrap();
        store.get_mut(gen.weight()).data_mut()[0] = 1.0;
        let x = grid(Level::Low, &[0.0, 3f64.ln(), 0.0, 0.0]);
        let m = &gen.region_masks(&store, &x).unwrap()[0];
        assert_eq!(m.data()[0], 0.5);
        assert!((m.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn masks_strictly_inside_unit_interval() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = LevelDims::new(3, 3, 5);
        let gen = RegionMaskGenerator::init(Level::Mid, 5, 4, 1.0, &mut store, &mut rng).unwrap();
        let data = (0..dims.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = FeatureMap::new(Level::Mid, dims, data).unwrap();
        for m in gen.region_masks(&store, &x).unwrap() {
            assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn generator_rejects_wrong_level() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = RegionMaskGenerator::init(Level::Low, 1, 2, 0.02, &mut store, &mut rng).unwrap();
        let x = grid(Level::High, &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(gen.region_masks(&store, &x), Err(Error::Config(_))));
        assert!(matches!(gen.region_descriptors(&store, &x), Err(Error::Config(_))));
    }

    #[test]
    fn explicit_mask_descriptors() {
        let x = grid(Level::Low, &[1.0, 2.0, 3.0, 4.0]);
        let ones = Tensor::filled(vec![2, 2, 1], 1.0);
        let zeros = Tensor::zeros(vec![2, 2, 1]);
        let corner = Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let e = descriptors_from_masks(&x, &[ones, zeros, corner]).unwrap();
        assert_eq!(e.k(), 3);
        assert_eq!(e.descriptors().row(0), &[2.5]);
        assert_eq!(e.descriptors().row(1), &[0.0]);
        // Positional mean over all four cells, not a mask-weighted average.
        assert_eq!(e.descriptors().row(2), &[0.25]);
    }

    fn set(level: Level, rows: &[Vec<f64>]) -> RegionDescriptorSet {
        RegionDescriptorSet::new(level, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    fn three(sets: [Vec<Vec<f64>>; 3]) -> Vec<RegionDescriptorSet> {
        Level::ALL.iter().zip(sets).map(|(&l, rows)| set(l, &rows)).collect()
    }

    #[test]
    fn local_similarity_examples() {
        let a = three([
            vec![vec![1.0, 2.0], vec![0.0, 1.0]],
            vec![vec![3.0, -1.0, 0.5]],
            vec![vec![0.2], vec![0.4]],
        ]);
        assert!((local_similarity(&a, &a).unwrap() - 3.0).abs() < 1e-10);

        // Low level means (1,0) vs (0,1); the other two levels identical.
        let mut q = a.clone();
        let mut t = a.clone();
        q[0] = set(Level::Low, &[vec![2.0, 0.0], vec![0.0, 0.0]]);
        t[0] = set(Level::Low, &[vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert!((local_similarity(&q, &t).unwrap() - 2.0).abs() < 1e-10);

        let base = local_similarity(&a, &a).unwrap();
        let mut neg = a.clone();
        neg[1] = neg[1].negated();
        assert!((local_similarity(&a, &neg).unwrap() - (base - 2.0)).abs() < 1e-12);

        let mut k_mismatch = a.clone();
        k_mismatch[2] = set(Level::High, &[vec![0.2]]);
        assert!(matches!(
            local_similarity(&a, &k_mismatch),
            Err(Error::Dimension(_))
        ));
    }

    fn features(vals: [&[f64]; 3], dims: [LevelDims; 3]) -> MultiLevelFeatures {
        let maps: Vec<FeatureMap> = Level::ALL
            .iter()
            .zip(vals)
            .zip(dims)
            .map(|((&l, v), d)| FeatureMap::new(l, d, v.to_vec()).unwrap())
            .collect();
        MultiLevelFeatures::from_maps(maps.try_into().unwrap()).unwrap()
    }

    #[test]
    fn global_similarity_examples() {
        let dims = [LevelDims::new(1, 2, 2), LevelDims::new(1, 1, 3), LevelDims::new(2, 1, 1)];
        let q = features([&[1.0, 0.0, 1.0, 0.0], &[1.0, 2.0, 3.0], &[0.5, 1.5]], dims);
        assert!((global_similarity(&q, &q).unwrap() - 3.0).abs() < 1e-10);

        let scaled = MultiLevelFeatures::new(
            q.get(Level::Low).scaled(2.0),
            q.get(Level::Mid).scaled(2.0),
            q.get(Level::High).scaled(2.0),
        )
        .unwrap();
        assert!((global_similarity(&q, &scaled).unwrap() - 3.0).abs() < 1e-10);

        // Low level pools to (0,1) on the target, orthogonal to (1,0).
        let t = features([&[0.0, 1.0, 0.0, 1.0], &[1.0, 2.0, 3.0], &[0.5, 1.5]], dims);
        assert!((global_similarity(&q, &t).unwrap() - 2.0).abs() < 1e-10);

        let other = [LevelDims::new(2, 1, 2), LevelDims::new(1, 1, 3), LevelDims::new(2, 1, 1)];
        let bad = features([&[1.0, 0.0, 1.0, 0.0], &[1.0, 2.0, 3.0], &[0.5, 1.5]], other);
        assert!(matches!(global_similarity(&q, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn fuse_examples() {
        let w = FusionWeight::new(0.6).unwrap();
        assert!((fuse(1.0, 0.0, w) - 0.6).abs() < 1e-15);
        assert_eq!(fuse(3.0, 3.0, w), 3.0);
        assert_eq!(fuse(0.3, -0.7, FusionWeight::new(1.0).unwrap()), 0.3);
        assert_eq!(fuse(0.3, -0.7, FusionWeight::new(0.0).unwrap()), -0.7);
        assert!(matches!(FusionWeight::new(1.2), Err(Error::Config(_))));
        assert!(matches!(FusionWeight::new(-0.1), Err(Error::Config(_))));
        assert_eq!(FusionWeight::default().beta(), 0.6);
    }
}
