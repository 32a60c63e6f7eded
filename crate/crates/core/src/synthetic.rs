//! Synthetic bundles with controllable class structure.
//!
//! Each class owns a unit prototype per level, tiled over every position,
//! and a unit text prototype per token slot. Class prototypes at one level
//! share a common direction: `u_c ∝ g + separation · r_c`, so a small
//! `separation` makes classes hard to tell apart from the image alone while
//! the text stays informative.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bundle::FeatureBundle;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, Level, LevelDims, MultiLevelFeatures, TokenEmbeddings};
use crate::retrieval::{DatabaseEntry, QueryRecord};
use crate::tensor;

pub const GENERATOR_VERSION: &str = "synthetic-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub entries_per_class: usize,
    pub queries_per_class: usize,
    pub level_dims: [LevelDims; 3],
    pub text_dim: usize,
    pub noise: f64,
    pub tokens: usize,
    /// Weight of the class-specific direction against the shared one.
    /// `f64::INFINITY` gives independent prototypes.
    pub separation: f64,
}

pub const DEFAULT_LEVEL_DIMS: [LevelDims; 3] = [
    LevelDims::new(8, 8, 16),
    LevelDims::new(4, 4, 32),
    LevelDims::new(2, 2, 64),
];

impl SyntheticSpec {
    /// The reference setup: 3 classes, 60 entries and 15 queries each.
    pub fn reference(seed: u64) -> Self {
        Self {
            seed,
            classes: 3,
            entries_per_class: 60,
            queries_per_class: 15,
            level_dims: DEFAULT_LEVEL_DIMS,
            text_dim: 16,
            noise: 0.25,
            tokens: 6,
            separation: 0.2,
        }
    }

    /// Tiny dims for fast tests.
    pub fn small(seed: u64) -> Self {
        Self {
            seed,
            classes: 3,
            entries_per_class: 4,
            queries_per_class: 2,
            level_dims: [LevelDims::new(2, 2, 3), LevelDims::new(2, 1, 4), LevelDims::new(1, 1, 5)],
            text_dim: 4,
            noise: 0.1,
            tokens: 3,
            separation: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::arg(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.level_dims.iter().any(LevelDims::is_empty) || self.text_dim == 0 || self.tokens == 0 {
            return Err(Error::arg("synthetic dims and token count must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::arg(format!("noise {} must be finite and ≥ 0", self.noise)));
        }
        if !(self.separation > 0.0) {
            return Err(Error::arg(format!("separation {} must be > 0", self.separation)));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, n);
        let norm = tensor::norm(&v);
        if norm > 1e-9 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = tensor::norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn level_prototypes(rng: &mut impl Rng, classes: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    let shared = unit(rng, d);
    (0..classes)
        .map(|_| {
            let own = unit(rng, d);
            if separation.is_infinite() {
                own
            } else {
                normalized(shared.iter().zip(&own).map(|(g, r)| g + separation * r).collect())
            }
        })
        .collect()
}

fn noisy_tiled(rng: &mut impl Rng, proto: &[f64], positions: usize, noise: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(positions * proto.len());
    for _ in 0..positions {
        for &p in proto {
            let n: f64 = StandardNormal.sample(rng);
            out.push(p + noise * n);
        }
    }
    out
}

/// Draw a bundle. Same spec, same bytes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let image_protos: Vec<Vec<Vec<f64>>> = spec
        .level_dims
        .iter()
        .map(|d| level_prototypes(&mut rng, spec.classes, d.d, spec.separation))
        .collect();
    let text_protos: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|_| (0..spec.tokens).map(|_| unit(&mut rng, spec.text_dim)).collect())
        .collect();

    let image = |rng: &mut ChaCha8Rng, c: usize| -> Result<MultiLevelFeatures> {
        let mut maps = Vec::with_capacity(3);
        for level in Level::ALL {
            let dims = spec.level_dims[level.index()];
            let data = noisy_tiled(rng, &image_protos[level.index()][c], dims.positions(), spec.noise);
            maps.push(FeatureMap::new(level, dims, data)?);
        }
        MultiLevelFeatures::from_maps(maps.try_into().expect("three levels"))
    };

    let class_names: Vec<String> = (0..spec.classes).map(|c| format!("class{c}")).collect();
    let mut entries = Vec::with_capacity(spec.classes * spec.entries_per_class);
    for (c, name) in class_names.iter().enumerate() {
        for _ in 0..spec.entries_per_class {
            entries.push(DatabaseEntry {
                id: format!("e{:05}", entries.len()),
                label: name.clone(),
                features: image(&mut rng, c)?,
            });
        }
    }
    let mut queries = Vec::with_capacity(spec.classes * spec.queries_per_class);
    for (c, name) in class_names.iter().enumerate() {
        for _ in 0..spec.queries_per_class {
            let image_features = image(&mut rng, c)?;
            let mut text = Vec::with_capacity(spec.tokens * spec.text_dim);
            for proto in &text_protos[c] {
                for &p in proto {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    text.push(p + spec.noise * n);
                }
            }
            queries.push(QueryRecord {
                id: format!("q{:05}", queries.len()),
                label: name.clone(),
                image_features,
                text: TokenEmbeddings::new(spec.tokens, spec.text_dim, text)?,
            });
        }
    }

    let mut provenance = BTreeMap::new();
    provenance.insert("source".into(), GENERATOR_VERSION.into());
    provenance.insert(
        "spec".into(),
        serde_json::to_string(spec).map_err(|e| Error::Format(e.to_string()))?,
    );
    let bundle = FeatureBundle {
        level_dims: spec.level_dims,
        text_dim: spec.text_dim,
        class_names,
        provenance,
        entries,
        queries,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Settings for [`generate_quadrant_cue`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantSpec {
    pub seed: u64,
    pub classes: usize,
    pub entries_per_class: usize,
    pub queries_per_class: usize,
    pub level_dims: [LevelDims; 3],
    pub text_dim: usize,
    pub tokens: usize,
    pub noise: f64,
    /// Norm of the class cue added at each cue position.
    pub cue: f64,
}

impl QuadrantSpec {
    pub fn reference(seed: u64) -> Self {
        Self {
            seed,
            classes: 3,
            entries_per_class: 30,
            queries_per_class: 6,
            level_dims: [LevelDims::new(8, 8, 8), LevelDims::new(4, 4, 8), LevelDims::new(2, 2, 8)],
            text_dim: 8,
            tokens: 2,
            noise: 0.25,
            cue: 1.0,
        }
    }
}

/// Images whose class shows only inside the top-left quadrant, as a
/// `±v_c` checkerboard. Each quadrant holds as many `+v_c` as `−v_c` cells,
/// so every class has the same mean-pooled statistics; only a spatially
/// selective read-out can see the class. The high level's quadrant is a
/// single cell and carries noise only. Texts are pure noise.
pub fn generate_quadrant_cue(spec: &QuadrantSpec) -> Result<FeatureBundle> {
    if spec.classes < 2 || spec.tokens == 0 || spec.text_dim == 0 {
        return Err(Error::arg("quadrant bundle needs ≥ 2 classes and a non-empty text"));
    }
    for (i, d) in spec.level_dims.iter().enumerate() {
        if d.is_empty() || (i < 2 && (d.h % 4 != 0 || d.w % 2 != 0)) {
            return Err(Error::arg(format!(
                "quadrant levels need h divisible by 4 and even w, got {d}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cues: Vec<Vec<Vec<f64>>> = spec
        .level_dims
        .iter()
        .map(|d| (0..spec.classes).map(|_| unit(&mut rng, d.d)).collect())
        .collect();
    let background: Vec<Vec<f64>> = spec.level_dims.iter().map(|d| unit(&mut rng, d.d)).collect();

    let image = |rng: &mut ChaCha8Rng, c: usize| -> Result<MultiLevelFeatures> {
        let mut maps = Vec::with_capacity(3);
        for level in Level::ALL {
            let li = level.index();
            let dims = spec.level_dims[li];
            let mut data = Vec::with_capacity(dims.len());
            for y in 0..dims.h {
                for x in 0..dims.w {
                    let in_quadrant = level != Level::High && y < dims.h / 2 && x < dims.w / 2;
                    let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                    for j in 0..dims.d {
                        let n: f64 = StandardNormal.sample(rng);
                        let mut v = background[li][j] + spec.noise * n;
                        if in_quadrant {
                            v += sign * spec.cue * cues[li][c][j];
                        }
                        data.push(v);
                    }
                }
            }
            maps.push(FeatureMap::new(level, dims, data)?);
        }
        MultiLevelFeatures::from_maps(maps.try_into().expect("three levels"))
    };

    let class_names: Vec<String> = (0..spec.classes).map(|c| format!("class{c}")).collect();
    let mut entries = Vec::new();
    let mut queries = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        for _ in 0..spec.entries_per_class {
            entries.push(DatabaseEntry {
                id: format!("e{:05}", entries.len()),
                label: name.clone(),
                features: image(&mut rng, c)?,
            });
        }
    }
    for (c, name) in class_names.iter().enumerate() {
        for _ in 0..spec.queries_per_class {
            let image_features = image(&mut rng, c)?;
            let text = gaussian(&mut rng, spec.tokens * spec.text_dim);
            queries.push(QueryRecord {
                id: format!("q{:05}", queries.len()),
                label: name.clone(),
                image_features,
                text: TokenEmbeddings::new(spec.tokens, spec.text_dim, text)?,
            });
        }
    }
    let mut provenance = BTreeMap::new();
    provenance.insert("source".into(), "quadrant-cue-v1".into());
    provenance.insert(
        "spec".into(),
        serde_json::to_string(spec).map_err(|e| Error::Format(e.to_string()))?,
    );
    let bundle = FeatureBundle {
        level_dims: spec.level_dims,
        text_dim: spec.text_dim,
        class_names,
        provenance,
        entries,
        queries,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Mean pooled cosine over same-class and different-class entry pairs, per
/// level summed. Used to check that a bundle has class structure at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationReport {
    pub intra: f64,
    pub inter: f64,
}

pub fn class_separation(bundle: &FeatureBundle) -> Result<SeparationReport> {
    let pooled: Vec<[Vec<f64>; 3]> = bundle
        .entries
        .iter()
        .map(|e| [0, 1, 2].map(|i| e.features.maps()[i].mean_pool()))
        .collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let mut s = 0.0;
            for l in 0..3 {
                s += tensor::cosine_similarity(&pooled[i][l], &pooled[j][l])?;
            }
            if bundle.entries[i].label == bundle.entries[j].label {
                intra += s;
                n_intra += 1;
            } else {
                inter += s;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::arg("need at least two classes with two entries each"));
    }
    Ok(SeparationReport {
        intra: intra / n_intra as f64,
        inter: inter / n_inter as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let s = SyntheticSpec::small(3);
        assert_eq!(generate_synthetic(&s).unwrap(), generate_synthetic(&s).unwrap());
        assert_ne!(
            generate_synthetic(&s).unwrap(),
            generate_synthetic(&SyntheticSpec::small(4)).unwrap()
        );
    }

    #[test]
    fn zero_noise_gives_identical_class_members() {
        let mut s = SyntheticSpec::small(1);
        s.noise = 0.0;
        let b = generate_synthetic(&s).unwrap();
        let same: Vec<_> = b.entries.iter().filter(|e| e.label == "class0").collect();
        for e in &same[1..] {
            assert_eq!(e.features, same[0].features);
        }
        let r = class_separation(&b).unwrap();
        assert!((r.intra - 3.0).abs() < 1e-10, "pooled cosine 1.0 at each level");
    }

    #[test]
    fn measured_intra_exceeds_inter() {
        let mut s = SyntheticSpec::reference(9);
        s.noise = 0.1;
        s.level_dims[2] = LevelDims::new(2, 2, 32);
        s.entries_per_class = 10;
        let r = class_separation(&generate_synthetic(&s).unwrap()).unwrap();
        assert!(r.intra > r.inter, "{r:?}");
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = SyntheticSpec::small(0);
        s.classes = 1;
        assert!(matches!(generate_synthetic(&s), Err(Error::Argument(_))));
        let mut s = SyntheticSpec::small(0);
        s.level_dims[1] = LevelDims::new(0, 2, 2);
        assert!(matches!(generate_synthetic(&s), Err(Error::Argument(_))));
        let mut s = SyntheticSpec::small(0);
        s.noise = -0.1;
        assert!(matches!(generate_synthetic(&s), Err(Error::Argument(_))));
    }

    #[test]
    fn quadrant_cue_has_class_free_pooled_means() {
        let mut s = QuadrantSpec::reference(2);
        s.noise = 0.0;
        let b = generate_quadrant_cue(&s).unwrap();
        let a = &b.entries[0].features;
        let z = b.entries.iter().find(|e| e.label != b.entries[0].label).unwrap();
        for l in 0..3 {
            let (pa, pz) = (a.maps()[l].mean_pool(), z.features.maps()[l].mean_pool());
            for (x, y) in pa.iter().zip(&pz) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_ne!(a, &z.features);
    }
}
