//! Gradient checks over every trainable path of the model.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::{FusionWeight, RegionMaskGenerator, DEFAULT_K};
use crate::autodiff::{Tape, Var};
use crate::composer::CrossModalBlock;
use crate::error::Result;
use crate::features::{FeatureMap, Level, LevelDims, MultiLevelFeatures, TokenEmbeddings};
use crate::gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
use crate::model::{EncodingVars, Model, ModelConfig};
use crate::params::{BoundParams, ParamStore};
use crate::synthetic::DEFAULT_LEVEL_DIMS;
use crate::tensor::Tensor;
use crate::trainer::contrastive_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteConfig {
    pub level_dims: [LevelDims; 3],
    pub text_dim: usize,
    pub tokens: usize,
    pub k: usize,
    pub eps: f64,
    /// Scale of the random parameter values the checks run at. Larger than
    /// the training init so that every nonlinearity is exercised.
    pub param_std: f64,
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            level_dims: DEFAULT_LEVEL_DIMS,
            text_dim: 16,
            tokens: 4,
            k: DEFAULT_K,
            eps: 1e-5,
            param_std: 0.2,
            max_coords_per_tensor: Some(64),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteReport {
    pub cases: Vec<SuiteCase>,
    pub elapsed: Duration,
}

impl GradSuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn coords_checked(&self) -> usize {
        self.cases.iter().map(|c| c.report.coords_checked).sum()
    }
}

fn randn(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

/// Jitter every parameter so biases and norm gains are not at their
/// special initial values.
fn jitter(store: &mut ParamStore, std: f64, rng: &mut impl Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += std * n;
        }
    }
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn probe(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

fn features(rng: &mut impl Rng, dims: &[LevelDims; 3]) -> Result<MultiLevelFeatures> {
    let maps = Level::ALL.map(|l| {
        let d = dims[l.index()];
        FeatureMap::new(l, d, randn(rng, vec![d.len()], 1.0).into_data())
    });
    let [a, b, c] = maps;
    MultiLevelFeatures::new(a?, b?, c?)
}

impl GradSuiteConfig {
    fn options(&self, case: u64) -> GradCheckOptions {
        GradCheckOptions {
            eps: self.eps,
            max_coords_per_tensor: self.max_coords_per_tensor,
            only: None,
            seed: self.seed.wrapping_add(case),
        }
    }

    fn composer_case(&self, level: Level, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let d = self.level_dims[level.index()];
        let mut store = ParamStore::new();
        let block = CrossModalBlock::init(level, d.d, self.text_dim, self.param_std, &mut store, rng)?;
        jitter(&mut store, self.param_std, rng);
        let n = store.len();
        let mut params = store.tensors().to_vec();
        params.push(randn(rng, vec![d.positions(), d.d], 1.0));
        params.push(randn(rng, vec![self.tokens, self.text_dim], 1.0));
        let r = randn(rng, vec![d.positions(), d.d], 1.0);
        gradient_check(
            |tape, v| {
                let p = BoundParams::from_vars(v[..n].to_vec());
                let out = block.forward(tape, &p, v[n], v[n + 1])?;
                probe(tape, out, &r)
            },
            &mut params,
            &self.options(level.index() as u64),
        )
    }

    fn mask_case(&self, level: Level, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let d = self.level_dims[level.index()];
        let mut store = ParamStore::new();
        let gen = RegionMaskGenerator::init(level, d.d, self.k, self.param_std * 4.0, &mut store, rng)?;
        jitter(&mut store, self.param_std, rng);
        let n = store.len();
        let mut params = store.tensors().to_vec();
        params.push(randn(rng, vec![d.positions(), d.d], 1.0));
        let r = randn(rng, vec![self.k, d.d], 1.0);
        gradient_check(
            |tape, v| {
                let p = BoundParams::from_vars(v[..n].to_vec());
                let out = gen.forward_descriptors(tape, &p, v[n])?;
                probe(tape, out, &r)
            },
            &mut params,
            &self.options(10 + level.index() as u64),
        )
    }

    /// Two queries against two targets through compose → descriptors →
    /// fused score → contrastive loss.
    fn chain_case(&self, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
        let mut cfg = ModelConfig::new(self.level_dims, self.text_dim);
        cfg.k = self.k;
        cfg.init_std = self.param_std;
        cfg.seed = rng.random();
        let mut model = Model::new(cfg)?;
        jitter(model.params_mut(), self.param_std, rng);
        let queries = (0..2)
            .map(|_| {
                let text = randn(rng, vec![self.tokens * self.text_dim], 1.0).into_data();
                Ok((features(rng, &self.level_dims)?, TokenEmbeddings::new(self.tokens, self.text_dim, text)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let targets = (0..2)
            .map(|_| features(rng, &self.level_dims))
            .collect::<Result<Vec<_>>>()?;
        let w = FusionWeight::new(0.6)?;
        let mut params = model.params().tensors().to_vec();
        gradient_check(
            |tape, v| {
                let p = BoundParams::from_vars(v.to_vec());
                let q: Vec<EncodingVars> = queries
                    .iter()
                    .map(|(img, txt)| model.encode_query_vars(tape, &p, img, txt))
                    .collect::<Result<_>>()?;
                let t: Vec<EncodingVars> = targets
                    .iter()
                    .map(|img| model.encode_target_vars(tape, &p, img))
                    .collect::<Result<_>>()?;
                let mut cells = Vec::with_capacity(4);
                for qi in &q {
                    for tj in &t {
                        cells.push(Model::score_vars(tape, qi, tj, w)?.score);
                    }
                }
                let sims = tape.stack(&cells, vec![2, 2])?;
                contrastive_loss(tape, sims, &[0, 1], 0.1)
            },
            &mut params,
            &self.options(20),
        )
    }
}

/// Run every case: composer block and mask generator per level, then the
/// full chain.
pub fn run_gradient_suite(cfg: &GradSuiteConfig) -> Result<GradSuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = Vec::new();
    let mut timed = |name: String, f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<GradCheckReport>| -> Result<()> {
        let t = Instant::now();
        let report = f(&mut rng)?;
        log::info!("{name}: max rel error {:.3e} over {} coords", report.max_rel_error, report.coords_checked);
        cases.push(SuiteCase {
            name,
            report,
            elapsed: t.elapsed(),
        });
        Ok(())
    };
    for level in Level::ALL {
        timed(format!("composer.{level}"), &mut |r| cfg.composer_case(level, r))?;
    }
    for level in Level::ALL {
        timed(format!("masks.{level}"), &mut |r| cfg.mask_case(level, r))?;
    }
    timed("chain".to_string(), &mut |r| cfg.chain_case(r))?;
    Ok(GradSuiteReport {
        cases,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_suite_passes() {
        let cfg = GradSuiteConfig {
            level_dims: [LevelDims::new(2, 2, 3), LevelDims::new(2, 1, 4), LevelDims::new(1, 1, 5)],
            text_dim: 3,
            tokens: 2,
            k: 2,
            max_coords_per_tensor: None,
            ..GradSuiteConfig::default()
        };
        let r = run_gradient_suite(&cfg).unwrap();
        assert_eq!(r.cases.len(), 7);
        assert!(r.max_rel_error() < 1e-6, "{:?}", r.cases);
    }
}
