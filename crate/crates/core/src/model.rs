//! The trainable retrieval model: one composer block and one region mask
//! generator per level, plus the scoring path that ties them together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{FusionWeight, RegionMaskGenerator, DEFAULT_K};
use crate::autodiff::{Tape, Var};
use crate::composer::{self, CrossModalBlock};
use crate::error::{Error, Result};
use crate::features::{Level, LevelDims, MultiLevelFeatures, TokenEmbeddings};
use crate::params::{BoundParams, ParamStore};
use crate::tensor;

pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub level_dims: [LevelDims; 3],
    pub text_dim: usize,
    pub k: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(level_dims: [LevelDims; 3], text_dim: usize) -> Self {
        Self {
            level_dims,
            text_dim,
            k: DEFAULT_K,
            init_std: DEFAULT_INIT_STD,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_dims.iter().any(LevelDims::is_empty) {
            return Err(Error::config("every level needs non-zero dims"));
        }
        if self.text_dim == 0 {
            return Err(Error::config("text width must be positive"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be positive"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-level pooled features and mean region descriptors on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncodingVars {
    pub pooled: [Var; 3],
    pub regions: [Var; 3],
}

/// Per-level pooled features and mean region descriptors, detached.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub pooled: [Vec<f64>; 3],
    pub regions: [Vec<f64>; 3],
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub score: Var,
    pub local: Var,
    pub global: Var,
}

/// Fused score with its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub score: f64,
    pub local: f64,
    pub global: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    blocks: Vec<CrossModalBlock>,
    generators: Vec<RegionMaskGenerator>,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::with_capacity(3);
        for level in Level::ALL {
            let d = config.level_dims[level.index()].d;
            blocks.push(CrossModalBlock::init(
                level,
                d,
                config.text_dim,
                config.init_std,
                &mut params,
                &mut rng,
            )?);
        }
        let mut generators = Vec::with_capacity(3);
        for level in Level::ALL {
            let d = config.level_dims[level.index()].d;
            generators.push(RegionMaskGenerator::init(
                level,
                d,
                config.k,
                config.init_std,
                &mut params,
                &mut rng,
            )?);
        }
        Ok(Self {
            config,
            params,
            blocks,
            generators,
        })
    }

    /// Rebuild from stored parameters, validating names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(3);
        let mut generators = Vec::with_capacity(3);
        for level in Level::ALL {
            let d = config.level_dims[level.index()].d;
            blocks.push(CrossModalBlock::attach(level, d, config.text_dim, &params)?);
            generators.push(RegionMaskGenerator::attach(level, d, config.k, &params)?);
        }
        let expected = Self::new(ModelConfig {
            init_std: 0.0,
            ..config.clone()
        })?;
        if expected.params.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                expected.params.len(),
                params.len()
            )));
        }
        if !params.all_finite() {
            return Err(Error::Numeric("non-finite value in stored parameters".into()));
        }
        Ok(Self {
            config,
            params,
            blocks,
            generators,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn block(&self, level: Level) -> &CrossModalBlock {
        &self.blocks[level.index()]
    }

    pub fn blocks(&self) -> &[CrossModalBlock] {
        &self.blocks
    }

    pub fn generator(&self, level: Level) -> &RegionMaskGenerator {
        &self.generators[level.index()]
    }

    pub fn generators(&self) -> &[RegionMaskGenerator] {
        &self.generators
    }

    fn check_features(&self, x: &MultiLevelFeatures, what: &str) -> Result<()> {
        if !x.conforms_to(&self.config.level_dims) {
            let got: Vec<String> = x.dims().iter().map(ToString::to_string).collect();
            let want: Vec<String> = self.config.level_dims.iter().map(ToString::to_string).collect();
            return Err(Error::config(format!(
                "{what} features {got:?} do not match model dims {want:?}"
            )));
        }
        Ok(())
    }

    fn check_text(&self, z: &TokenEmbeddings) -> Result<()> {
        if z.dim() != self.config.text_dim {
            return Err(Error::config(format!(
                "text width {} does not match model text width {}",
                z.dim(),
                self.config.text_dim
            )));
        }
        Ok(())
    }

    /// Pool and region-describe one level of an already composed or raw map.
    fn encode_level(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        level: Level,
        x: Var,
    ) -> Result<(Var, Var)> {
        let pooled = tape.mean_rows(x)?;
        let desc = self.generator(level).forward_descriptors(tape, p, x)?;
        let region = tape.mean_rows(desc)?;
        Ok((pooled, region))
    }

    /// Composed query levels as `(h·w)×d` tape values.
    pub fn compose_vars(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        image: &MultiLevelFeatures,
        text: Var,
    ) -> Result<[Var; 3]> {
        self.check_features(image, "query")?;
        let mut out = Vec::with_capacity(3);
        for level in Level::ALL {
            let x = tape.constant(image.get(level).positions());
            out.push(self.block(level).forward(tape, p, x, text)?);
        }
        Ok(out.try_into().expect("three levels"))
    }

    pub fn encode_query_vars(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        image: &MultiLevelFeatures,
        text: &TokenEmbeddings,
    ) -> Result<EncodingVars> {
        self.check_text(text)?;
        let z = tape.constant(text.tensor().clone());
        let composed = self.compose_vars(tape, p, image, z)?;
        self.encode_composed_vars(tape, p, composed)
    }

    pub fn encode_composed_vars(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        composed: [Var; 3],
    ) -> Result<EncodingVars> {
        let mut pooled = Vec::with_capacity(3);
        let mut regions = Vec::with_capacity(3);
        for level in Level::ALL {
            let (pv, rv) = self.encode_level(tape, p, level, composed[level.index()])?;
            pooled.push(pv);
            regions.push(rv);
        }
        Ok(EncodingVars {
            pooled: pooled.try_into().expect("three levels"),
            regions: regions.try_into().expect("three levels"),
        })
    }

    /// Targets bypass the composer.
    pub fn encode_target_vars(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        image: &MultiLevelFeatures,
    ) -> Result<EncodingVars> {
        self.check_features(image, "target")?;
        let mut composed = Vec::with_capacity(3);
        for level in Level::ALL {
            composed.push(tape.constant(image.get(level).positions()));
        }
        self.encode_composed_vars(tape, p, composed.try_into().expect("three levels"))
    }

    pub fn score_vars(
        tape: &mut Tape,
        q: &EncodingVars,
        t: &EncodingVars,
        w: FusionWeight,
    ) -> Result<ScoreVars> {
        let level_sum = |tape: &mut Tape, a: &[Var; 3], b: &[Var; 3]| -> Result<Var> {
            let mut total = tape.cosine(a[0], b[0])?;
            for i in 1..3 {
                let c = tape.cosine(a[i], b[i])?;
                total = tape.add(total, c)?;
            }
            Ok(total)
        };
        let local = level_sum(tape, &q.regions, &t.regions)?;
        let global = level_sum(tape, &q.pooled, &t.pooled)?;
        let wl = tape.scale(local, w.beta());
        let wg = tape.scale(global, 1.0 - w.beta());
        let score = tape.add(wl, wg)?;
        Ok(ScoreVars {
            score,
            local,
            global,
        })
    }

    fn detach(tape: &Tape, e: &EncodingVars) -> Encoding {
        let grab = |vars: &[Var; 3]| -> [Vec<f64>; 3] {
            [0, 1, 2].map(|i| tape.value(vars[i]).data().to_vec())
        };
        Encoding {
            pooled: grab(&e.pooled),
            regions: grab(&e.regions),
        }
    }

    pub fn encode_query(
        &self,
        image: &MultiLevelFeatures,
        text: &TokenEmbeddings,
    ) -> Result<Encoding> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = self.encode_query_vars(&mut tape, &p, image, text)?;
        Ok(Self::detach(&tape, &e))
    }

    pub fn encode_target(&self, image: &MultiLevelFeatures) -> Result<Encoding> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = self.encode_target_vars(&mut tape, &p, image)?;
        Ok(Self::detach(&tape, &e))
    }

    pub fn compose_all(
        &self,
        image: &MultiLevelFeatures,
        text: &TokenEmbeddings,
    ) -> Result<MultiLevelFeatures> {
        self.check_features(image, "query")?;
        self.check_text(text)?;
        composer::compose_all(&self.params, &self.blocks, image, text)
    }
}

/// Score two detached encodings; same arithmetic as [`Model::score_vars`].
pub fn score_encodings(q: &Encoding, t: &Encoding, w: FusionWeight) -> Result<Scores> {
    let level_sum = |a: &[Vec<f64>; 3], b: &[Vec<f64>; 3]| -> Result<f64> {
        let mut total = tensor::cosine_similarity(&a[0], &b[0])?;
        for i in 1..3 {
            total += tensor::cosine_similarity(&a[i], &b[i])?;
        }
        Ok(total)
    };
    let local = level_sum(&q.regions, &t.regions)?;
    let global = level_sum(&q.pooled, &t.pooled)?;
    let score = w.beta() * local + (1.0 - w.beta()) * global;
    Ok(Scores {
        score,
        local,
        global,
    })
}
