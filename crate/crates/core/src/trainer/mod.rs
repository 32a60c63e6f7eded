//! Contrastive training with in-batch negatives, Adam and early stopping.

mod adam;
mod kfold;
mod loss;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS};
pub use kfold::{stratified_kfold, FoldItem, FoldSplit};
pub use loss::{contrastive_loss, contrastive_loss_value};

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::FusionWeight;
use crate::autodiff::Tape;
use crate::bundle::FeatureBundle;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{EncodingVars, Model, ModelConfig};
use crate::retrieval::{self, Database, DatabaseEntry, QueryRecord};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub temperature: f64,
    /// Set from the experiment-level seed, not from the `[train]` table.
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub beta: FusionWeight,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            max_epochs: 100,
            patience: 30,
            batch_size: 16,
            temperature: 0.1,
            seed: 0,
            beta: FusionWeight::default(),
            validation_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::config("max_epochs and patience must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 for in-batch negatives"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: f64,
    pub best: bool,
}

/// Tracks the best validation score; only strict improvements count.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Observation {
        let improved = match self.best {
            None => true,
            Some(b) => metric > b,
        };
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub epochs_run: usize,
}

/// The records a fold trains, validates and tests on.
#[derive(Debug, Clone)]
pub struct FoldData<'a> {
    pub train_queries: Vec<&'a QueryRecord>,
    pub train_db: Database,
    pub val_queries: Vec<&'a QueryRecord>,
    pub test_queries: Vec<&'a QueryRecord>,
    /// Everything outside the test fold: train ∪ validation entries.
    pub test_db: Database,
}

impl<'a> FoldData<'a> {
    pub fn new(bundle: &'a FeatureBundle, fold: &FoldSplit) -> Result<Self> {
        let train = fold.train_set();
        let val = fold.validation_set();
        let test = fold.test_set();
        let pick = |ids: &BTreeSet<&str>| -> Vec<&'a QueryRecord> {
            bundle.queries.iter().filter(|q| ids.contains(q.id.as_str())).collect()
        };
        let entries = |keep: &dyn Fn(&str) -> bool| -> Vec<DatabaseEntry> {
            bundle.entries.iter().filter(|e| keep(&e.id)).cloned().collect()
        };
        Ok(Self {
            train_queries: pick(&train),
            val_queries: pick(&val),
            test_queries: pick(&test),
            train_db: Database::new(entries(&|id| train.contains(id)))?,
            test_db: Database::new(entries(&|id| !test.contains(id)))?,
        })
    }
}

/// Validation mAP: each query ranked against `db` with its own id excluded.
pub fn validation_map(model: &Model, queries: &[&QueryRecord], db: &Database, w: FusionWeight) -> Result<f64> {
    let lists = retrieval::rank_all(queries, db, model, w, true)?;
    let rels = lists
        .iter()
        .zip(queries)
        .map(|(l, q)| {
            let r = db.entries().iter().filter(|e| e.label == q.label && e.id != q.id).count();
            l.relevance(&q.label, r)
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::mean_ap(&rels)
}

/// Loss and parameter gradients for one batch of (query, positive) pairs.
/// Row `i` of the score matrix holds query `i` against every positive.
pub fn batch_gradients(
    model: &Model,
    batch: &[(&QueryRecord, &DatabaseEntry)],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let q: Vec<EncodingVars> = batch
        .iter()
        .map(|(q, _)| model.encode_query_vars(&mut tape, &p, &q.image_features, &q.text))
        .collect::<Result<_>>()?;
    let t: Vec<EncodingVars> = batch
        .iter()
        .map(|(_, e)| model.encode_target_vars(&mut tape, &p, &e.features))
        .collect::<Result<_>>()?;
    let b = batch.len();
    let mut cells = Vec::with_capacity(b * b);
    for qi in &q {
        for tj in &t {
            cells.push(Model::score_vars(&mut tape, qi, tj, cfg.beta)?.score);
        }
    }
    let sims = tape.stack(&cells, vec![b, b])?;
    let targets: Vec<usize> = (0..b).collect();
    let loss = contrastive_loss(&mut tape, sims, &targets, cfg.temperature)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss is {value}")));
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, p.collect_grads(&mut grads, model.params())))
}

/// Train from `model` on `data`, keeping the checkpoint with the best
/// validation mAP.
pub fn train(mut model: Model, data: &FoldData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train_queries.is_empty() {
        return Err(Error::config("fold has no training queries"));
    }
    if data.val_queries.is_empty() {
        return Err(Error::config("fold has no validation queries"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_model = model.clone();
    let mut log = Vec::new();

    // Same-label training entries per query, fixed up front.
    let mut pool: Vec<(&QueryRecord, Vec<&DatabaseEntry>)> = Vec::new();
    for q in &data.train_queries {
        let pos: Vec<&DatabaseEntry> = data
            .train_db
            .entries()
            .iter()
            .filter(|e| e.label == q.label && e.id != q.id)
            .collect();
        if pos.is_empty() {
            log::warn!("query {} has no training positive; skipped", q.id);
        } else {
            pool.push((q, pos));
        }
    }
    if pool.is_empty() {
        return Err(Error::config("no training query has a positive in the training fold"));
    }

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let pairs: Vec<(&QueryRecord, &DatabaseEntry)> = order
            .iter()
            .map(|&i| {
                let (q, pos) = &pool[i];
                (*q, *pos.choose(&mut rng).expect("non-empty"))
            })
            .collect();

        let mut total = 0.0;
        let mut rows = 0usize;
        for batch in pairs.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let (loss, grads) = batch_gradients(&model, batch, cfg)?;
            adam_step(model.params_mut(), &grads, &mut adam, cfg.learning_rate, cfg.weight_decay)?;
            total += loss * batch.len() as f64;
            rows += batch.len();
        }
        let train_loss = if rows == 0 { f64::NAN } else { total / rows as f64 };

        let val_map = validation_map(&model, &data.val_queries, &data.train_db, cfg.beta)?;
        let obs = stopper.observe(epoch, val_map);
        if obs.improved {
            best_model = model.clone();
        }
        log::debug!("epoch {epoch}: loss {train_loss:.5} val mAP {val_map:.4}");
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_map,
            best: obs.improved,
        });
        if obs.stop {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best_model,
        epochs_run: log.len(),
        best_epoch: stopper.best_epoch(),
        best_val_map: stopper.best().unwrap_or(f64::NAN),
        log,
    })
}

/// Initialize a model from `model_cfg` and train it on one fold.
pub fn train_fold(
    bundle: &FeatureBundle,
    fold: &FoldSplit,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<TrainOutcome> {
    let data = FoldData::new(bundle, fold)?;
    train(Model::new(model_cfg.clone())?, &data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_after_patience_and_keeps_best() {
        let mut es = EarlyStopping::new(30);
        let history: Vec<f64> = (1..=100).map(|e| if e <= 5 { e as f64 * 0.1 } else { 0.5 }).collect();
        let mut stopped = None;
        for (i, &m) in history.iter().enumerate() {
            if es.observe(i + 1, m).stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(35));
        assert_eq!(es.best_epoch(), 5);
        assert_eq!(es.best(), Some(0.5));
    }

    #[test]
    fn drop_does_not_replace_best() {
        let mut es = EarlyStopping::new(3);
        assert!(es.observe(1, 0.4).improved);
        assert!(es.observe(2, 0.6).improved);
        assert!(!es.observe(3, 0.2).improved);
        assert!(!es.observe(4, 0.6).improved);
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
