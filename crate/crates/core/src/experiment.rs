//! Cross-validation harness and its on-disk artifacts.
//!
//! A run directory holds `manifest.json`, `report.jsonl` (one record per
//! fold, then one aggregate record), `report.txt`, and per fold
//! `fold{i}/train_log.jsonl`, `fold{i}/ranked.tsv`, `fold{i}/model.cirm` and
//! `fold{i}/split.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::FusionWeight;
use crate::bundle::{load_bundle, FeatureBundle, BUNDLE_VERSION};
use crate::checkpoint::{save_checkpoint, CHECKPOINT_VERSION};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, RelevanceVector, Summary};
use crate::model::{Model, ModelConfig};
use crate::retrieval::{self, Database, QueryRecord, RankedEntry, RankedList};
use crate::trainer::{self, EpochRecord, FoldData, FoldItem, FoldSplit, TrainOutcome};

pub const RANKED_LIST_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

const RANKED_HEADER: [&str; 9] = [
    "query_id",
    "rank",
    "candidate_id",
    "score",
    "s_local",
    "s_global",
    "candidate_label",
    "is_relevant",
    "num_relevant",
];

/// A ranked list with what is needed to judge it.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgedList {
    pub list: RankedList,
    pub query_label: String,
    pub num_relevant: usize,
}

impl JudgedList {
    pub fn relevance(&self) -> Result<RelevanceVector> {
        self.list.relevance(&self.query_label, self.num_relevant)
    }
}

/// Rank `queries` against `db` and attach label-level ground truth.
pub fn rank_and_judge(
    model: &Model,
    queries: &[&QueryRecord],
    db: &Database,
    w: FusionWeight,
    exclude_self: bool,
) -> Result<Vec<JudgedList>> {
    let lists = retrieval::rank_all(queries, db, model, w, exclude_self)?;
    Ok(lists
        .into_iter()
        .zip(queries)
        .map(|(list, q)| {
            let num_relevant = db
                .entries()
                .iter()
                .filter(|e| e.label == q.label && !(exclude_self && e.id == q.id))
                .count();
            JudgedList {
                list,
                query_label: q.label.clone(),
                num_relevant,
            }
        })
        .collect())
}

pub fn evaluate_lists(lists: &[JudgedList], cutoffs: &[usize]) -> Result<MetricReport> {
    let rels = lists.iter().map(JudgedList::relevance).collect::<Result<Vec<_>>>()?;
    metrics::evaluate(&rels, cutoffs)
}

/// Tab-separated, one row per ranked candidate, with a header row.
pub fn write_ranked_lists(path: impl AsRef<Path>, lists: &[JudgedList]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{}", RANKED_HEADER.join("\t"))?;
    for j in lists {
        for (i, e) in j.list.entries.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                j.list.query_id,
                i + 1,
                e.candidate_id,
                e.scores.score,
                e.scores.local,
                e.scores.global,
                e.label,
                u8::from(e.label == j.query_label),
                j.num_relevant
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Relevance per query from a ranked-list file, in file order.
pub fn read_ranked_lists(path: impl AsRef<Path>) -> Result<Vec<(String, RelevanceVector)>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Format(format!("{}: empty ranked-list file", path.display())))?;
    if header.split('\t').collect::<Vec<_>>() != RANKED_HEADER {
        return Err(Error::Format(format!("{}: unexpected header {header:?}", path.display())));
    }
    let mut out: Vec<(String, Vec<bool>, usize)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("{} line {}: {what}", path.display(), n + 2));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != RANKED_HEADER.len() {
            return Err(bad("wrong column count"));
        }
        let rank: usize = cols[1].parse().map_err(|_| bad("bad rank"))?;
        let rel = match cols[7] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("is_relevant must be 0 or 1")),
        };
        let r: usize = cols[8].parse().map_err(|_| bad("bad num_relevant"))?;
        for c in &cols[3..6] {
            c.parse::<f64>().map_err(|_| bad("bad score"))?;
        }
        match out.last_mut() {
            Some((q, rels, nr)) if q == cols[0] => {
                if rank != rels.len() + 1 || *nr != r {
                    return Err(bad("ranks must be consecutive with a fixed num_relevant"));
                }
                rels.push(rel);
            }
            _ => {
                if rank != 1 {
                    return Err(bad("each query's list must start at rank 1"));
                }
                if out.iter().any(|(q, _, _)| q == cols[0]) {
                    return Err(bad("query rows are not contiguous"));
                }
                out.push((cols[0].to_string(), vec![rel], r));
            }
        }
    }
    out.into_iter()
        .map(|(q, rel, r)| {
            let v = RelevanceVector::new(rel, r).map_err(|e| Error::Format(format!("query {q}: {e}")))?;
            Ok((q, v))
        })
        .collect()
}

pub fn write_training_log(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in log {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_queries: usize,
    pub database_size: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_map: f64,
    pub trained: MetricReport,
    pub untrained: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub k: usize,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub map: Summary,
    pub accuracy: Vec<AccuracySummary>,
}

impl Aggregate {
    pub fn accuracy_at(&self, k: usize) -> Option<Summary> {
        self.accuracy.iter().find(|a| a.k == k).map(|a| a.summary)
    }
}

pub fn aggregate(reports: &[&MetricReport], cutoffs: &[usize]) -> Result<Aggregate> {
    let maps: Vec<f64> = reports.iter().map(|r| r.map).collect();
    let accuracy = cutoffs
        .iter()
        .map(|&k| {
            let vals = reports
                .iter()
                .map(|r| r.accuracy_at(k).ok_or_else(|| Error::arg(format!("no Acc@{k} in report"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(AccuracySummary {
                k,
                summary: metrics::summarize(&vals)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Aggregate {
        map: metrics::summarize(&maps)?,
        accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub folds: Vec<FoldReport>,
    pub trained: Aggregate,
    pub untrained: Aggregate,
}

/// Everything one fold produced, before anything is written.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub split: FoldSplit,
    pub outcome: TrainOutcome,
    pub ranked: Vec<JudgedList>,
    pub report: FoldReport,
}

/// Items to split: every distinct id, stratified by label, with entries,
/// queries and ids that are both spread evenly within each label.
pub fn fold_items(bundle: &FeatureBundle) -> Vec<FoldItem> {
    let mut items: BTreeMap<&str, (&str, bool, bool)> = BTreeMap::new();
    for e in &bundle.entries {
        items.entry(&e.id).or_insert((&e.label, false, false)).1 = true;
    }
    for q in &bundle.queries {
        items.entry(&q.id).or_insert((&q.label, false, false)).2 = true;
    }
    items
        .into_iter()
        .map(|(id, (label, is_entry, is_query))| {
            let group = match (is_entry, is_query) {
                (true, true) => "both",
                (true, false) => "entry",
                _ => "query",
            };
            FoldItem::new(id, label).with_group(group)
        })
        .collect()
}

pub fn make_folds(bundle: &FeatureBundle, cfg: &ExperimentConfig) -> Result<Vec<FoldSplit>> {
    trainer::stratified_kfold(&fold_items(bundle), cfg.folds, cfg.train.validation_fraction, cfg.seed)
}

pub fn model_config(bundle: &FeatureBundle, cfg: &ExperimentConfig, fold: usize) -> ModelConfig {
    ModelConfig {
        level_dims: bundle.level_dims,
        text_dim: bundle.text_dim,
        k: cfg.k,
        init_std: cfg.init_std,
        seed: cfg.seed.wrapping_add(fold as u64),
    }
}

/// Train and test one fold in memory.
pub fn run_fold(bundle: &FeatureBundle, split: &FoldSplit, cfg: &ExperimentConfig) -> Result<FoldRun> {
    let data = FoldData::new(bundle, split)?;
    if data.test_queries.is_empty() {
        return Err(Error::config("fold has no test queries"));
    }
    let init = Model::new(model_config(bundle, cfg, split.fold))?;
    let untrained_lists = rank_and_judge(&init, &data.test_queries, &data.test_db, cfg.beta, cfg.exclude_self)?;
    let untrained = evaluate_lists(&untrained_lists, &cfg.cutoffs)?;

    let mut tc = cfg.train_config();
    tc.seed = cfg.seed.wrapping_add(split.fold as u64);
    let outcome = trainer::train(init, &data, &tc)?;
    let ranked = rank_and_judge(&outcome.model, &data.test_queries, &data.test_db, cfg.beta, cfg.exclude_self)?;
    let trained = evaluate_lists(&ranked, &cfg.cutoffs)?;
    let report = FoldReport {
        fold: split.fold,
        test_queries: data.test_queries.len(),
        database_size: data.test_db.len(),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
        best_val_map: outcome.best_val_map,
        trained,
        untrained,
    };
    Ok(FoldRun {
        split: split.clone(),
        outcome,
        ranked,
        report,
    })
}

/// All folds in memory. Fold failures carry their index.
pub fn run_folds(bundle: &FeatureBundle, cfg: &ExperimentConfig) -> Result<(Vec<FoldRun>, ExperimentReport)> {
    cfg.validate_settings()?;
    let splits = make_folds(bundle, cfg)?;
    let one = |s: &FoldSplit| {
        run_fold(bundle, s, cfg).map_err(|e| Error::Fold {
            fold: s.fold,
            source: Box::new(e),
        })
    };
    let runs: Vec<FoldRun> = if cfg.parallel_folds {
        splits.par_iter().map(one).collect::<Result<_>>()?
    } else {
        splits.iter().map(one).collect::<Result<_>>()?
    };
    let folds: Vec<FoldReport> = runs.iter().map(|r| r.report.clone()).collect();
    let report = ExperimentReport {
        trained: aggregate(&folds.iter().map(|f| &f.trained).collect::<Vec<_>>(), &cfg.cutoffs)?,
        untrained: aggregate(&folds.iter().map(|f| &f.untrained).collect::<Vec<_>>(), &cfg.cutoffs)?,
        folds,
    };
    Ok((runs, report))
}

/// Enough to reproduce a run: the settings, their hash, the seed, input
/// file digests and the format versions in effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub formats: BTreeMap<String, u32>,
    pub tool_version: String,
    pub config: serde_json::Value,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn format_versions() -> BTreeMap<String, u32> {
    BTreeMap::from([
        ("bundle".to_string(), BUNDLE_VERSION),
        ("checkpoint".to_string(), CHECKPOINT_VERSION),
        ("ranked_list".to_string(), RANKED_LIST_VERSION),
        ("report".to_string(), REPORT_VERSION),
    ])
}

impl Manifest {
    /// `inputs` are hashed as they are now.
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>, inputs: &[&Path]) -> Result<Self> {
        let config = serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?;
        let canonical = serde_json::to_vec(&config).map_err(|e| Error::Format(e.to_string()))?;
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            command: command.to_string(),
            config_hash: hex::encode(Sha256::digest(&canonical)),
            seed,
            inputs,
            formats: format_versions(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
        })
    }
}

pub fn manifest(command: &str, cfg: &ExperimentConfig) -> Result<Manifest> {
    let inputs: Vec<&Path> = if cfg.bundle.is_file() { vec![cfg.bundle.as_path()] } else { vec![] };
    let m = Manifest::new(command, cfg, Some(cfg.seed), &inputs)?;
    debug_assert_eq!(m.config_hash, cfg.hash());
    Ok(m)
}

pub fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn pm(s: Summary) -> String {
    format!("{:.4} ± {:.4}", s.mean, s.std)
}

/// Human-readable table: one row per fold, then mean ± sample std.
pub fn report_table(report: &ExperimentReport, cutoffs: &[usize]) -> String {
    let mut t = String::new();
    let _ = write!(t, "{:<6}{:>10}", "fold", "mAP");
    for k in cutoffs {
        let _ = write!(t, "{:>10}", format!("Acc@{k}"));
    }
    let _ = writeln!(t, "{:>14}{:>8}", "untrained mAP", "epochs");
    for f in &report.folds {
        let _ = write!(t, "{:<6}{:>10.4}", f.fold, f.trained.map);
        for &k in cutoffs {
            let _ = write!(t, "{:>10.4}", f.trained.accuracy_at(k).unwrap_or(f64::NAN));
        }
        let _ = writeln!(t, "{:>14.4}{:>8}", f.untrained.map, f.epochs_run);
    }
    let _ = writeln!(t);
    let _ = writeln!(t, "trained   mAP {}", pm(report.trained.map));
    for a in &report.trained.accuracy {
        let _ = writeln!(t, "trained   Acc@{} {}", a.k, pm(a.summary));
    }
    let _ = writeln!(t, "untrained mAP {}", pm(report.untrained.map));
    for a in &report.untrained.accuracy {
        let _ = writeln!(t, "untrained Acc@{} {}", a.k, pm(a.summary));
    }
    t
}

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold{fold}"))
}

/// Write one fold's log, ranked lists and checkpoint.
pub fn write_fold(out: &Path, run: &FoldRun) -> Result<()> {
    let dir = fold_dir(out, run.split.fold);
    fs::create_dir_all(&dir)?;
    write_training_log(dir.join("train_log.jsonl"), &run.outcome.log)?;
    write_ranked_lists(dir.join("ranked.tsv"), &run.ranked)?;
    save_checkpoint(&run.outcome.model, dir.join("model.cirm"))?;
    write_json(dir.join("split.json"), &run.split)?;
    Ok(())
}

pub fn write_report(out: &Path, report: &ExperimentReport, cutoffs: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(out.join("report.jsonl"))?);
    let line = |w: &mut BufWriter<fs::File>, v: serde_json::Value| -> Result<()> {
        serde_json::to_writer(&mut *w, &v).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    };
    for f in &report.folds {
        let mut v = serde_json::to_value(f).map_err(|e| Error::Format(e.to_string()))?;
        v["record"] = "fold".into();
        line(&mut w, v)?;
    }
    line(
        &mut w,
        serde_json::json!({
            "record": "aggregate",
            "trained": report.trained,
            "untrained": report.untrained,
        }),
    )?;
    w.flush()?;
    fs::write(out.join("report.txt"), report_table(report, cutoffs))?;
    Ok(())
}

/// Load the bundle, run every fold and write all artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let bundle = load_bundle(&cfg.bundle)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(cfg.output_dir.join("manifest.json"), &manifest("cv", cfg)?)?;
    let (runs, report) = run_folds(&bundle, cfg)?;
    for r in &runs {
        write_fold(&cfg.output_dir, r)?;
    }
    write_report(&cfg.output_dir, &report, &cfg.cutoffs)?;
    Ok(report)
}

/// Train and test a single fold, writing its artifacts under
/// `output_dir/fold{fold}`.
pub fn run_training(cfg: &ExperimentConfig, fold: usize) -> Result<FoldReport> {
    cfg.validate()?;
    if fold >= cfg.folds {
        return Err(Error::config(format!("fold {fold} out of range 0..{}", cfg.folds)));
    }
    let bundle = load_bundle(&cfg.bundle)?;
    let splits = make_folds(&bundle, cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(cfg.output_dir.join("manifest.json"), &manifest("train", cfg)?)?;
    let run = run_fold(&bundle, &splits[fold], cfg).map_err(|e| Error::Fold {
        fold,
        source: Box::new(e),
    })?;
    write_fold(&cfg.output_dir, &run)?;
    write_json(fold_dir(&cfg.output_dir, fold).join("report.json"), &run.report)?;
    Ok(run.report)
}

/// Rank every query, or the named ones, against the whole bundle database.
pub fn rank_bundle(
    model: &Model,
    bundle: &FeatureBundle,
    query_ids: &[String],
    w: FusionWeight,
    exclude_self: bool,
    top: Option<usize>,
) -> Result<Vec<JudgedList>> {
    let queries: Vec<&QueryRecord> = if query_ids.is_empty() {
        bundle.queries.iter().collect()
    } else {
        query_ids
            .iter()
            .map(|id| bundle.query(id).ok_or_else(|| Error::arg(format!("no query with id {id:?}"))))
            .collect::<Result<_>>()?
    };
    let db = bundle.database()?;
    let mut lists = rank_and_judge(model, &queries, &db, w, exclude_self)?;
    if let Some(k) = top {
        for j in &mut lists {
            j.list = retrieval::top_k(&j.list, k)?;
        }
    }
    Ok(lists)
}

/// Scores for one pair under several fusion weights; used to check that
/// the score is affine in β.
pub fn scores_at(entry: &RankedEntry, betas: &[f64]) -> Result<Vec<f64>> {
    betas
        .iter()
        .map(|&b| {
            let w = FusionWeight::new(b)?;
            Ok(crate::alignment::fuse(entry.scores.local, entry.scores.global, w))
        })
        .collect()
}
