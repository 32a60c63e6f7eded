//! `cir`: synthetic data, training, cross-validation, ranking and metrics
//! from the command line.
//!
//! Exit codes: 0 success, 2 configuration or argument error, 3 data or
//! file-format error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cir_core::alignment::FusionWeight;
use cir_core::bundle::{load_bundle, save_bundle};
use cir_core::checkpoint::load_checkpoint;
use cir_core::config::ExperimentConfig;
use cir_core::experiment::{
    self, evaluate_lists, read_ranked_lists, report_table, write_json, write_ranked_lists, Manifest,
};
use cir_core::gradsuite::{run_gradient_suite, GradSuiteConfig};
use cir_core::metrics::{self, RelevanceVector};
use cir_core::synthetic::{generate_quadrant_cue, generate_synthetic, QuadrantSpec, SyntheticSpec};
use cir_core::{Error, LevelDims, Result};

/// Gradient-suite pass threshold on the max relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "cir", version, about = "Composed image+text retrieval harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature bundle.
    Synth(SynthArgs),
    /// Train and test a single cross-validation fold.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Fold index to run.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Run the full k-fold experiment.
    Cv {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Rank bundle queries against the bundle database with a checkpoint.
    Rank(RankArgs),
    /// Recompute mAP and Acc@K from ranked-list files.
    Metrics(MetricsArgs),
    /// Run the gradient-check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    /// Class prototypes tiled over every position.
    Prototype,
    /// Class cue confined to one quadrant with class-free pooled means.
    Quadrant,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "prototype")]
    kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    entries_per_class: usize,
    #[arg(long, default_value_t = 15)]
    queries_per_class: usize,
    /// Per-level dims as `HxWxD,HxWxD,HxWxD` for L, M, H.
    #[arg(long, value_parser = parse_level_dims)]
    dims: Option<LevelDimsArg>,
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Class-specific share of each prototype (prototype kind).
    #[arg(long)]
    separation: Option<f64>,
    /// Cue norm (quadrant kind).
    #[arg(long)]
    cue: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
struct LevelDimsArg([LevelDims; 3]);

fn parse_one_dims(s: &str) -> std::result::Result<LevelDims, String> {
    let parts: Vec<&str> = s.split(['x', '×']).collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad dimension {p:?} in {s:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match nums[..] {
        [h, w, d] if h > 0 && w > 0 && d > 0 => Ok(LevelDims::new(h, w, d)),
        _ => Err(format!("expected positive HxWxD, got {s:?}")),
    }
}

fn parse_level_dims(s: &str) -> std::result::Result<LevelDimsArg, String> {
    let dims = s.split(',').map(parse_one_dims).collect::<std::result::Result<Vec<_>, _>>()?;
    let dims: [LevelDims; 3] = dims.try_into().map_err(|_| "expected three levels".to_string())?;
    Ok(LevelDimsArg(dims))
}

/// Flags mirror the config file; a flag overrides the file.
#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Region masks per level.
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the local term in the fused score.
    #[arg(long)]
    beta: Option<f64>,
    /// Acc@K cutoffs, e.g. `1,2,4`.
    #[arg(long, value_delimiter = ',')]
    cutoffs: Option<Vec<usize>>,
    /// Keep a query's own id among its candidates.
    #[arg(long)]
    include_self: bool,
    #[arg(long)]
    init_std: Option<f64>,
    #[arg(long)]
    parallel_folds: bool,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => {
                let (Some(b), Some(o)) = (&self.bundle, &self.output_dir) else {
                    return Err(Error::Config("--bundle and --output-dir are required without --config".into()));
                };
                ExperimentConfig::new(b, o)
            }
        };
        if let Some(v) = &self.bundle {
            cfg.bundle = v.clone();
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = FusionWeight::new(v)?;
        }
        if let Some(v) = &self.cutoffs {
            cfg.cutoffs = v.clone();
        }
        if self.include_self {
            cfg.exclude_self = false;
        }
        if let Some(v) = self.init_std {
            cfg.init_std = v;
        }
        if self.parallel_folds {
            cfg.parallel_folds = true;
        }
        let t = &mut cfg.train;
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            t.weight_decay = v;
        }
        if let Some(v) = self.max_epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.temperature {
            t.temperature = v;
        }
        if let Some(v) = self.validation_fraction {
            t.validation_fraction = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated query ids; all queries when omitted.
    #[arg(long, value_delimiter = ',')]
    queries: Vec<String>,
    #[arg(long, default_value_t = 0.6)]
    beta: f64,
    /// Keep only the top K candidates per query.
    #[arg(long)]
    top: Option<usize>,
    #[arg(long)]
    include_self: bool,
    /// Ranked-list file to write; a manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Ranked-list files.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    cutoffs: Vec<usize>,
    /// Write the metrics as JSON here, plus a manifest next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per tensor; 0 checks every coordinate.
    #[arg(long, default_value_t = 64)]
    max_coords: usize,
    /// Write the report as JSON here, plus a manifest next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let bundle = match a.kind {
        SynthKind::Prototype => {
            let mut s = SyntheticSpec::reference(a.seed);
            s.classes = a.classes;
            s.entries_per_class = a.entries_per_class;
            s.queries_per_class = a.queries_per_class;
            if let Some(d) = a.dims {
                s.level_dims = d.0;
            }
            s.text_dim = a.text_dim.unwrap_or(s.text_dim);
            s.tokens = a.tokens.unwrap_or(s.tokens);
            s.noise = a.noise.unwrap_or(s.noise);
            s.separation = a.separation.unwrap_or(s.separation);
            generate_synthetic(&s)?
        }
        SynthKind::Quadrant => {
            let mut s = QuadrantSpec::reference(a.seed);
            s.classes = a.classes;
            s.entries_per_class = a.entries_per_class;
            s.queries_per_class = a.queries_per_class;
            if let Some(d) = a.dims {
                s.level_dims = d.0;
            }
            s.text_dim = a.text_dim.unwrap_or(s.text_dim);
            s.tokens = a.tokens.unwrap_or(s.tokens);
            s.noise = a.noise.unwrap_or(s.noise);
            s.cue = a.cue.unwrap_or(s.cue);
            generate_quadrant_cue(&s)?
        }
    };
    save_bundle(&bundle, &a.out)?;
    let m = Manifest::new("synth", &bundle.provenance, Some(a.seed), &[])?;
    write_json(manifest_path(&a.out), &m)?;
    println!(
        "wrote {} ({} entries, {} queries)",
        a.out.display(),
        bundle.entries.len(),
        bundle.queries.len()
    );
    Ok(())
}

fn rank(a: &RankArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let w = FusionWeight::new(a.beta)?;
    let lists = experiment::rank_bundle(&model, &bundle, &a.queries, w, !a.include_self, a.top)?;
    write_ranked_lists(&a.out, &lists)?;
    let cfg = json!({
        "queries": a.queries,
        "beta": a.beta,
        "top": a.top,
        "exclude_self": !a.include_self,
    });
    let m = Manifest::new("rank", &cfg, None, &[a.bundle.as_path(), a.checkpoint.as_path()])?;
    write_json(manifest_path(&a.out), &m)?;
    let report = evaluate_lists(&lists, &[1]);
    match report {
        Ok(r) => println!("ranked {} queries; mAP {:.4}", lists.len(), r.map),
        Err(_) => println!("ranked {} queries", lists.len()),
    }
    Ok(())
}

fn metrics_cmd(a: &MetricsArgs) -> Result<()> {
    if a.cutoffs.is_empty() || a.cutoffs[0] == 0 || a.cutoffs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("cutoffs must be positive and strictly ascending".into()));
    }
    let mut rels: Vec<RelevanceVector> = Vec::new();
    for f in &a.files {
        rels.extend(read_ranked_lists(f)?.into_iter().map(|(_, r)| r));
    }
    let report = metrics::evaluate(&rels, &a.cutoffs)?;
    println!("queries {} (skipped {})", report.queries, report.skipped);
    println!("mAP     {:.4}", report.map);
    for acc in &report.accuracy {
        println!("Acc@{:<4}{:.4}", acc.k, acc.value);
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        let inputs: Vec<&Path> = a.files.iter().map(PathBuf::as_path).collect();
        let m = Manifest::new("metrics", &json!({ "cutoffs": a.cutoffs }), None, &inputs)?;
        write_json(manifest_path(out), &m)?;
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = GradSuiteConfig {
        seed: a.seed,
        max_coords_per_tensor: (a.max_coords > 0).then_some(a.max_coords),
        ..GradSuiteConfig::default()
    };
    let report = run_gradient_suite(&cfg)?;
    for c in &report.cases {
        println!(
            "{:<12} max rel error {:.3e}  coords {:>6}  {:>8.2?}",
            c.name, c.report.max_rel_error, c.report.coords_checked, c.elapsed
        );
    }
    let worst = report.max_rel_error();
    println!("overall max rel error {worst:.3e} in {:.2?}", report.elapsed);
    if let Some(out) = &a.out {
        let cases: Vec<_> = report
            .cases
            .iter()
            .map(|c| {
                json!({
                    "name": c.name,
                    "max_rel_error": c.report.max_rel_error,
                    "coords_checked": c.report.coords_checked,
                    "seconds": c.elapsed.as_secs_f64(),
                })
            })
            .collect();
        write_json(out, &json!({ "cases": cases, "max_rel_error": worst }))?;
        write_json(manifest_path(out), &Manifest::new("gradcheck", &cfg, Some(a.seed), &[])?)?;
    }
    if !(worst < GRADCHECK_TOLERANCE) {
        return Err(Error::Numeric(format!(
            "max relative error {worst:.3e} is not below {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train { exp, fold } => {
            let cfg = exp.resolve()?;
            let r = experiment::run_training(&cfg, fold)?;
            println!(
                "fold {fold}: mAP {:.4} (untrained {:.4}), best epoch {} of {}",
                r.trained.map, r.untrained.map, r.best_epoch, r.epochs_run
            );
            Ok(())
        }
        Command::Cv { exp } => {
            let cfg = exp.resolve()?;
            let report = experiment::run_experiment(&cfg)?;
            print!("{}", report_table(&report, &cfg.cutoffs));
            Ok(())
        }
        Command::Rank(a) => rank(&a),
        Command::Metrics(a) => metrics_cmd(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dims_and_cutoffs() {
        let d = parse_level_dims("8x8x16,4×4×32,2x2x64").unwrap();
        assert_eq!(d.0[1], LevelDims::new(4, 4, 32));
        assert!(parse_level_dims("8x8x16,4x4x32").is_err());
        assert!(parse_level_dims("8x0x16,4x4x32,2x2x64").is_err());
        let cli = Cli::try_parse_from(["cir", "metrics", "a.tsv", "--cutoffs", "1,5"]).unwrap();
        match cli.command {
            Command::Metrics(m) => assert_eq!(m.cutoffs, vec![1, 5]),
            _ => unreachable!(),
        }
        assert!(Cli::try_parse_from(["cir", "metrics", "a.tsv", "--cutoffs", "1,a"]).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
