//! `atomfuse` — command-line front end for the evaluation/fusion toolkit.
//!
//! One subcommand per pipeline stage: `evaluate`, `fuse`, `optimize-weights`,
//! `plan-sampling`, `score`. Structured results go to files (written
//! atomically); stdout carries a one-line human summary. Exit codes: 0 on
//! success, 1 for input or validation problems (diagnostic on stderr), 2 for
//! usage errors. Every flag can also be supplied through an `ATOMFUSE_*`
//! environment variable.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use atomfuse_core::dataset::{
    align, load_labels, load_scores, load_scores_with_names, write_report, write_scores,
    ScoreMatrix,
};
use atomfuse_core::fusion::{
    fuse, normalize_scores, optimize_weights, write_weights, FusionError, FusionWeights,
    NormalizationMode,
};
use atomfuse_core::metrics::evaluate;
use atomfuse_core::sampling::{plan_fixed, plan_jitter};
use atomfuse_core::slotattn::{load_features, load_model, score_clips, FeatureTensor};
use atomfuse_core::taxonomy::load_taxonomy;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Flag-level mistake: reported on stderr, exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Parser)]
#[command(name = "atomfuse", version, about = "Multi-label activity scoring, fusion and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a score matrix against ground-truth labels
    Evaluate(EvaluateArgs),
    /// Combine several score matrices with fixed simplex weights
    Fuse(FuseArgs),
    /// Search fusion weights that maximize mAP on validation labels
    OptimizeWeights(OptimizeWeightsArgs),
    /// Print the frame indices a sampling plan would select
    PlanSampling(PlanSamplingArgs),
    /// Score feature archives with a slot-attention model
    Score(ScoreArgs),
}

#[derive(Args)]
struct EvaluateArgs {
    /// Score matrix CSV (clips x classes)
    #[arg(long, env = "ATOMFUSE_SCORES")]
    scores: PathBuf,
    /// Ground-truth label CSV; its clip order is authoritative
    #[arg(long, env = "ATOMFUSE_LABELS")]
    labels: PathBuf,
    /// Taxonomy JSON (classes and agent groups)
    #[arg(long, env = "ATOMFUSE_TAXONOMY")]
    taxonomy: PathBuf,
    /// Report JSON output path
    #[arg(long, env = "ATOMFUSE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    /// Score matrix CSVs, one per model (space- or comma-separated)
    #[arg(long, env = "ATOMFUSE_SCORES", num_args = 1.., value_delimiter = ',', required = true)]
    scores: Vec<PathBuf>,
    /// Comma-separated per-model weights; must lie on the probability simplex
    #[arg(long, env = "ATOMFUSE_WEIGHTS", value_delimiter = ',', required = true)]
    weights: Vec<f64>,
    /// Per-class score normalization applied before the weighted sum
    #[arg(long, env = "ATOMFUSE_NORMALIZE", value_enum, default_value = "none")]
    normalize: Normalize,
    /// Fused score matrix output path
    #[arg(long, env = "ATOMFUSE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeWeightsArgs {
    /// Score matrix CSVs, one per model (space- or comma-separated)
    #[arg(long, env = "ATOMFUSE_SCORES", num_args = 1.., value_delimiter = ',', required = true)]
    scores: Vec<PathBuf>,
    /// Validation label CSV
    #[arg(long, env = "ATOMFUSE_LABELS")]
    labels: PathBuf,
    /// Taxonomy JSON
    #[arg(long, env = "ATOMFUSE_TAXONOMY")]
    taxonomy: PathBuf,
    /// Lattice spacing of the simplex grid search, in (0, 1]
    #[arg(long, env = "ATOMFUSE_GRID_STEP", default_value_t = 0.05)]
    grid_step: f64,
    /// Coordinate-refinement rounds after the grid search
    #[arg(long, env = "ATOMFUSE_REFINE", default_value_t = 4)]
    refine: u32,
    /// Weights JSON output path
    #[arg(long, env = "ATOMFUSE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct PlanSamplingArgs {
    /// Number of frames in the source clip
    #[arg(long, env = "ATOMFUSE_SOURCE_LEN")]
    source_len: usize,
    /// Number of frames to select
    #[arg(long, env = "ATOMFUSE_TARGET_LEN", default_value_t = 16)]
    target_len: usize,
    /// Seeded per-segment jitter; omitted = deterministic centers
    #[arg(long, env = "ATOMFUSE_JITTER_SEED")]
    jitter_seed: Option<u64>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Directory of per-clip feature archives (*.atsl); clip id = file stem
    #[arg(long, env = "ATOMFUSE_FEATURES")]
    features: PathBuf,
    /// Slot-attention model archive
    #[arg(long, env = "ATOMFUSE_MODEL")]
    model: PathBuf,
    /// Taxonomy JSON
    #[arg(long, env = "ATOMFUSE_TAXONOMY")]
    taxonomy: PathBuf,
    /// Score matrix CSV output path
    #[arg(long, env = "ATOMFUSE_OUT")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Normalize {
    None,
    Minmax,
    Zscore,
}

impl From<Normalize> for NormalizationMode {
    fn from(mode: Normalize) -> Self {
        match mode {
            Normalize::None => NormalizationMode::None,
            Normalize::Minmax => NormalizationMode::MinMaxPerClass,
            Normalize::Zscore => NormalizationMode::ZScorePerClass,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Evaluate(args) => evaluate_cmd(args),
        Command::Fuse(args) => fuse_cmd(args),
        Command::OptimizeWeights(args) => optimize_weights_cmd(args),
        Command::PlanSampling(args) => plan_sampling_cmd(args),
        Command::Score(args) => score_cmd(args),
    }
}

fn file_stem(path: &Path) -> Result<&str> {
    path.file_stem()
        .and_then(|stem| stem.to_str())
        .ok_or_else(|| anyhow!("cannot derive a model id from path `{}`", path.display()))
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let labels = load_labels(&args.labels, &taxonomy)?;
    let scores = load_scores(&args.scores, &taxonomy, file_stem(&args.scores)?)?;
    let (scores, labels) = align(vec![scores], labels)?;
    let report = evaluate(&scores[0], &labels, &taxonomy)?;
    write_report(&report, &args.out)?;
    println!("mAP {:.4}", report.map);
    Ok(())
}

/// Simplex checks for `--weights`, performed before any file is touched so
/// that a bad flag is a usage error, not an input error.
fn check_weight_flags(weights: &[f64], num_models: usize) -> Result<()> {
    if weights.len() != num_models {
        return Err(usage(format!(
            "--weights lists {} values for {} score files",
            weights.len(),
            num_models
        )));
    }
    for &w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(usage(format!("weight {w} is not a finite non-negative number")));
        }
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(usage(format!("weights must sum to 1, got {sum}")));
    }
    Ok(())
}

fn load_score_set(paths: &[PathBuf]) -> Result<(Vec<ScoreMatrix>, Vec<String>)> {
    let mut matrices = Vec::with_capacity(paths.len());
    let mut class_names: Option<(Vec<String>, &Path)> = None;
    for path in paths {
        let (matrix, names) = load_scores_with_names(path, file_stem(path)?)?;
        match &class_names {
            None => class_names = Some((names, path)),
            Some((first_names, first_path)) => {
                if names != *first_names {
                    bail!(
                        "class columns in `{}` do not match `{}`",
                        path.display(),
                        first_path.display()
                    );
                }
            }
        }
        matrices.push(matrix);
    }
    let (names, _) = class_names.expect("at least one score path is required");
    Ok((matrices, names))
}

fn fuse_cmd(args: FuseArgs) -> Result<()> {
    check_weight_flags(&args.weights, args.scores.len())?;
    let (matrices, class_names) = load_score_set(&args.scores)?;
    let model_ids = matrices.iter().map(|m| m.model_id().to_string()).collect();
    let weights = FusionWeights::new(model_ids, args.weights.clone())
        .map_err(|err| usage(err.to_string()))?;
    let matrices: Vec<ScoreMatrix> = matrices
        .iter()
        .map(|m| normalize_scores(m, args.normalize.into()))
        .collect();
    let fused = fuse(&matrices, &weights)?;
    write_scores(&fused, &class_names, &args.out)?;
    println!("fused {} models over {} clips", matrices.len(), fused.num_clips());
    Ok(())
}

fn optimize_weights_cmd(args: OptimizeWeightsArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let labels = load_labels(&args.labels, &taxonomy)?;
    let mut matrices = Vec::with_capacity(args.scores.len());
    for path in &args.scores {
        matrices.push(load_scores(path, &taxonomy, file_stem(path)?)?);
    }
    let (matrices, labels) = align(matrices, labels)?;
    let (weights, val_map) =
        optimize_weights(&matrices, &labels, &taxonomy, args.grid_step, args.refine).map_err(
            |err| match err {
                FusionError::BadGridStep(_) => usage(err.to_string()),
                other => other.into(),
            },
        )?;
    write_weights(&weights, val_map, &args.out)?;
    println!("mAP {:.4}", val_map);
    Ok(())
}

fn plan_sampling_cmd(args: PlanSamplingArgs) -> Result<()> {
    let plan = match args.jitter_seed {
        Some(seed) => plan_jitter(args.source_len, args.target_len, seed),
        None => plan_fixed(args.source_len, args.target_len),
    }
    .map_err(|err| usage(err.to_string()))?;
    println!("{}", serde_json::to_string(&plan.indices)?);
    Ok(())
}

fn load_feature_dir(dir: &Path) -> Result<Vec<(String, FeatureTensor)>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir)
        .with_context(|| format!("cannot read feature directory `{}`", dir.display()))?
    {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|ext| ext == "atsl") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut clips = Vec::with_capacity(paths.len());
    for path in paths {
        let features = load_features(&path)
            .with_context(|| format!("feature archive `{}`", path.display()))?;
        clips.push((file_stem(&path)?.to_string(), features));
    }
    Ok(clips)
}

fn score_cmd(args: ScoreArgs) -> Result<()> {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let params = load_model(&args.model)?;
    let clips = load_feature_dir(&args.features)?;
    let scores = score_clips(file_stem(&args.model)?, &clips, &params, &taxonomy)?;
    let class_names: Vec<&str> = taxonomy.class_names().collect();
    write_scores(&scores, &class_names, &args.out)?;
    println!("scored {} clips", scores.num_clips());
    Ok(())
}
