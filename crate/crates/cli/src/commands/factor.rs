//! `decompose`, `fit`, `expand` and `filter`.

use std::path::PathBuf;

use clap::{ArgGroup, Args};
use npeff::coeff::{expand_components, fit_coefficients, ExpansionConfig, FitConfig};
use npeff::diag::{decompose_diag, NmfConfig};
use npeff::lrm::{decompose_observed, FactorizerConfig};
use npeff::pef::prune_columns;
use npeff::{Decomposition, LossRecord, NpeffError, PefKind};
use serde::Serialize;
use serde_json::json;

use crate::instance::{read_decomposition, read_pefs, write_decomposition, write_json, write_pefs};
use crate::settings::Settings;
use crate::{CliError, ParallelArgs};

#[derive(Args)]
pub struct DecomposeArgs {
    #[arg(long, value_name = "FILE.npef")]
    input: PathBuf,
    #[arg(long, value_name = "FILE.npfd")]
    out: PathBuf,
    #[arg(long)]
    rank: Option<usize>,
    /// Steps training only the components (LRM).
    #[arg(long)]
    warmup_steps: Option<usize>,
    /// Joint steps (LRM) or NMF steps (diag).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup_lr: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Columns with fewer non-zero entries than this are pruned.
    #[arg(long)]
    min_support: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    parallel: ParallelArgs,
    /// Loss logging (and checkpoint) interval in steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Write the coefficient matrix at every logged step as JSON (LRM).
    #[arg(long, value_name = "FILE.json")]
    checkpoints: Option<PathBuf>,
}

#[derive(Serialize)]
struct Checkpoint {
    step: usize,
    w: Vec<Vec<f64>>,
}

fn rows(w: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    w.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn decompose(args: &DecomposeArgs, settings: &Settings) -> Result<(), CliError> {
    let set = read_pefs(&args.input)?;
    let rank = settings.require(args.rank, "rank")?;
    let seed = settings.pick(args.seed, "seed", 0)?;
    let (workers, deterministic) = args.parallel.resolve(settings)?;
    let log_every = settings.pick(args.checkpoint_every, "checkpoint_every", 50)?;
    let min_support = settings.pick(args.min_support, "min_support", 2)?;
    let (reduced, map) = prune_columns(&set, min_support)?;

    let dec = match set.kind() {
        PefKind::Lrm => {
            let mut config = FactorizerConfig::new(rank);
            config.warmup_steps = settings.pick(args.warmup_steps, "warmup_steps", config.warmup_steps)?;
            config.joint_steps = settings.pick(args.steps, "steps", config.joint_steps)?;
            config.warmup_lr = settings.pick(args.warmup_lr, "warmup_lr", config.warmup_lr)?;
            config.joint_lr = settings.pick(args.lr, "lr", config.joint_lr)?;
            config.seed = seed;
            config.workers = workers;
            config.deterministic_reduction = deterministic;
            config.log_every = log_every;
            let mut checkpoints = Vec::new();
            let dec = decompose_observed(&reduced, &map, &config, |step, w| {
                if args.checkpoints.is_some() {
                    checkpoints.push(Checkpoint { step, w: rows(w) });
                }
            })?;
            if let Some(path) = &args.checkpoints {
                checkpoints.push(Checkpoint {
                    step: config.warmup_steps + config.joint_steps,
                    w: rows(&dec.w),
                });
                write_json(&checkpoints, path)?;
            }
            dec
        }
        PefKind::Diag => {
            if args.checkpoints.is_some() {
                return Err(CliError::Usage(
                    "--checkpoints is only supported for LRM decompositions".into(),
                ));
            }
            let mut config = NmfConfig::new(rank);
            config.steps = settings.pick(args.steps, "steps", config.steps)?;
            config.seed = seed;
            config.workers = workers;
            config.deterministic_reduction = deterministic;
            config.log_every = log_every;
            decompose_diag(&reduced, &map, &config)?
        }
    };
    write_decomposition(&dec, &args.out)
}

#[derive(Args)]
pub struct FitArgs {
    #[arg(long, value_name = "FILE.npef")]
    input: PathBuf,
    /// Decomposition whose components are kept fixed.
    #[arg(long, value_name = "FILE.npfd")]
    decomposition: PathBuf,
    #[arg(long, value_name = "FILE.npfd")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    parallel: ParallelArgs,
}

/// JSON of a config with `workers` dropped when it cannot affect the result.
fn snapshot<T: Serialize>(config: &T, deterministic: bool) -> Result<serde_json::Value, CliError> {
    let mut value = serde_json::to_value(config)?;
    if deterministic {
        if let Some(map) = value.as_object_mut() {
            map.remove("workers");
        }
    }
    Ok(value)
}

pub fn fit(args: &FitArgs, settings: &Settings) -> Result<(), CliError> {
    let set = read_pefs(&args.input)?;
    let base = read_decomposition(&args.decomposition)?;
    let (workers, deterministic) = args.parallel.resolve(settings)?;
    let defaults = FitConfig::default();
    let config = FitConfig {
        steps: settings.pick(args.steps, "steps", defaults.steps)?,
        seed: settings.pick(args.seed, "seed", defaults.seed)?,
        workers,
        deterministic_reduction: deterministic,
        ..defaults
    };
    let fit = fit_coefficients(&set, &base, &config)?;
    let mut dec = Decomposition::new(base.kind, fit.w, base.components.clone(), base.index_map.clone())?;
    dec.loss_history = fit
        .losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRecord { step, loss })
        .collect();
    dec.example_ids = set.example_ids();
    dec.frozen_components = base.rank();
    dec.config = json!({ "fit": snapshot(&config, deterministic)?, "base": base.config });
    write_decomposition(&dec, &args.out)
}

#[derive(Args)]
pub struct ExpandArgs {
    /// PEFs of the examples the new components should specialize to.
    #[arg(long, value_name = "FILE.npef")]
    input: PathBuf,
    #[arg(long, value_name = "FILE.npfd")]
    base: PathBuf,
    #[arg(long, value_name = "FILE.npfd")]
    out: PathBuf,
    #[arg(long)]
    new_components: Option<usize>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_steps: Option<usize>,
    /// Steps of the final stage that also updates the base coefficients.
    #[arg(long)]
    stage3: Option<usize>,
    /// Coefficient-fitting steps for examples unknown to the base.
    #[arg(long)]
    fit_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    parallel: ParallelArgs,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

pub fn expand(args: &ExpandArgs, settings: &Settings) -> Result<(), CliError> {
    let set = read_pefs(&args.input)?;
    let base = read_decomposition(&args.base)?;
    let r_new = settings.require(args.new_components, "new_components")?;
    let (workers, deterministic) = args.parallel.resolve(settings)?;
    let d = ExpansionConfig::default();
    let config = ExpansionConfig {
        stage1_steps: settings.pick(args.stage1_steps, "stage1_steps", d.stage1_steps)?,
        stage2_steps: settings.pick(args.stage2_steps, "stage2_steps", d.stage2_steps)?,
        stage3_steps: settings.pick(args.stage3, "stage3", d.stage3_steps)?,
        fit_steps: settings.pick(args.fit_steps, "fit_steps", d.fit_steps)?,
        seed: settings.pick(args.seed, "seed", d.seed)?,
        log_every: settings.pick(args.checkpoint_every, "checkpoint_every", d.log_every)?,
        workers,
        deterministic_reduction: deterministic,
        ..d
    };
    let dec = expand_components(&set, &base, r_new, &config)?;
    write_decomposition(&dec, &args.out)
}

#[derive(Args)]
#[command(group(ArgGroup::new("selector").required(true).args(["labels", "ids"])))]
pub struct FilterArgs {
    #[arg(long, value_name = "FILE.npef")]
    input: PathBuf,
    #[arg(long, value_name = "FILE.npef")]
    out: PathBuf,
    /// Keep examples whose label is in this list.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    labels: Option<Vec<i64>>,
    /// Keep examples with these ids.
    #[arg(long, value_delimiter = ',')]
    ids: Option<Vec<u64>>,
}

pub fn filter(args: &FilterArgs, _settings: &Settings) -> Result<(), CliError> {
    let set = read_pefs(&args.input)?;
    let positions: Vec<usize> = if let Some(wanted) = &args.labels {
        let labels = set
            .labels()
            .ok_or_else(|| NpeffError::Domain(format!("{} carries no labels", args.input.display())))?;
        (0..set.len()).filter(|&i| wanted.contains(&labels[i])).collect()
    } else {
        let wanted = args.ids.as_deref().unwrap_or_default();
        let ids = set.example_ids();
        (0..set.len()).filter(|&i| wanted.contains(&ids[i])).collect()
    };
    write_pefs(&set.select(&positions)?, &args.out)
}
