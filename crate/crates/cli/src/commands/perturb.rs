//! `perturb`: turn one component into a parameter perturbation and, given the
//! model, measure how selectively it changes predictions.

use std::path::PathBuf;

use clap::Args;
use npeff::eval::{per_example_kl, ratio_of_means, sample_background, top_examples, DEFAULT_BACKGROUND, DEFAULT_TOP_N};
use npeff::perturb::{
    apply_delta, build_lrm_perturbation, fwpa_perturb, search_fwpa_hparams, selectivity_scores,
    sign_pattern, FwpaPlan, FwpaSearchConfig, Sign, DEFAULT_COS_THRESHOLD, DEFAULT_NORM,
    DEFAULT_PROBE_SCALE, DEFAULT_ZERO_GUARD,
};
use npeff::sandbox::{compute_diag_pef, SandboxModel};
use npeff::{Decomposition, NpeffError, PefKind};
use serde::Serialize;

use crate::instance::{check_alignment, read_decomposition, read_pefs, write_json, Instance};
use crate::settings::Settings;
use crate::CliError;

#[derive(Args)]
pub struct PerturbArgs {
    #[arg(long, value_name = "FILE.npfd")]
    decomposition: PathBuf,
    #[arg(long)]
    component: usize,
    /// Model and inputs written by `gen-pefs --instance-out`.
    #[arg(long, value_name = "FILE.json")]
    instance: Option<PathBuf>,
    /// PEFs whose examples are the decomposition's rows.
    #[arg(long, value_name = "FILE.npef")]
    pefs: Option<PathBuf>,
    /// Length of an LRM perturbation.
    #[arg(long)]
    norm: Option<f64>,
    /// Components with |cos| below this are projected out (LRM).
    #[arg(long)]
    cos_threshold: Option<f64>,
    /// Target mean KL on the top examples, `low,high` (diag).
    #[arg(long, value_delimiter = ',')]
    kl_range: Option<Vec<f64>>,
    /// Upper bound of the step size search (diag).
    #[arg(long)]
    delta_max: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    background: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; stdout when omitted.
    #[arg(long, value_name = "FILE.json")]
    out: Option<PathBuf>,
}

/// KL summary for one signed application of a perturbation.
#[derive(Debug, Serialize)]
pub struct KlStats {
    pub sign: &'static str,
    pub top_mean_kl: f64,
    pub background_mean_kl: f64,
    pub kl_ratio: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Report {
    Lrm {
        component: usize,
        norm: f64,
        cos_threshold: f64,
        rejected: Vec<usize>,
        selectivity: Vec<f64>,
        delta: Vec<f64>,
        kl: Vec<KlStats>,
        best_sign: Option<&'static str>,
    },
    Diag {
        component: usize,
        delta: f64,
        lambda: f64,
        top_mean_kl: f64,
        converged: bool,
        evaluations: usize,
        kl: KlStats,
        theta: Vec<f64>,
    },
}

/// The model together with the input of every decomposition row.
pub struct Rows {
    pub model: SandboxModel,
    pub inputs: Vec<Vec<f64>>,
}

pub fn load_rows(instance: &PathBuf, pefs: Option<&PathBuf>, dec: &Decomposition) -> Result<Rows, CliError> {
    let inst = Instance::load(instance)?;
    let ids = match pefs {
        Some(path) => {
            let set = read_pefs(path)?;
            check_alignment(dec, &set)?;
            set.example_ids()
        }
        None if !dec.example_ids.is_empty() => dec.example_ids.clone(),
        None => (0..dec.n() as u64).collect(),
    };
    let inputs = inst.inputs_for(&ids)?;
    Ok(Rows {
        model: inst.model,
        inputs,
    })
}

/// Mean KL on `top` and on `background` for the perturbed model.
pub fn kl_stats(
    rows: &Rows,
    perturbed: &SandboxModel,
    top: &[usize],
    background: &[usize],
    sign: Sign,
) -> Result<KlStats, CliError> {
    let kls = per_example_kl(&rows.model, perturbed, &rows.inputs)?;
    let mean = |idx: &[usize]| idx.iter().map(|&i| kls[i]).sum::<f64>() / idx.len().max(1) as f64;
    Ok(KlStats {
        sign: sign_name(sign),
        top_mean_kl: mean(top),
        background_mean_kl: mean(background),
        kl_ratio: ratio_of_means(&kls, top, background)?,
    })
}

pub fn sign_name(sign: Sign) -> &'static str {
    match sign {
        Sign::Plus => "+",
        Sign::Minus => "-",
    }
}

pub fn run(args: &PerturbArgs, settings: &Settings) -> Result<(), CliError> {
    let dec = read_decomposition(&args.decomposition)?;
    let j = args.component;
    let top_n = settings.pick(args.top_n, "top_n", DEFAULT_TOP_N)?;
    let bg_count = settings.pick(args.background, "background", DEFAULT_BACKGROUND)?;
    let seed = settings.pick(args.seed, "seed", 0)?;
    let rows = match &args.instance {
        Some(path) => Some(load_rows(path, args.pefs.as_ref(), &dec)?),
        None => None,
    };
    let background = sample_background(dec.n(), bg_count, seed);

    let report = match dec.kind {
        PefKind::Lrm => {
            let norm = settings.pick(args.norm, "norm", DEFAULT_NORM)?;
            let cos_threshold = settings.pick(args.cos_threshold, "cos_threshold", DEFAULT_COS_THRESHOLD)?;
            let p = build_lrm_perturbation(&dec.components, &dec.index_map, j, cos_threshold, norm)?;
            let selectivity = selectivity_scores(&dec.components, &p.reduced)?;
            let mut kl = Vec::new();
            if let Some(rows) = &rows {
                let top = top_examples(&dec.w, j, top_n)?;
                for sign in [Sign::Plus, Sign::Minus] {
                    let perturbed = apply_delta(&rows.model, &p.delta, sign)?;
                    kl.push(kl_stats(rows, &perturbed, &top, &background, sign)?);
                }
            }
            let best_sign = kl
                .iter()
                .max_by(|a, b| a.kl_ratio.total_cmp(&b.kl_ratio))
                .map(|s| s.sign);
            Report::Lrm {
                component: j,
                norm,
                cos_threshold,
                rejected: p.rejected,
                selectivity,
                delta: p.delta,
                kl,
                best_sign,
            }
        }
        PefKind::Diag => {
            let rows = rows.ok_or_else(|| {
                CliError::Usage("diagonal perturbations need --instance to search the step size".into())
            })?;
            let d = FwpaSearchConfig::default();
            let (kl_low, kl_high) = match args.kl_range.as_deref() {
                Some(&[lo, hi]) => (lo, hi),
                Some(_) => return Err(CliError::Usage("--kl-range takes two values, `low,high`".into())),
                None => settings.pick(None, "kl_range", (d.kl_low, d.kl_high))?,
            };
            let config = FwpaSearchConfig {
                kl_low,
                kl_high,
                delta_max: settings.pick(args.delta_max, "delta_max", d.delta_max)?,
                max_iters: settings.pick(args.max_iters, "max_iters", d.max_iters)?,
                seed,
            };
            let component_fisher = dec.component_full(j)?;
            let model_fisher = mean_diag_fisher(&rows)?;
            let top = top_examples(&dec.w, j, top_n)?;
            let top_inputs: Vec<Vec<f64>> = top.iter().map(|&i| rows.inputs[i].clone()).collect();
            let signs = sign_pattern(&rows.model, &top_inputs, &component_fisher, DEFAULT_PROBE_SCALE, seed)?;
            let outcome = search_fwpa_hparams(
                &rows.model,
                &model_fisher,
                &component_fisher,
                &signs,
                &top_inputs,
                &config,
            )?;
            let plan = FwpaPlan {
                delta_mag: outcome.delta,
                lambda: outcome.lambda,
                sign_pattern: signs,
                component_fisher,
                model_fisher,
                zero_guard: DEFAULT_ZERO_GUARD,
            };
            let theta = fwpa_perturb(rows.model.theta(), &plan)?;
            let perturbed = rows.model.with_theta(theta.clone())?;
            let kl = kl_stats(&rows, &perturbed, &top, &background, Sign::Plus)?;
            Report::Diag {
                component: j,
                delta: outcome.delta,
                lambda: outcome.lambda,
                top_mean_kl: outcome.kl,
                converged: outcome.converged,
                evaluations: outcome.evaluations,
                kl,
                theta,
            }
        }
    };

    match &args.out {
        Some(path) => write_json(&report, path),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

/// Mean diagonal Fisher of the model over the decomposition's inputs.
fn mean_diag_fisher(rows: &Rows) -> Result<Vec<f64>, CliError> {
    if rows.inputs.is_empty() {
        return Err(NpeffError::EmptyProblem("no inputs to estimate the model fisher".into()).into());
    }
    let mut total = vec![0.0; rows.model.num_params()];
    for x in &rows.inputs {
        for (t, f) in total.iter_mut().zip(compute_diag_pef(&rows.model, x, 0.0)?) {
            *t += f;
        }
    }
    let n = rows.inputs.len() as f64;
    Ok(total.into_iter().map(|t| t / n).collect())
}
