//! `evaluate`: per-component purity, PEF-norm ratio, KL ratio and coefficient
//! cosine comparisons, as CSV or JSON.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ndarray::Array2;
use npeff::eval::{
    avg_max_cosine, convergence_trace, max_cosines, pef_norm_ratio, sample_background,
    top_examples, tuning_purity, DEFAULT_BACKGROUND, DEFAULT_TOP_N,
};
use npeff::perturb::{apply_delta, build_lrm_perturbation, Sign, DEFAULT_COS_THRESHOLD, DEFAULT_NORM};
use npeff::{NpeffError, PefKind};
use serde::{Deserialize, Serialize};

use super::perturb::{kl_stats, load_rows};
use crate::instance::{check_alignment, read_decomposition, read_pefs, write_json};
use crate::settings::Settings;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE.npfd")]
    decomposition: PathBuf,
    /// PEFs whose examples are the decomposition's rows.
    #[arg(long, value_name = "FILE.npef")]
    pefs: PathBuf,
    /// Model and inputs; enables the KL ratio for LRM components.
    #[arg(long, value_name = "FILE.json")]
    instance: Option<PathBuf>,
    /// Second decomposition over the same examples to compare coefficients with.
    #[arg(long, value_name = "FILE.npfd")]
    compare: Option<PathBuf>,
    /// Checkpoints written by `decompose --checkpoints` (JSON output only).
    #[arg(long, value_name = "FILE.json")]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    background: Option<usize>,
    #[arg(long)]
    norm: Option<f64>,
    #[arg(long)]
    cos_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ComponentRow {
    component: usize,
    modal_label: Option<i64>,
    purity: Option<f64>,
    tuned: Option<bool>,
    norm_ratio: f64,
    kl_ratio: Option<f64>,
    kl_sign: Option<&'static str>,
    max_cosine: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    components: Vec<ComponentRow>,
    avg_max_cosine: Option<f64>,
    convergence: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct Checkpoint {
    w: Vec<Vec<f64>>,
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>, CliError> {
    let ncols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.concat();
    Array2::from_shape_vec((rows.len(), ncols), flat)
        .map_err(|e| NpeffError::Domain(format!("ragged checkpoint matrix: {e}")).into())
}

pub fn run(args: &EvaluateArgs, settings: &Settings) -> Result<(), CliError> {
    let dec = read_decomposition(&args.decomposition)?;
    let set = read_pefs(&args.pefs)?;
    check_alignment(&dec, &set)?;
    let top_n = settings.pick(args.top_n, "top_n", DEFAULT_TOP_N)?;
    let bg_count = settings.pick(args.background, "background", DEFAULT_BACKGROUND)?;
    let seed = settings.pick(args.seed, "seed", 0)?;
    let format = settings.pick(args.format, "format", Format::Csv)?;
    if format == Format::Csv && args.checkpoints.is_some() {
        return Err(CliError::Usage("the convergence trace is only reported with --format json".into()));
    }
    let background = sample_background(dec.n(), bg_count, seed);

    let purity = match set.labels() {
        Some(labels) => Some(tuning_purity(&dec.w, labels, top_n)?),
        None => None,
    };
    let other = match &args.compare {
        Some(path) => Some(read_decomposition(path)?.w),
        None => None,
    };
    let max_cos = match &other {
        Some(w) => Some(max_cosines(&dec.w, w)?),
        None => None,
    };

    let kl = match (&args.instance, dec.kind) {
        (Some(path), PefKind::Lrm) => {
            let rows = load_rows(path, Some(&args.pefs), &dec)?;
            let norm = settings.pick(args.norm, "norm", DEFAULT_NORM)?;
            let cos = settings.pick(args.cos_threshold, "cos_threshold", DEFAULT_COS_THRESHOLD)?;
            let mut out = Vec::with_capacity(dec.rank());
            for j in 0..dec.rank() {
                let p = match build_lrm_perturbation(&dec.components, &dec.index_map, j, cos, norm) {
                    Ok(p) => p,
                    Err(NpeffError::DegenerateDirection { .. }) => {
                        out.push(None);
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                let top = top_examples(&dec.w, j, top_n)?;
                let mut best = None::<(f64, &'static str)>;
                for sign in [Sign::Plus, Sign::Minus] {
                    let perturbed = apply_delta(&rows.model, &p.delta, sign)?;
                    let stats = kl_stats(&rows, &perturbed, &top, &background, sign)?;
                    if best.is_none_or(|(r, _)| stats.kl_ratio > r) {
                        best = Some((stats.kl_ratio, stats.sign));
                    }
                }
                out.push(best);
            }
            Some(out)
        }
        (Some(_), PefKind::Diag) => {
            return Err(CliError::Usage(
                "KL ratios for diagonal decompositions need a step-size search; use `perturb`".into(),
            ))
        }
        (None, _) => None,
    };

    let components = (0..dec.rank())
        .map(|j| {
            let p = purity.as_ref().map(|p| &p[j]);
            let k = kl.as_ref().and_then(|k| k[j]);
            Ok(ComponentRow {
                component: j,
                modal_label: p.map(|p| p.modal_label),
                purity: p.map(|p| p.purity),
                tuned: p.map(|p| p.tuned),
                norm_ratio: pef_norm_ratio(&set, &dec.w, j, top_n, &background)?,
                kl_ratio: k.map(|k| k.0),
                kl_sign: k.map(|k| k.1),
                max_cosine: max_cos.as_ref().map(|c| c[j]),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    match format {
        Format::Csv => {
            let mut buf = csv::Writer::from_writer(Vec::new());
            for row in &components {
                buf.serialize(row)?;
            }
            let bytes = buf.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))?;
            emit(&bytes, args.out.as_deref())
        }
        Format::Json => {
            let convergence = match &args.checkpoints {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                    let cps: Vec<Checkpoint> = serde_json::from_str(&text)?;
                    let mats = cps.iter().map(|c| to_matrix(&c.w)).collect::<Result<Vec<_>, _>>()?;
                    Some(convergence_trace(&mats)?)
                }
                None => None,
            };
            let summary = Summary {
                components,
                avg_max_cosine: other.as_ref().map(|w| avg_max_cosine(&dec.w, w)).transpose()?,
                convergence,
            };
            match &args.out {
                Some(path) => write_json(&summary, path),
                None => {
                    println!("{}", serde_json::to_string_pretty(&summary)?);
                    Ok(())
                }
            }
        }
    }
}

pub fn emit(bytes: &[u8], out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|e| CliError::io(path, e)),
        None => io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
    }
}
