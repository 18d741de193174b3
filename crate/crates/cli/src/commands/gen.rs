//! `gen-pefs`: planted, modular or random sandbox instances to NPEF.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use npeff::pef::preprocess;
use npeff::sandbox::{
    compute_diag_pef, compute_lrm_pef, generate_modular_instance, generate_planted_pefs,
    Activation, ModularModelSpec, PlantedSpec, SandboxModel,
};
use npeff::{PefKind, PefSet, SparsePef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::instance::{inline_or_file, write_json, write_pefs, Instance};
use crate::settings::Settings;
use crate::CliError;

const DEFAULT_EPS: f64 = 3e-3;
const DEFAULT_TOPK: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Known components; labels are each example's dominant component.
    Planted,
    /// Block-structured classifier; labels are the excited block.
    Modular,
    /// Randomly initialized MLP on gaussian inputs; no labels.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindArg {
    Diag,
    Lrm,
}

impl From<KindArg> for PefKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Diag => PefKind::Diag,
            KindArg::Lrm => PefKind::Lrm,
        }
    }
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    source: Option<Source>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Classes with probability below this are dropped (the argmax is kept).
    #[arg(long)]
    eps: Option<f64>,
    /// Entries kept per example after normalization.
    #[arg(long)]
    topk: Option<usize>,
    /// Number of examples (overrides the count in a spec).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Planted spec as inline JSON or `@file`.
    #[arg(long, value_name = "JSON")]
    planted_spec: Option<String>,
    /// Modular spec as inline JSON or `@file`.
    #[arg(long, value_name = "JSON")]
    modular_spec: Option<String>,
    /// Layer widths of the random model, e.g. `4,8,3`.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    #[arg(long, value_name = "FILE.npef")]
    out: PathBuf,
    /// Model and inputs (modular/random) or planted ground truth, as JSON.
    #[arg(long, value_name = "FILE.json")]
    instance_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationArg {
    Tanh,
    Relu,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

fn default_planted() -> PlantedSpec {
    PlantedSpec {
        num_components: 8,
        param_dim: 200,
        ranks_per_example: 2,
        num_examples: 256,
        noise_scale: 0.0,
        max_pairwise_cos: 0.3,
    }
}

pub fn run(args: &GenArgs, settings: &Settings) -> Result<(), CliError> {
    let source = settings.pick(args.source, "source", Source::Planted)?;
    let kind: PefKind = settings.pick(args.kind, "kind", KindArg::Lrm)?.into();
    let eps = settings.pick(args.eps, "eps", DEFAULT_EPS)?;
    let topk = settings.pick(args.topk, "topk", DEFAULT_TOPK)?;
    let n: Option<usize> = match args.n {
        Some(n) => Some(n),
        None => settings.get("n")?,
    };
    let seed = settings.pick(args.seed, "seed", 0)?;

    let (raw, sidecar) = match source {
        Source::Planted => {
            let mut spec: PlantedSpec = match &args.planted_spec {
                Some(s) => inline_or_file(s)?,
                None => settings.pick(None, "planted_spec", default_planted())?,
            };
            if let Some(n) = n {
                spec.num_examples = n;
            }
            let inst = generate_planted_pefs(&spec, seed)?;
            let set = match kind {
                PefKind::Lrm => inst.pefs.clone(),
                PefKind::Diag => planted_diag(&inst.pefs)?,
            };
            let truth = json!({
                "spec": spec,
                "w_true": inst.w_true.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
                "g_true": inst.g_true.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            });
            (set, truth)
        }
        Source::Modular => {
            let mut spec: ModularModelSpec = match &args.modular_spec {
                Some(s) => inline_or_file(s)?,
                None => settings.pick(None, "modular_spec", ModularModelSpec::new(3, 4, 8, 3, 300))?,
            };
            if let Some(n) = n {
                spec.num_examples = n;
            }
            let inst = generate_modular_instance(&spec, seed)?;
            let labels: Vec<i64> = inst.block_labels.iter().map(|&b| b as i64).collect();
            let set = model_pefs(&inst.model, &inst.inputs, kind, eps, Some(labels.clone()))?;
            let instance = Instance {
                model: inst.model,
                inputs: inst.inputs,
                labels: Some(labels),
            };
            (set, serde_json::to_value(instance)?)
        }
        Source::Random => {
            let dims = match &args.dims {
                Some(d) => d.clone(),
                None => settings.pick(None, "dims", vec![4, 8, 3])?,
            };
            let act: Activation = settings.pick(args.activation, "activation", ActivationArg::Tanh)?.into();
            let n = n.unwrap_or(200);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = SandboxModel::random(dims, act, &mut rng)?;
            let inputs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..model.input_dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let set = model_pefs(&model, &inputs, kind, eps, None)?;
            let instance = Instance {
                model,
                inputs,
                labels: None,
            };
            (set, serde_json::to_value(instance)?)
        }
    };

    let set = preprocess(&raw, topk)?;
    write_pefs(&set, &args.out)?;
    if let Some(path) = &args.instance_out {
        write_json(&sidecar, path)?;
    }
    Ok(())
}

/// Diagonal of each planted `A^T A`.
fn planted_diag(set: &PefSet) -> Result<PefSet, CliError> {
    let m = set.m();
    let pefs = set
        .pefs()
        .iter()
        .map(|p| {
            let mut f = vec![0.0; m];
            for row in p.to_dense_rows(m) {
                for (fi, a) in f.iter_mut().zip(row) {
                    *fi += a * a;
                }
            }
            SparsePef::diag_from_dense(&f, p.example_id())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PefSet::new(PefKind::Diag, m, pefs)?.with_labels(set.labels().map(<[i64]>::to_vec), None)?)
}

/// PEFs of `model` at every input; predictions are the argmax class.
fn model_pefs(
    model: &SandboxModel,
    inputs: &[Vec<f64>],
    kind: PefKind,
    eps: f64,
    labels: Option<Vec<i64>>,
) -> Result<PefSet, CliError> {
    let mut pefs = Vec::with_capacity(inputs.len());
    let mut predictions = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let id = i as u64;
        pefs.push(match kind {
            PefKind::Lrm => SparsePef::lrm_from_factor(&compute_lrm_pef(model, x, eps)?, id)?,
            PefKind::Diag => SparsePef::diag_from_dense(&compute_diag_pef(model, x, eps)?, id)?,
        });
        let probs = model.forward(x)?;
        let argmax = probs
            .iter()
            .enumerate()
            .fold(0, |best, (c, &p)| if p > probs[best] { c } else { best });
        predictions.push(argmax as i64);
    }
    Ok(PefSet::new(kind, model.num_params(), pefs)?.with_labels(labels, Some(predictions))?)
}
