//! Component-targeted parameter perturbations.
//!
//! LRM components give a direction directly: take `g_j`, project out the
//! components it is dissimilar to, and rescale. Diagonal components have no
//! sign, so they go through Fisher-weighted parameter averaging (FWPA) with a
//! probed sign pattern and a small search over the step size and mixing
//! weight.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NpeffError, Result};
use crate::pef::ColumnIndexMap;
use crate::sandbox::{kl_from_log_probs, SandboxModel};

pub const DEFAULT_COS_THRESHOLD: f64 = 0.35;
pub const DEFAULT_NORM: f64 = 0.1;
pub const DEFAULT_ZERO_GUARD: f64 = 1e-12;
pub const DEFAULT_PROBE_SCALE: f64 = 1e-3;

/// Relative norm below which a rejected direction counts as annihilated.
const DEGENERATE_TOL: f64 = 1e-9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrmPerturbation {
    /// Length-`m` parameter offset, zero at pruned indices.
    pub delta: Vec<f64>,
    /// The same offset over the kept (reduced) columns.
    pub reduced: Vec<f64>,
    pub target_component: usize,
    /// Components projected out of the direction.
    pub rejected: Vec<usize>,
    pub cos_threshold: f64,
    pub norm: f64,
}

/// Direction for component `j`: `g_j` with every sufficiently dissimilar
/// component (`|cos| < cos_threshold`) projected out at once, rescaled to
/// `norm` and expanded to the full parameter space.
pub fn build_lrm_perturbation(
    g: &Array2<f64>,
    index_map: &ColumnIndexMap,
    j: usize,
    cos_threshold: f64,
    norm_target: f64,
) -> Result<LrmPerturbation> {
    let r = g.nrows();
    if j >= r {
        return Err(NpeffError::ComponentIndex { index: j, rank: r });
    }
    if index_map.len() != g.ncols() {
        return Err(NpeffError::IndexMap(format!(
            "index map keeps {} columns but components have {}",
            index_map.len(),
            g.ncols()
        )));
    }
    if !(norm_target > 0.0) {
        return Err(NpeffError::Domain(format!(
            "perturbation norm must be positive, got {norm_target}"
        )));
    }
    let target: Vec<f64> = g.row(j).to_vec();
    let target_norm = norm(&target);
    if target_norm == 0.0 {
        return Err(NpeffError::DegenerateDirection { component: j });
    }

    let mut rejected = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for k in (0..r).filter(|&k| k != j) {
        let gk = g.row(k).to_vec();
        let nk = norm(&gk);
        let cos = if nk == 0.0 { 0.0 } else { dot(&target, &gk) / (target_norm * nk) };
        if cos.abs() >= cos_threshold {
            continue;
        }
        rejected.push(k);
        if nk == 0.0 {
            continue;
        }
        // Gram-Schmidt against the basis so far, twice for stability.
        let mut v = gk;
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let nv = norm(&v);
        if nv > DEGENERATE_TOL * nk {
            v.iter_mut().for_each(|x| *x /= nv);
            basis.push(v);
        }
    }

    let mut d = target;
    for _ in 0..2 {
        for b in &basis {
            let c = dot(&d, b);
            d.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    let nd = norm(&d);
    if nd < DEGENERATE_TOL * target_norm {
        return Err(NpeffError::DegenerateDirection { component: j });
    }
    d.iter_mut().for_each(|x| *x *= norm_target / nd);
    let delta = index_map.expand(&d)?;
    Ok(LrmPerturbation {
        delta,
        reduced: d,
        target_component: j,
        rejected,
        cos_threshold,
        norm: norm_target,
    })
}

/// `(g_k . delta)^2` for every component, i.e. `delta^T H_k delta`.
pub fn selectivity_scores(g: &Array2<f64>, delta: &[f64]) -> Result<Vec<f64>> {
    if delta.len() != g.ncols() {
        return Err(NpeffError::Shape {
            expected: g.ncols(),
            got: delta.len(),
        });
    }
    Ok(g.rows()
        .into_iter()
        .map(|row| {
            let d: f64 = row.iter().zip(delta).map(|(a, b)| a * b).sum();
            d * d
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// `theta + sign * delta`.
pub fn apply_delta(model: &SandboxModel, delta: &[f64], sign: Sign) -> Result<SandboxModel> {
    if delta.len() != model.num_params() {
        return Err(NpeffError::Shape {
            expected: model.num_params(),
            got: delta.len(),
        });
    }
    let s = sign.value();
    let theta = model
        .theta()
        .iter()
        .zip(delta)
        .map(|(t, d)| t + s * d)
        .collect();
    model.with_theta(theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwpaPlan {
    pub delta_mag: f64,
    pub lambda: f64,
    pub sign_pattern: Vec<f64>,
    pub component_fisher: Vec<f64>,
    pub model_fisher: Vec<f64>,
    pub zero_guard: f64,
}

impl FwpaPlan {
    pub fn validate(&self, m: usize) -> Result<()> {
        for (name, len) in [
            ("sign pattern", self.sign_pattern.len()),
            ("component fisher", self.component_fisher.len()),
            ("model fisher", self.model_fisher.len()),
        ] {
            if len != m {
                return Err(NpeffError::Shape {
                    expected: m,
                    got: len,
                })
                .map_err(|e| NpeffError::Domain(format!("{name}: {e}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(NpeffError::Domain(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.delta_mag > 0.0) {
            return Err(NpeffError::Domain(format!(
                "delta must be positive, got {}",
                self.delta_mag
            )));
        }
        if self.sign_pattern.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(NpeffError::Domain("sign pattern entries must be +1 or -1".into()));
        }
        if self
            .component_fisher
            .iter()
            .chain(&self.model_fisher)
            .any(|v| !(*v >= 0.0))
        {
            return Err(NpeffError::Domain("fisher weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-coordinate Fisher-weighted merge of `theta` and `theta + s * delta`:
/// `phi_i = ((1-l) f_i theta_i + l h_i (theta_i + s_i delta)) / ((1-l) f_i + l h_i)`.
/// Coordinates whose total weight is below the guard stay at `theta_i`.
pub fn fwpa_perturb(theta: &[f64], plan: &FwpaPlan) -> Result<Vec<f64>> {
    plan.validate(theta.len())?;
    let l = plan.lambda;
    Ok(theta
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let a = (1.0 - l) * plan.model_fisher[i];
            let b = l * plan.component_fisher[i];
            if a + b < plan.zero_guard {
                t
            } else {
                (a * t + b * (t + plan.sign_pattern[i] * plan.delta_mag)) / (a + b)
            }
        })
        .collect())
}

/// Gradient at `theta + probe_scale * direction` of
/// `sum_x KL(p_theta(.|x) || p_probe(.|x))` with the reference frozen at `theta`.
pub fn probe_gradient(
    model: &SandboxModel,
    examples: &[Vec<f64>],
    direction: &[f64],
    probe_scale: f64,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(NpeffError::EmptyProblem("sign pattern needs examples".into()));
    }
    if direction.len() != model.num_params() {
        return Err(NpeffError::Shape {
            expected: model.num_params(),
            got: direction.len(),
        });
    }
    let probe = model.with_theta(
        model
            .theta()
            .iter()
            .zip(direction)
            .map(|(t, u)| t + probe_scale * u)
            .collect(),
    )?;
    let mut grad = vec![0.0; model.num_params()];
    for x in examples {
        let p = model.forward_pass(x)?;
        let q = probe.forward_pass(x)?;
        // d/dz' of -sum_y p_y log q_y(z') is q - p.
        let d_logits: Vec<f64> = q.probs().iter().zip(p.probs()).map(|(a, b)| a - b).collect();
        for (g, v) in grad.iter_mut().zip(probe.backprop_logits(&q, &d_logits)) {
            *g += v;
        }
    }
    Ok(grad)
}

/// Signs of [`probe_gradient`], with zeros mapped to `+1`.
pub fn sign_pattern_with_direction(
    model: &SandboxModel,
    examples: &[Vec<f64>],
    direction: &[f64],
    probe_scale: f64,
) -> Result<Vec<f64>> {
    Ok(probe_gradient(model, examples, direction, probe_scale)?
        .into_iter()
        .map(|g| if g < 0.0 { -1.0 } else { 1.0 })
        .collect())
}

/// Sign pattern probed along a seeded random direction weighted by the
/// component fisher `h`, so coordinates the component ignores stay put.
pub fn sign_pattern(
    model: &SandboxModel,
    examples: &[Vec<f64>],
    component_fisher: &[f64],
    probe_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if component_fisher.len() != model.num_params() {
        return Err(NpeffError::Shape {
            expected: model.num_params(),
            got: component_fisher.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = component_fisher
        .iter()
        .map(|&h| h * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let nu = norm(&u);
    if !(nu > 0.0) {
        return Err(NpeffError::Domain(
            "component fisher gives a zero probe direction".into(),
        ));
    }
    u.iter_mut().for_each(|v| *v /= nu);
    sign_pattern_with_direction(model, examples, &u, probe_scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwpaSearchConfig {
    pub kl_low: f64,
    pub kl_high: f64,
    pub delta_max: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for FwpaSearchConfig {
    fn default() -> Self {
        Self {
            kl_low: 0.25,
            kl_high: 0.35,
            delta_max: 1.0,
            max_iters: 64,
            seed: 0,
        }
    }
}

impl FwpaSearchConfig {
    fn validate(&self) -> Result<()> {
        if !(self.kl_low > 0.0 && self.kl_low < self.kl_high) {
            return Err(NpeffError::Domain(format!(
                "KL range must satisfy 0 < low < high, got [{}, {}]",
                self.kl_low, self.kl_high
            )));
        }
        if !(self.delta_max > 0.0) {
            return Err(NpeffError::Domain("delta_max must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(NpeffError::Domain("max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwpaSearchOutcome {
    pub delta: f64,
    pub lambda: f64,
    pub kl: f64,
    pub evaluations: usize,
    /// False when the budget ran out; the fields then hold the evaluated
    /// point whose KL was closest to the range.
    pub converged: bool,
}

#[derive(Clone, Copy)]
struct Probe {
    delta: f64,
    lambda: f64,
    kl: f64,
}

fn range_distance(kl: f64, lo: f64, hi: f64) -> f64 {
    if kl < lo {
        lo - kl
    } else if kl > hi {
        kl - hi
    } else {
        0.0
    }
}

/// Alternating coordinate search for `(delta, lambda)` so that `eval` lands
/// in `[kl_low, kl_high]`.
///
/// Each round works on one coordinate. If the KL is too high the coordinate
/// tries the point halfway toward its minimum; if that overshoots (KL now too
/// low) it retries a quarter of the way, then an eighth, and so on, keeping
/// the first point that does not overshoot. A KL that is too low is handled
/// the same way toward the coordinate's maximum. The kept point ends the
/// round and the next round switches coordinate. Every evaluation, including
/// the initial one, counts toward `max_iters`.
pub fn search_hparams<F>(
    mut eval: F,
    init: (f64, f64),
    config: &FwpaSearchConfig,
) -> Result<FwpaSearchOutcome>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    config.validate()?;
    let (lo, hi) = (config.kl_low, config.kl_high);
    let mut evaluations = 0;
    let mut measure = |delta: f64, lambda: f64, evaluations: &mut usize| -> Result<Probe> {
        *evaluations += 1;
        let kl = eval(delta, lambda)?;
        if kl.is_nan() {
            return Err(NpeffError::Numerical {
                step: Some(*evaluations),
                row: 0,
                col: 0,
            });
        }
        Ok(Probe { delta, lambda, kl })
    };
    let mut current = measure(init.0, init.1, &mut evaluations)?;
    let mut best = current;
    let mut on_delta = true;
    let finish = |p: Probe, evaluations, converged| FwpaSearchOutcome {
        delta: p.delta,
        lambda: p.lambda,
        kl: p.kl,
        evaluations,
        converged,
    };

    loop {
        if range_distance(current.kl, lo, hi) == 0.0 {
            return Ok(finish(current, evaluations, true));
        }
        if evaluations >= config.max_iters {
            return Ok(finish(best, evaluations, false));
        }
        let too_high = current.kl > hi;
        let (x, bound) = match (on_delta, too_high) {
            (true, true) => (current.delta, 0.0),
            (true, false) => (current.delta, config.delta_max),
            (false, true) => (current.lambda, 0.0),
            (false, false) => (current.lambda, 1.0),
        };
        let mut frac = 0.5;
        while evaluations < config.max_iters {
            let candidate = x + frac * (bound - x);
            let probe = if on_delta {
                measure(candidate, current.lambda, &mut evaluations)?
            } else {
                measure(current.delta, candidate, &mut evaluations)?
            };
            if range_distance(probe.kl, lo, hi) < range_distance(best.kl, lo, hi) {
                best = probe;
            }
            let overshot = if too_high { probe.kl < lo } else { probe.kl > hi };
            if !overshot {
                current = probe;
                break;
            }
            frac *= 0.5;
        }
        on_delta = !on_delta;
    }
}

/// Mean `KL(p_model || p_perturbed)` over a set of inputs.
pub fn mean_kl(model: &SandboxModel, perturbed: &SandboxModel, examples: &[Vec<f64>]) -> Result<f64> {
    if examples.is_empty() {
        return Err(NpeffError::EmptyProblem("no examples to average KL over".into()));
    }
    let mut total = 0.0;
    for x in examples {
        let p = model.forward_pass(x)?;
        let q = perturbed.forward_pass(x)?;
        total += kl_from_log_probs(p.log_probs(), q.log_probs());
    }
    Ok(total / examples.len() as f64)
}

/// Run [`search_hparams`] on a sandbox model, scoring each `(delta, lambda)`
/// by the mean KL of the FWPA-perturbed model on `top_examples`. The start
/// point is drawn from the seed: `delta ~ (0, D]`, `lambda ~ [0, 1]`.
pub fn search_fwpa_hparams(
    model: &SandboxModel,
    model_fisher: &[f64],
    component_fisher: &[f64],
    sign_pattern: &[f64],
    top_examples: &[Vec<f64>],
    config: &FwpaSearchConfig,
) -> Result<FwpaSearchOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let delta0 = config.delta_max * (1.0 - rng.random::<f64>());
    let lambda0 = rng.random::<f64>();
    let eval = |delta: f64, lambda: f64| {
        let plan = FwpaPlan {
            delta_mag: delta,
            lambda,
            sign_pattern: sign_pattern.to_vec(),
            component_fisher: component_fisher.to_vec(),
            model_fisher: model_fisher.to_vec(),
            zero_guard: DEFAULT_ZERO_GUARD,
        };
        let perturbed = model.with_theta(fwpa_perturb(model.theta(), &plan)?)?;
        mean_kl(model, &perturbed, top_examples)
    };
    search_hparams(eval, (delta0, lambda0), config)
}
