//! D-NPEFF: multiplicative-update NMF of the `n x m'` matrix of diagonal PEFs.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::decomposition::{config_snapshot, Decomposition, LossRecord};
use crate::error::{NpeffError, Result};
use crate::lrm::random_uniform;
use crate::pef::{ColumnIndexMap, PefKind, PefSet};
use crate::shard::ShardPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfConfig {
    pub rank: usize,
    pub steps: usize,
    pub seed: u64,
    pub workers: usize,
    pub denominator_guard: f64,
    pub deterministic_reduction: bool,
    pub log_every: usize,
}

impl NmfConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            steps: 2500,
            seed: 0,
            workers: 1,
            denominator_guard: 1e-12,
            deterministic_reduction: true,
            log_every: 50,
        }
    }
}

/// Dense `n x m` matrix with one diagonal PEF per row.
pub fn dense_matrix(set: &PefSet) -> Result<Array2<f64>> {
    if set.kind() != PefKind::Diag {
        return Err(NpeffError::Domain(format!(
            "NMF needs diagonal PEFs, got {}",
            set.kind()
        )));
    }
    let mut v = Array2::zeros((set.len(), set.m()));
    for (i, p) in set.pefs().iter().enumerate() {
        for e in p.entries() {
            v[[i, e.col]] = e.value;
        }
    }
    Ok(v)
}

fn check_non_negative(name: &str, a: &Array2<f64>) -> Result<()> {
    if a.iter().any(|v| !(*v >= 0.0)) {
        return Err(NpeffError::Domain(format!("{name} must be non-negative")));
    }
    Ok(())
}

fn check_finite(a: &Array2<f64>) -> Result<()> {
    if let Some(((row, col), _)) = a.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(NpeffError::Numerical {
            step: None,
            row,
            col,
        });
    }
    Ok(())
}

/// `||V - W H||_F^2`.
pub fn nmf_loss(v: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> f64 {
    let diff = v - &w.dot(h);
    diff.iter().map(|d| d * d).sum()
}

/// One Lee-Seung step:
/// `W' = W * (V H^T) / (W H H^T + eps)`, then
/// `H' = H * (W'^T V) / (W'^T W' H + eps)`.
pub fn nmf_step(
    v: &Array2<f64>,
    w: &Array2<f64>,
    h: &Array2<f64>,
    guard: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_non_negative("V", v)?;
    check_non_negative("W", w)?;
    check_non_negative("H", h)?;
    let plan = ShardPlan::new(v.ncols(), 1, true);
    sharded_step(&plan, v, w, h, guard)
}

fn sharded_step(
    plan: &ShardPlan,
    v: &Array2<f64>,
    w: &Array2<f64>,
    h: &Array2<f64>,
    guard: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (n, r) = w.dim();
    let vht = plan.reduce(
        || Array2::<f64>::zeros((n, r)),
        |acc, _, cols| *acc += &v.slice(s![.., cols.clone()]).dot(&h.slice(s![.., cols]).t()),
        |a, b| *a += b,
    );
    let hht = plan.reduce(
        || Array2::<f64>::zeros((r, r)),
        |acc, _, cols| {
            let part = h.slice(s![.., cols]);
            *acc += &part.dot(&part.t());
        },
        |a, b| *a += b,
    );
    let w_next = w * &vht / &(w.dot(&hht) + guard);
    check_finite(&w_next)?;
    let wtw = w_next.t().dot(&w_next);
    let parts = plan.map_blocks(|_, cols| {
        let hb = h.slice(s![.., cols.clone()]);
        let num = w_next.t().dot(&v.slice(s![.., cols]));
        &hb * &num / &(wtw.dot(&hb) + guard)
    });
    let mut h_next = Array2::zeros(h.dim());
    for (cols, part) in plan.blocks().iter().zip(parts) {
        h_next.slice_mut(s![.., cols.clone()]).assign(&part);
    }
    check_finite(&h_next)?;
    Ok((w_next, h_next))
}

fn sharded_loss(plan: &ShardPlan, v: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> f64 {
    plan.reduce(
        || 0.0f64,
        |acc, _, cols| {
            let diff = &v.slice(s![.., cols.clone()]) - &w.dot(&h.slice(s![.., cols]));
            *acc += diff.iter().map(|d| d * d).sum::<f64>();
        },
        |a, b| *a += *b,
    )
}

/// `W ~ U[0, 1]` and `H ~ U[0, 4 mean(V) / r]`, so `E[(WH)_ij] = mean(V)`.
pub fn init_nmf<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    r: usize,
    mean_v: f64,
    rng: &mut R,
) -> (Array2<f64>, Array2<f64>) {
    let w = random_uniform(n, r, rng);
    let upper = (4.0 * mean_v / r.max(1) as f64).max(f64::MIN_POSITIVE);
    let dist = Uniform::new(0.0, upper).expect("valid range");
    let h = Array2::from_shape_fn((r, m), |_| dist.sample(rng));
    (w, h)
}

/// Iterate sharded NMF steps from a given start, logging the loss every
/// `log_every` steps and after the last one.
pub fn run_nmf(
    v: &Array2<f64>,
    mut w: Array2<f64>,
    mut h: Array2<f64>,
    config: &NmfConfig,
) -> Result<(Array2<f64>, Array2<f64>, Vec<LossRecord>)> {
    check_non_negative("V", v)?;
    if config.log_every == 0 {
        return Err(NpeffError::Domain("log_every must be positive".into()));
    }
    let plan = ShardPlan::new(v.ncols(), config.workers, config.deterministic_reduction);
    let mut history = Vec::new();
    for step in 0..config.steps {
        if step % config.log_every == 0 {
            history.push(LossRecord {
                step,
                loss: sharded_loss(&plan, v, &w, &h),
            });
        }
        let (wn, hn) =
            sharded_step(&plan, v, &w, &h, config.denominator_guard).map_err(|e| e.at_step(step))?;
        w = wn;
        h = hn;
    }
    history.push(LossRecord {
        step: config.steps,
        loss: sharded_loss(&plan, v, &w, &h),
    });
    Ok((w, h, history))
}

pub fn decompose_diag(
    set: &PefSet,
    index_map: &ColumnIndexMap,
    config: &NmfConfig,
) -> Result<Decomposition> {
    if config.rank == 0 {
        return Err(NpeffError::Domain("rank must be positive".into()));
    }
    if index_map.len() != set.m() {
        return Err(NpeffError::IndexMap(format!(
            "index map keeps {} columns but the set has m = {}",
            index_map.len(),
            set.m()
        )));
    }
    if set.is_empty() {
        return Err(NpeffError::EmptyProblem("no examples to decompose".into()));
    }
    let v = dense_matrix(set)?;
    let mean = v.mean().unwrap_or(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w0, h0) = init_nmf(v.nrows(), v.ncols(), config.rank, mean, &mut rng);
    let (w, h, history) = run_nmf(&v, w0, h0, config)?;
    let mut dec = Decomposition::new(PefKind::Diag, w, h, index_map.clone())?;
    dec.loss_history = history;
    dec.example_ids = set.example_ids();
    dec.config = config_snapshot(config, config.deterministic_reduction)?;
    Ok(dec)
}
