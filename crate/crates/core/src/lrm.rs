//! LRM-NPEFF: non-negative combinations of rank-1 PSD components.
//!
//! Minimizes `sum_i ||F_i - sum_k W_ik g_k g_k^T||_F^2` with `F_i = A_i^T A_i`
//! given as sparse factors. Nothing of size `m x m` is ever formed; all work
//! goes through
//!
//! * `B[row, k] = <a_row, g_k>` (one reduction over columns),
//! * `GG^T` (one reduction over columns),
//! * column-local products for the gradient in `G`.
//!
//! `W` is updated multiplicatively, `W <- W * N / (W ((GG^T) * (GG^T)))`
//! with `N_ik = sum_rows B^2`, which never increases the objective. `G` takes
//! plain gradient steps with `grad = T1 + T2`,
//! `T1 = 4 ((W^T W) * (GG^T)) G` and `T2[k, l] = -4 sum_rows W_ik B[row,k] A[row,l]`.

use std::ops::Range;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::decomposition::{config_snapshot, Decomposition, LossRecord};
use crate::error::{NpeffError, Result};
use crate::pef::{ColumnIndexMap, PefKind, PefSet};
use crate::shard::ShardPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizerConfig {
    pub rank: usize,
    pub warmup_steps: usize,
    pub joint_steps: usize,
    pub warmup_lr: f64,
    pub joint_lr: f64,
    pub seed: u64,
    pub workers: usize,
    pub denominator_guard: f64,
    pub deterministic_reduction: bool,
    pub log_every: usize,
}

impl FactorizerConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            warmup_steps: 100,
            joint_steps: 1500,
            warmup_lr: 1e-4,
            joint_lr: 3e-4,
            seed: 0,
            workers: 1,
            denominator_guard: 1e-12,
            deterministic_reduction: true,
            log_every: 50,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(NpeffError::Domain("rank must be positive".into()));
        }
        if !(self.warmup_lr > 0.0 && self.joint_lr > 0.0 && self.denominator_guard > 0.0) {
            return Err(NpeffError::Domain(
                "learning rates and denominator guard must be positive".into(),
            ));
        }
        if self.log_every == 0 {
            return Err(NpeffError::Domain("log_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ColEntry {
    row: usize,
    col: usize,
    value: f64,
}

/// A PEF set laid out for column-sharded factorization.
#[derive(Debug, Clone)]
pub struct LrmProblem {
    n: usize,
    m: usize,
    row_example: Vec<usize>,
    example_rows: Vec<Range<usize>>,
    sq_norms: Vec<f64>,
    block_entries: Vec<Vec<ColEntry>>,
    plan: ShardPlan,
}

impl LrmProblem {
    pub fn new(set: &PefSet, workers: usize, deterministic: bool) -> Result<Self> {
        if set.kind() != PefKind::Lrm {
            return Err(NpeffError::Domain(format!(
                "LRM factorization needs LRM PEFs, got {}",
                set.kind()
            )));
        }
        let plan = ShardPlan::new(set.m(), workers, deterministic);
        let mut row_example = Vec::new();
        let mut example_rows = Vec::with_capacity(set.len());
        let mut entries = Vec::new();
        for (i, pef) in set.pefs().iter().enumerate() {
            let start = row_example.len();
            row_example.extend(std::iter::repeat_n(i, pef.rank() as usize));
            for e in pef.entries() {
                entries.push(ColEntry {
                    row: start + e.row as usize,
                    col: e.col,
                    value: e.value,
                });
            }
            example_rows.push(start..row_example.len());
        }
        entries.sort_by_key(|e| (e.col, e.row));
        let block_entries = plan
            .blocks()
            .iter()
            .map(|cols| {
                let lo = entries.partition_point(|e| e.col < cols.start);
                let hi = entries.partition_point(|e| e.col < cols.end);
                entries[lo..hi].to_vec()
            })
            .collect();
        let sq_norms = set
            .pefs()
            .iter()
            .map(|p| p.frobenius_norm(PefKind::Lrm).powi(2))
            .collect();
        Ok(Self {
            n: set.len(),
            m: set.m(),
            row_example,
            example_rows,
            sq_norms,
            block_entries,
            plan,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Total number of class rows over all examples.
    pub fn num_rows(&self) -> usize {
        self.row_example.len()
    }

    pub fn example_rows(&self, i: usize) -> Range<usize> {
        self.example_rows[i].clone()
    }

    pub fn plan(&self) -> &ShardPlan {
        &self.plan
    }

    fn check_g(&self, g: &Array2<f64>) -> Result<()> {
        if g.ncols() != self.m {
            return Err(NpeffError::Shape {
                expected: self.m,
                got: g.ncols(),
            });
        }
        Ok(())
    }

    fn check_w(&self, w: &Array2<f64>, r: usize) -> Result<()> {
        if w.nrows() != self.n {
            return Err(NpeffError::Shape {
                expected: self.n,
                got: w.nrows(),
            });
        }
        if w.ncols() != r {
            return Err(NpeffError::Shape {
                expected: r,
                got: w.ncols(),
            });
        }
        Ok(())
    }

    /// `B[row, k] = sum_l A[row, l] G[k, l]`, flattened over `(example, class row)`.
    pub fn compute_b(&self, g: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_g(g)?;
        let r = g.nrows();
        let gt = g.t().as_standard_layout().into_owned();
        let rows = self.num_rows();
        Ok(self.plan.reduce(
            || Array2::<f64>::zeros((rows, r)),
            |acc, block, _| {
                for e in &self.block_entries[block] {
                    let src = gt.row(e.col);
                    let mut dst = acc.row_mut(e.row);
                    dst.zip_mut_with(&src, |d, &gv| *d += e.value * gv);
                }
            },
            |a, b| *a += b,
        ))
    }

    /// `G G^T`, reduced over column blocks.
    pub fn gram(&self, g: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_g(g)?;
        let r = g.nrows();
        Ok(self.plan.reduce(
            || Array2::<f64>::zeros((r, r)),
            |acc, _, cols| {
                let part = g.slice(s![.., cols]);
                *acc += &part.dot(&part.t());
            },
            |a, b| *a += b,
        ))
    }

    /// `N_ik = sum over the class rows of example i of B[row, k]^2`.
    pub fn numerator(&self, b: &Array2<f64>) -> Array2<f64> {
        let r = b.ncols();
        let mut num = Array2::zeros((self.n, r));
        for (i, rows) in self.example_rows.iter().enumerate() {
            for row in rows.clone() {
                let mut dst = num.row_mut(i);
                dst.zip_mut_with(&b.row(row), |d, &v| *d += v * v);
            }
        }
        num
    }

    /// Objective from cached `B` and `GG^T`:
    /// `sum_i ||F_i||^2 - 2 sum_k W_ik N_ik + w_i^T ((GG^T) * (GG^T)) w_i`.
    pub fn loss_from(&self, w: &Array2<f64>, b: &Array2<f64>, ggt: &Array2<f64>) -> Result<f64> {
        self.check_w(w, ggt.nrows())?;
        Ok(self.loss_cached(w, &self.numerator(b), &(ggt * ggt)))
    }

    /// Objective from a precomputed numerator `N` and `(GG^T) * (GG^T)`.
    pub(crate) fn loss_cached(&self, w: &Array2<f64>, num: &Array2<f64>, sq: &Array2<f64>) -> f64 {
        let ws = w.dot(sq);
        let mut total = 0.0;
        for i in 0..self.n {
            let wi = w.row(i);
            total += self.sq_norms[i] - 2.0 * wi.dot(&num.row(i)) + wi.dot(&ws.row(i));
        }
        total.max(0.0)
    }

    pub fn loss(&self, w: &Array2<f64>, g: &Array2<f64>) -> Result<f64> {
        let b = self.compute_b(g)?;
        let ggt = self.gram(g)?;
        self.loss_from(w, &b, &ggt)
    }

    /// Multiplicative update of every column of `W`.
    pub fn w_update(
        &self,
        w: &Array2<f64>,
        b: &Array2<f64>,
        ggt: &Array2<f64>,
        guard: f64,
    ) -> Result<Array2<f64>> {
        self.w_update_columns(w, b, ggt, guard, 0..w.ncols())
    }

    /// Multiplicative update restricted to the columns in `cols`; other
    /// columns are copied unchanged but still enter the denominator.
    pub fn w_update_columns(
        &self,
        w: &Array2<f64>,
        b: &Array2<f64>,
        ggt: &Array2<f64>,
        guard: f64,
        cols: Range<usize>,
    ) -> Result<Array2<f64>> {
        self.check_w(w, ggt.nrows())?;
        let num = self.numerator(b);
        let sq = ggt * ggt;
        let den = w.dot(&sq);
        multiplicative_step(w, &num, &den, guard, cols)
    }

    /// Gradient `T1 + T2` of the objective with respect to `G`.
    pub fn gradient(
        &self,
        w: &Array2<f64>,
        g: &Array2<f64>,
        b: &Array2<f64>,
        ggt: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_g(g)?;
        let r = g.nrows();
        self.check_w(w, r)?;
        let coupling = (w.t().dot(w) * ggt) * 4.0;
        // coef[row, k] = W[example(row), k] * B[row, k]
        let mut coef = b.clone();
        for (row, mut c) in coef.axis_iter_mut(Axis(0)).enumerate() {
            c.zip_mut_with(&w.row(self.row_example[row]), |cv, &wv| *cv *= wv);
        }
        let parts = self.plan.map_blocks(|block, cols| {
            let offset = cols.start;
            let mut t = coupling.dot(&g.slice(s![.., cols]));
            for e in &self.block_entries[block] {
                let local = e.col - offset;
                let c = coef.row(e.row);
                let mut dst = t.column_mut(local);
                dst.zip_mut_with(&c, |d, &cv| *d -= 4.0 * cv * e.value);
            }
            t
        });
        let mut grad = Array2::zeros((r, self.m));
        for (cols, part) in self.plan.blocks().iter().zip(parts) {
            grad.slice_mut(s![.., cols.clone()]).assign(&part);
        }
        Ok(grad)
    }

    /// One fixed-learning-rate gradient step on `G`.
    pub fn g_update(
        &self,
        w: &Array2<f64>,
        g: &Array2<f64>,
        b: &Array2<f64>,
        ggt: &Array2<f64>,
        lr: f64,
    ) -> Result<Array2<f64>> {
        self.g_update_rows(w, g, b, ggt, lr, 0..g.nrows())
    }

    /// Gradient step applied only to the rows in `rows`.
    pub fn g_update_rows(
        &self,
        w: &Array2<f64>,
        g: &Array2<f64>,
        b: &Array2<f64>,
        ggt: &Array2<f64>,
        lr: f64,
        rows: Range<usize>,
    ) -> Result<Array2<f64>> {
        let grad = self.gradient(w, g, b, ggt)?;
        let mut next = g.clone();
        for k in rows {
            for l in 0..self.m {
                let v = g[[k, l]] - lr * grad[[k, l]];
                if !v.is_finite() {
                    return Err(NpeffError::Numerical {
                        step: None,
                        row: k,
                        col: l,
                    });
                }
                next[[k, l]] = v;
            }
        }
        Ok(next)
    }
}

pub(crate) fn multiplicative_step(
    w: &Array2<f64>,
    num: &Array2<f64>,
    den: &Array2<f64>,
    guard: f64,
    cols: Range<usize>,
) -> Result<Array2<f64>> {
    let mut next = w.clone();
    for i in 0..w.nrows() {
        for k in cols.clone() {
            let v = w[[i, k]] * num[[i, k]] / den[[i, k]].max(guard);
            if !v.is_finite() {
                return Err(NpeffError::Numerical {
                    step: None,
                    row: i,
                    col: k,
                });
            }
            next[[i, k]] = v;
        }
    }
    Ok(next)
}

/// `W ~ U[0, 1]`, `G ~ N(0, 2 / (r m'))`.
pub fn init_factors<R: Rng + ?Sized>(
    n: usize,
    r: usize,
    m: usize,
    rng: &mut R,
) -> (Array2<f64>, Array2<f64>) {
    let w = random_uniform(n, r, rng);
    let g = random_components(r, m, r, m, rng);
    (w, g)
}

pub(crate) fn random_uniform<R: Rng + ?Sized>(n: usize, r: usize, rng: &mut R) -> Array2<f64> {
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    Array2::from_shape_fn((n, r), |_| unit.sample(rng))
}

/// `rows x m` gaussian block with standard deviation `sqrt(2 / (total_rank * m))`.
pub(crate) fn random_components<R: Rng + ?Sized>(
    rows: usize,
    m: usize,
    total_rank: usize,
    effective_dim: usize,
    rng: &mut R,
) -> Array2<f64> {
    let std = (2.0 / (total_rank.max(1) * effective_dim.max(1)) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, m), |_| normal.sample(rng))
}

/// Full LRM-NPEFF run: initialize, train `G` alone for the warmup, then
/// alternate `W` and `G` updates. The input set must already be restricted to
/// the columns of `index_map`.
pub fn decompose(
    set: &PefSet,
    index_map: &ColumnIndexMap,
    config: &FactorizerConfig,
) -> Result<Decomposition> {
    decompose_observed(set, index_map, config, |_, _| {})
}

/// [`decompose`] calling `observer(step, &W)` whenever the loss is logged.
pub fn decompose_observed<F>(
    set: &PefSet,
    index_map: &ColumnIndexMap,
    config: &FactorizerConfig,
    mut observer: F,
) -> Result<Decomposition>
where
    F: FnMut(usize, &Array2<f64>),
{
    config.validate()?;
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
    let problem = LrmProblem::new(set, config.workers, config.deterministic_reduction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut w, mut g) = init_factors(problem.n(), config.rank, problem.m(), &mut rng);
    let mut history = Vec::new();
    let total = config.warmup_steps + config.joint_steps;

    for step in 0..total {
        let b = problem.compute_b(&g)?;
        let ggt = problem.gram(&g)?;
        if step % config.log_every == 0 {
            history.push(LossRecord {
                step,
                loss: problem.loss_from(&w, &b, &ggt)?,
            });
            observer(step, &w);
        }
        let lr = if step < config.warmup_steps {
            config.warmup_lr
        } else {
            w = problem
                .w_update(&w, &b, &ggt, config.denominator_guard)
                .map_err(|e| e.at_step(step))?;
            config.joint_lr
        };
        // G is unchanged by the W-update, so B and GG^T are reused here.
        g = problem
            .g_update(&w, &g, &b, &ggt, lr)
            .map_err(|e| e.at_step(step))?;
    }
    history.push(LossRecord {
        step: total,
        loss: problem.loss(&w, &g)?,
    });
    observer(total, &w);

    let mut dec = Decomposition::new(PefKind::Lrm, w, g, index_map.clone())?;
    dec.loss_history = history;
    dec.example_ids = set.example_ids();
    dec.config = config_snapshot(config, config.deterministic_reduction)?;
    Ok(dec)
}
