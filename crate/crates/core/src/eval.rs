//! Selectivity metrics, decomposition comparison and baselines.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NpeffError, Result};
use crate::pef::PefSet;
use crate::sandbox::{kl_from_log_probs, SandboxModel};

pub const DEFAULT_TOP_N: usize = 16;
pub const DEFAULT_BACKGROUND: usize = 500;

fn check_component(w: &Array2<f64>, j: usize) -> Result<()> {
    if j >= w.ncols() {
        return Err(NpeffError::ComponentIndex {
            index: j,
            rank: w.ncols(),
        });
    }
    Ok(())
}

/// Row indices of `w` sorted by column `j` descending; ties keep the lower index first.
pub fn top_examples(w: &Array2<f64>, j: usize, count: usize) -> Result<Vec<usize>> {
    check_component(w, j)?;
    if count > w.nrows() {
        return Err(NpeffError::Domain(format!(
            "asked for {count} top examples out of {}",
            w.nrows()
        )));
    }
    let col = w.column(j);
    let mut order: Vec<usize> = (0..w.nrows()).collect();
    order.sort_by(|&a, &b| col[b].total_cmp(&col[a]));
    order.truncate(count);
    Ok(order)
}

/// Seeded background sample of `count` distinct rows (all rows if `count >= n`).
pub fn sample_background(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    idx
}

fn mean_at(values: &[f64], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        total += *values.get(i).ok_or_else(|| {
            NpeffError::Domain(format!("example index {i} out of range for {}", values.len()))
        })?;
    }
    Ok(total / idx.len() as f64)
}

/// `mean(values[top]) / mean(values[background])`, with `0/0 = 1` and
/// `x/0 = +inf`.
pub fn ratio_of_means(values: &[f64], top: &[usize], background: &[usize]) -> Result<f64> {
    if top.is_empty() || background.is_empty() {
        return Err(NpeffError::EmptyProblem(
            "ratio needs non-empty top and background sets".into(),
        ));
    }
    let num = mean_at(values, top)?;
    let den = mean_at(values, background)?;
    Ok(if den == 0.0 {
        if num == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    })
}

/// `KL(p_model(.|x) || p_perturbed(.|x))` for every input.
pub fn per_example_kl(
    model: &SandboxModel,
    perturbed: &SandboxModel,
    inputs: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if !model.same_architecture(perturbed) {
        return Err(NpeffError::Architecture(
            "perturbed model differs in architecture".into(),
        ));
    }
    inputs
        .iter()
        .map(|x| {
            let p = model.forward_pass(x)?;
            let q = perturbed.forward_pass(x)?;
            Ok(kl_from_log_probs(p.log_probs(), q.log_probs()))
        })
        .collect()
}

/// Mean KL on component `j`'s `top_n` examples over the mean KL on the
/// background rows. `inputs[i]` is the input for row `i` of `w`.
pub fn kl_ratio(
    model: &SandboxModel,
    perturbed: &SandboxModel,
    inputs: &[Vec<f64>],
    w: &Array2<f64>,
    j: usize,
    top_n: usize,
    background: &[usize],
) -> Result<f64> {
    if inputs.len() != w.nrows() {
        return Err(NpeffError::Shape {
            expected: w.nrows(),
            got: inputs.len(),
        });
    }
    let top = top_examples(w, j, top_n)?;
    let kls = per_example_kl(model, perturbed, inputs)?;
    ratio_of_means(&kls, &top, background)
}

/// Mean PEF norm `alpha` on the top examples over the background mean.
pub fn pef_norm_ratio(
    set: &PefSet,
    w: &Array2<f64>,
    j: usize,
    top_n: usize,
    background: &[usize],
) -> Result<f64> {
    if set.len() != w.nrows() {
        return Err(NpeffError::Shape {
            expected: w.nrows(),
            got: set.len(),
        });
    }
    let top = top_examples(w, j, top_n)?;
    ratio_of_means(&set.alphas(), &top, background)
}

/// Cosine similarity with the zero-vector convention `cos = 0`.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// `r_a x r_b` cosine similarities between the coefficient columns.
pub fn coeff_cosine_matrix(wa: &Array2<f64>, wb: &Array2<f64>) -> Result<Array2<f64>> {
    if wa.nrows() != wb.nrows() {
        return Err(NpeffError::Shape {
            expected: wa.nrows(),
            got: wb.nrows(),
        });
    }
    Ok(Array2::from_shape_fn((wa.ncols(), wb.ncols()), |(a, b)| {
        cosine(wa.column(a), wb.column(b))
    }))
}

/// Per column of `wa`, the best cosine against any column of `wb`.
pub fn max_cosines(wa: &Array2<f64>, wb: &Array2<f64>) -> Result<Array1<f64>> {
    let c = coeff_cosine_matrix(wa, wb)?;
    Ok(c.rows()
        .into_iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

pub fn avg_max_cosine(wa: &Array2<f64>, wb: &Array2<f64>) -> Result<f64> {
    if wa.ncols() == 0 || wb.ncols() == 0 {
        return Err(NpeffError::EmptyProblem("no components to compare".into()));
    }
    Ok(max_cosines(wa, wb)?.mean().expect("non-empty"))
}

/// For every checkpoint, the mean cosine of each coefficient column with
/// the same column of the final checkpoint.
pub fn convergence_trace(checkpoints: &[Array2<f64>]) -> Result<Vec<f64>> {
    let last = checkpoints
        .last()
        .ok_or_else(|| NpeffError::EmptyProblem("no checkpoints".into()))?;
    if last.ncols() == 0 {
        return Err(NpeffError::EmptyProblem("no components".into()));
    }
    checkpoints
        .iter()
        .map(|w| {
            if w.dim() != last.dim() {
                return Err(NpeffError::Shape {
                    expected: last.len(),
                    got: w.len(),
                });
            }
            let total: f64 = (0..w.ncols())
                .map(|k| cosine(w.column(k), last.column(k)))
                .sum();
            Ok(total / w.ncols() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentPurity {
    pub component: usize,
    pub modal_label: i64,
    pub purity: f64,
    pub tuned: bool,
}

/// Purity of each ranking's first `top_n` entries: the fraction carrying the
/// most common label (smallest label on ties). Tuned means purity 1.
pub fn purity_of_rankings(
    rankings: &[Vec<usize>],
    labels: &[i64],
    top_n: usize,
) -> Result<Vec<ComponentPurity>> {
    if top_n == 0 {
        return Err(NpeffError::Domain("top_n must be positive".into()));
    }
    rankings
        .iter()
        .enumerate()
        .map(|(component, ranking)| {
            let top = &ranking[..top_n.min(ranking.len())];
            if top.is_empty() {
                return Err(NpeffError::EmptyProblem(format!(
                    "component {component} has no ranked examples"
                )));
            }
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for &i in top {
                let label = *labels.get(i).ok_or_else(|| {
                    NpeffError::Domain(format!("no label for example {i}"))
                })?;
                *counts.entry(label).or_default() += 1;
            }
            let (modal_label, count) = counts
                .iter()
                .fold((0, 0), |best, (&l, &c)| if c > best.1 { (l, c) } else { best });
            Ok(ComponentPurity {
                component,
                modal_label,
                purity: count as f64 / top.len() as f64,
                tuned: count == top.len(),
            })
        })
        .collect()
}

/// Purity of every component's top examples under coefficient ranking.
pub fn tuning_purity(w: &Array2<f64>, labels: &[i64], top_n: usize) -> Result<Vec<ComponentPurity>> {
    if labels.len() != w.nrows() {
        return Err(NpeffError::Shape {
            expected: w.nrows(),
            got: labels.len(),
        });
    }
    let count = top_n.min(w.nrows());
    let rankings = (0..w.ncols())
        .map(|j| top_examples(w, j, count))
        .collect::<Result<Vec<_>>>()?;
    purity_of_rankings(&rankings, labels, top_n)
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// Distance of each point to its own centroid.
    pub distances: Vec<f64>,
    pub centroids: Array2<f64>,
    /// `n x k` 0/1 membership matrix.
    pub memberships: Array2<f64>,
    /// Sum of squared distances after seeding and after each iteration.
    pub objective_history: Vec<f64>,
}

impl KMeansResult {
    /// Members of `cluster` ordered by distance to the centroid (closest first).
    pub fn ranking(&self, cluster: usize) -> Vec<usize> {
        let mut members: Vec<usize> = (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect();
        members.sort_by(|&a, &b| self.distances[a].total_cmp(&self.distances[b]));
        members
    }

    pub fn rankings(&self) -> Vec<Vec<usize>> {
        (0..self.centroids.nrows()).map(|c| self.ranking(c)).collect()
    }

    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("seeded objective")
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(data: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    data.rows()
        .into_iter()
        .map(|x| {
            centroids
                .rows()
                .into_iter()
                .enumerate()
                .map(|(c, mu)| (c, sq_dist(x, mu)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        })
        .unzip()
}

fn kmeans_pp<R: Rng + ?Sized>(data: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = data.rows().into_iter().map(|x| sq_dist(x, data.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, x) in data.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, data.row(pick)));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. An empty cluster is re-seeded
/// at the point farthest from its current centroid.
pub fn kmeans_baseline(data: &Array2<f64>, k: usize, seed: u64, iters: usize) -> Result<KMeansResult> {
    let n = data.nrows();
    if k == 0 || k > n {
        return Err(NpeffError::Domain(format!("k must lie in 1..={n}, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(data, k, &mut rng);
    let (mut assignments, mut d2) = assign(data, &centroids);
    let mut objective_history = vec![d2.iter().sum::<f64>()];
    for _ in 0..iters {
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &data.row(i));
            counts[c] += 1;
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if d2[b] >= d2[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("k <= n leaves a free point");
                taken[far] = true;
                centroids.row_mut(c).assign(&data.row(far));
            }
        }
        let (next, next_d2) = assign(data, &centroids);
        objective_history.push(next_d2.iter().sum());
        let stable = next == assignments;
        assignments = next;
        d2 = next_d2;
        if stable {
            break;
        }
    }
    let mut memberships = Array2::zeros((n, k));
    for (i, &c) in assignments.iter().enumerate() {
        memberships[[i, c]] = 1.0;
    }
    Ok(KMeansResult {
        assignments,
        distances: d2.into_iter().map(f64::sqrt).collect(),
        centroids,
        memberships,
        objective_history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]` of the finite values; the last bin
/// is closed on the right.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if bins == 0 || finite.is_empty() {
        return Vec::new();
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in finite {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin {
            lower: lo + b as f64 * width,
            upper: lo + (b + 1) as f64 * width,
            count,
        })
        .collect()
}
