//! Independent reference computations shared by the integration tests.
//!
//! Everything here works on dense matrices and plain loops so it shares no
//! code path with the sparse, sharded implementations under test.

#![allow(dead_code)]

use ndarray::Array2;
use npeff::pef::{PefKind, PefSet, SparsePef};
use npeff::sandbox::SandboxModel;
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense `m x m` matrix represented by one sparse LRM PEF.
pub fn dense_fisher_of(pef: &SparsePef, m: usize) -> Vec<Vec<f64>> {
    let rows = pef.to_dense_rows(m);
    let mut f = vec![vec![0.0; m]; m];
    for row in &rows {
        for a in 0..m {
            for b in 0..m {
                f[a][b] += row[a] * row[b];
            }
        }
    }
    f
}

/// `sum_i || F_i - sum_k W_ik g_k g_k^T ||_F^2` with every matrix materialized.
pub fn dense_loss(set: &PefSet, w: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let m = set.m();
    let mut total = 0.0;
    for (i, pef) in set.pefs().iter().enumerate() {
        let f = dense_fisher_of(pef, m);
        for a in 0..m {
            for b in 0..m {
                let mut model = 0.0;
                for k in 0..g.nrows() {
                    model += w[[i, k]] * g[[k, a]] * g[[k, b]];
                }
                let d = f[a][b] - model;
                total += d * d;
            }
        }
    }
    total
}

/// Random LRM set with per-example ranks in `1..=max_rank` and each entry
/// present with probability `density`.
pub fn random_lrm_set<R: Rng>(rng: &mut R, n: usize, max_rank: usize, m: usize, density: f64) -> PefSet {
    let pefs = (0..n)
        .map(|i| {
            let c = rng.random_range(1..=max_rank);
            let mut rows: Vec<Vec<f64>> = (0..c)
                .map(|_| {
                    (0..m)
                        .map(|_| {
                            if rng.random::<f64>() < density {
                                rng.sample::<f64, _>(StandardNormal)
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            if rows.iter().all(|r| r.iter().all(|v| *v == 0.0)) {
                rows[0][rng.random_range(0..m)] = 1.0;
            }
            SparsePef::lrm_from_rows(&rows, i as u64).unwrap()
        })
        .collect();
    PefSet::new(PefKind::Lrm, m, pefs).unwrap()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_nonneg<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>())
}

/// Forward pass written as nested scalar loops over an explicit layer list,
/// reading parameters by their documented flat offsets.
pub fn straight_line_probs(model: &SandboxModel, x: &[f64]) -> Vec<f64> {
    let dims = model.layer_dims();
    let theta = model.theta();
    let layers = dims.len() - 1;
    let mut w_offset = 0;
    let mut w_offsets = Vec::new();
    for l in 0..layers {
        w_offsets.push(w_offset);
        w_offset += dims[l] * dims[l + 1];
    }
    let mut b_offsets = Vec::new();
    let mut b_offset = w_offset;
    for l in 0..layers {
        b_offsets.push(b_offset);
        b_offset += dims[l + 1];
    }
    let mut a = x.to_vec();
    for l in 0..layers {
        let mut z = vec![0.0; dims[l + 1]];
        for o in 0..dims[l + 1] {
            let mut s = theta[b_offsets[l] + o];
            for i in 0..dims[l] {
                s += theta[w_offsets[l] + o * dims[l] + i] * a[i];
            }
            z[o] = s;
        }
        if l + 1 < layers {
            a = z
                .iter()
                .map(|&v| match model.activation() {
                    npeff::sandbox::Activation::Tanh => v.tanh(),
                    npeff::sandbox::Activation::Relu => {
                        if v > 0.0 {
                            v
                        } else {
                            0.0
                        }
                    }
                    npeff::sandbox::Activation::Identity => v,
                })
                .collect();
        } else {
            a = z;
        }
    }
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_prob_of(model: &SandboxModel, x: &[f64], class: usize) -> f64 {
    straight_line_probs(model, x)[class].ln()
}

/// Central finite-difference gradient of `f` over a parameter vector.
pub fn finite_diff<F: Fn(&[f64]) -> f64>(theta: &[f64], h: f64, f: F) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|k| {
            let orig = t[k];
            t[k] = orig + h;
            let up = f(&t);
            t[k] = orig - h;
            let down = f(&t);
            t[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Dense Fisher `sum_y p_y grad log p_y grad log p_y^T` from finite-difference
/// gradients of the straight-line evaluator.
pub fn dense_model_fisher(model: &SandboxModel, x: &[f64]) -> Vec<Vec<f64>> {
    let m = model.num_params();
    let p = straight_line_probs(model, x);
    let mut f = vec![vec![0.0; m]; m];
    for (y, &py) in p.iter().enumerate() {
        let g = finite_diff(model.theta(), 1e-6, |t| {
            log_prob_of(&model.with_theta(t.to_vec()).unwrap(), x, y)
        });
        for a in 0..m {
            for b in 0..m {
                f[a][b] += py * g[a] * g[b];
            }
        }
    }
    f
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

pub fn abs_cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (d / (na * nb)).abs()
}

/// Greedy one-to-one matching of rows of `found` to rows of `truth` by
/// descending `|cos|`. Returns `(found_row, truth_row, |cos|)` triples.
pub fn greedy_match(found: &Array2<f64>, truth: &Array2<f64>) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for j in 0..found.nrows() {
        for k in 0..truth.nrows() {
            let c = abs_cos(&found.row(j).to_vec(), &truth.row(k).to_vec());
            pairs.push((j, k, c));
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_f = vec![false; found.nrows()];
    let mut used_t = vec![false; truth.nrows()];
    let mut out = Vec::new();
    for (j, k, c) in pairs {
        if !used_f[j] && !used_t[k] {
            used_f[j] = true;
            used_t[k] = true;
            out.push((j, k, c));
        }
    }
    out
}
