//! Coefficient fitting against frozen pseudo-Fishers, and component-set
//! expansion on top of a frozen base decomposition.

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomposition::{config_snapshot, Decomposition, LossRecord};
use crate::diag::dense_matrix;
use crate::error::{NpeffError, Result};
use crate::lrm::{multiplicative_step, random_components, random_uniform, LrmProblem};
use crate::pef::{PefKind, PefSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub seed: u64,
    pub workers: usize,
    pub denominator_guard: f64,
    pub deterministic_reduction: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            seed: 0,
            workers: 1,
            denominator_guard: 1e-12,
            deterministic_reduction: true,
        }
    }
}

/// Fitted coefficients plus the objective after every step (`losses[0]` is
/// the loss at the initial `W`).
#[derive(Debug, Clone)]
pub struct CoefficientFit {
    pub w: Array2<f64>,
    pub losses: Vec<f64>,
}

impl CoefficientFit {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }
}

/// Fit `W` for a new PEF set with the decomposition's components frozen,
/// starting from `W ~ U[0, 1]`.
pub fn fit_coefficients(
    set: &PefSet,
    dec: &Decomposition,
    config: &FitConfig,
) -> Result<CoefficientFit> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    fit_with_rng(set, dec, config, &mut rng)
}

fn fit_with_rng<R: Rng + ?Sized>(
    set: &PefSet,
    dec: &Decomposition,
    config: &FitConfig,
    rng: &mut R,
) -> Result<CoefficientFit> {
    let w0 = random_uniform(set.len(), dec.rank(), rng);
    fit_coefficients_from(set, dec, w0, config)
}

/// Coefficient fitting from a caller-supplied starting `W`. Everything that
/// does not depend on `W` is computed once up front.
pub fn fit_coefficients_from(
    set: &PefSet,
    dec: &Decomposition,
    w0: Array2<f64>,
    config: &FitConfig,
) -> Result<CoefficientFit> {
    if set.kind() != dec.kind {
        return Err(NpeffError::Domain(format!(
            "cannot fit {} PEFs to a {} decomposition",
            set.kind(),
            dec.kind
        )));
    }
    if w0.dim() != (set.len(), dec.rank()) {
        return Err(NpeffError::Shape {
            expected: set.len() * dec.rank(),
            got: w0.len(),
        });
    }
    let mapped = dec.index_map.apply(set)?;
    let guard = config.denominator_guard;
    let mut w = w0;
    let mut losses = Vec::with_capacity(config.steps + 1);
    match dec.kind {
        PefKind::Lrm => {
            let problem = LrmProblem::new(&mapped, config.workers, config.deterministic_reduction)?;
            let b = problem.compute_b(&dec.components)?;
            let ggt = problem.gram(&dec.components)?;
            let num = problem.numerator(&b);
            let sq = &ggt * &ggt;
            losses.push(problem.loss_cached(&w, &num, &sq));
            for step in 0..config.steps {
                let den = w.dot(&sq);
                w = multiplicative_step(&w, &num, &den, guard, 0..w.ncols())
                    .map_err(|e| e.at_step(step))?;
                losses.push(problem.loss_cached(&w, &num, &sq));
            }
        }
        PefKind::Diag => {
            let v = dense_matrix(&mapped)?;
            let h = &dec.components;
            let vht = v.dot(&h.t());
            let hht = h.dot(&h.t());
            let v_sq: f64 = v.iter().map(|x| x * x).sum();
            let loss = |w: &Array2<f64>| {
                let cross: f64 = (w * &vht).sum();
                let quad: f64 = (&w.dot(&hht) * w).sum();
                (v_sq - 2.0 * cross + quad).max(0.0)
            };
            losses.push(loss(&w));
            for step in 0..config.steps {
                let den = w.dot(&hht) + guard;
                let next = &w * &vht / &den;
                if let Some(((row, col), _)) = next.indexed_iter().find(|(_, x)| !x.is_finite()) {
                    return Err(NpeffError::Numerical {
                        step: Some(step),
                        row,
                        col,
                    });
                }
                w = next;
                losses.push(loss(&w));
            }
        }
    }
    Ok(CoefficientFit { w, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    /// Zero disables the optional third stage.
    pub stage3_steps: usize,
    pub stage3_lr: f64,
    /// Coefficient-fitting steps used when the filtered examples are not rows
    /// of the base decomposition.
    pub fit_steps: usize,
    pub seed: u64,
    pub workers: usize,
    pub denominator_guard: f64,
    pub deterministic_reduction: bool,
    pub log_every: usize,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 250,
            stage1_lr: 1e-3,
            stage2_steps: 1000,
            stage2_lr: 3e-3,
            stage3_steps: 0,
            stage3_lr: 3e-3,
            fit_steps: 200,
            seed: 0,
            workers: 1,
            denominator_guard: 1e-12,
            deterministic_reduction: true,
            log_every: 50,
        }
    }
}

/// Starting coefficients for the base components on the filtered examples:
/// copied rows when every example id is known to the base, fitted otherwise.
fn base_coefficients<R: Rng + ?Sized>(
    filtered: &PefSet,
    base: &Decomposition,
    config: &ExpansionConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let ids = filtered.example_ids();
    let positions: Option<Vec<usize>> = ids
        .iter()
        .map(|id| base.example_ids.iter().position(|b| b == id))
        .collect();
    match positions {
        Some(pos) if !base.example_ids.is_empty() => Ok(base.w.select(Axis(0), &pos)),
        _ => {
            let fit = FitConfig {
                steps: config.fit_steps,
                seed: config.seed,
                workers: config.workers,
                denominator_guard: config.denominator_guard,
                deterministic_reduction: config.deterministic_reduction,
            };
            Ok(fit_with_rng(filtered, base, &fit, rng)?.w)
        }
    }
}

/// Add `r_new` components specialized to `filtered`, keeping every base
/// component row frozen.
///
/// Stage 1 trains only the new rows of `G` with all coefficients fixed.
/// Stage 2 alternates updates of the new `W` columns and new `G` rows.
/// The optional stage 3 updates every `W` column and the new `G` rows.
pub fn expand_components(
    filtered: &PefSet,
    base: &Decomposition,
    r_new: usize,
    config: &ExpansionConfig,
) -> Result<Decomposition> {
    if base.kind != PefKind::Lrm {
        return Err(NpeffError::Domain(
            "component expansion is defined for LRM decompositions".into(),
        ));
    }
    if filtered.m() != base.index_map.original_dim() {
        return Err(NpeffError::IndexMap(format!(
            "filtered set has m = {} but the base decomposition was built over m = {}",
            filtered.m(),
            base.index_map.original_dim()
        )));
    }
    if config.log_every == 0 {
        return Err(NpeffError::Domain("log_every must be positive".into()));
    }
    let mapped = base.index_map.apply(filtered)?;
    let problem = LrmProblem::new(&mapped, config.workers, config.deterministic_reduction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let r_base = base.rank();
    let r = r_base + r_new;
    let m = problem.m();
    let base_w = base_coefficients(filtered, base, config, &mut rng)?;
    let new_w = random_uniform(filtered.len(), r_new, &mut rng);
    let new_g = random_components(r_new, m, r, m, &mut rng);
    let mut w = concatenate![Axis(1), base_w, new_w];
    let mut g = concatenate![Axis(0), base.components.clone(), new_g];
    let new_rows = r_base..r;
    let guard = config.denominator_guard;

    let mut history = Vec::new();
    if r_new > 0 {
        let stages = [
            (config.stage1_steps, config.stage1_lr, None),
            (config.stage2_steps, config.stage2_lr, Some(r_base..r)),
            (config.stage3_steps, config.stage3_lr, Some(0..r)),
        ];
        let mut step = 0;
        for (steps, lr, w_cols) in stages {
            for _ in 0..steps {
                let b = problem.compute_b(&g)?;
                let ggt = problem.gram(&g)?;
                if step % config.log_every == 0 {
                    history.push(LossRecord {
                        step,
                        loss: problem.loss_from(&w, &b, &ggt)?,
                    });
                }
                if let Some(cols) = w_cols.clone() {
                    w = problem
                        .w_update_columns(&w, &b, &ggt, guard, cols)
                        .map_err(|e| e.at_step(step))?;
                }
                g = problem
                    .g_update_rows(&w, &g, &b, &ggt, lr, new_rows.clone())
                    .map_err(|e| e.at_step(step))?;
                step += 1;
            }
        }
        history.push(LossRecord {
            step,
            loss: problem.loss(&w, &g)?,
        });
    }

    let mut dec = Decomposition::new(PefKind::Lrm, w, g, base.index_map.clone())?;
    dec.loss_history = history;
    dec.example_ids = filtered.example_ids();
    dec.frozen_components = r_base;
    dec.config = serde_json::json!({
        "expansion": config_snapshot(config, config.deterministic_reduction)?,
        "new_components": r_new,
        "base_config": base.config,
    });
    Ok(dec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pef::{ColumnIndexMap, SparsePef};
    use ndarray::array;

    fn unit_rank1_set(g: &[f64]) -> PefSet {
        PefSet::new(
            PefKind::Lrm,
            g.len(),
            vec![SparsePef::lrm_from_rows(&[g.to_vec()], 0).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn zero_steps_returns_init() {
        let g = [0.6, 0.8, 0.0];
        let set = unit_rank1_set(&g);
        let dec = Decomposition::new(
            PefKind::Lrm,
            array![[1.0]],
            array![[0.6, 0.8, 0.0]],
            ColumnIndexMap::identity(3),
        )
        .unwrap();
        let config = FitConfig {
            steps: 0,
            seed: 3,
            ..FitConfig::default()
        };
        let fit = fit_coefficients(&set, &dec, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(fit.w, random_uniform(1, 1, &mut rng));
        assert_eq!(fit.losses.len(), 1);
    }

    #[test]
    fn kind_and_dimension_mismatch() {
        let set = unit_rank1_set(&[1.0, 0.0]);
        let dec = Decomposition::new(
            PefKind::Diag,
            array![[1.0]],
            array![[1.0, 0.0]],
            ColumnIndexMap::identity(2),
        )
        .unwrap();
        assert!(fit_coefficients(&set, &dec, &FitConfig::default()).is_err());
        let dec = Decomposition::new(
            PefKind::Lrm,
            array![[1.0]],
            array![[1.0, 0.0, 0.0]],
            ColumnIndexMap::identity(3),
        )
        .unwrap();
        assert!(matches!(
            fit_coefficients(&set, &dec, &FitConfig::default()),
            Err(NpeffError::IndexMap(_))
        ));
        assert!(matches!(
            expand_components(&set, &dec, 1, &ExpansionConfig::default()),
            Err(NpeffError::IndexMap(_))
        ));
    }

    #[test]
    fn diag_fit_recovers_single_component() {
        let h = array![[1.0, 0.0, 2.0], [0.0, 3.0, 0.0]];
        let pef = SparsePef::diag_from_dense(&[0.5, 0.0, 1.0], 0).unwrap();
        let set = PefSet::new(PefKind::Diag, 3, vec![pef]).unwrap();
        let dec = Decomposition::new(
            PefKind::Diag,
            array![[1.0, 1.0]],
            h,
            ColumnIndexMap::identity(3),
        )
        .unwrap();
        let fit = fit_coefficients(
            &set,
            &dec,
            &FitConfig {
                steps: 500,
                ..FitConfig::default()
            },
        )
        .unwrap();
        assert!((fit.w[[0, 0]] - 0.5).abs() < 1e-6);
        assert!(fit.w[[0, 1]] < 1e-6);
        assert!(fit.losses.windows(2).all(|p| p[1] <= p[0] + 1e-12));
    }
}
