//! Planted low-rank PEF sets with known components.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{NpeffError, Result};
use crate::pef::{PefKind, PefSet, SparsePef};

const MAX_DRAWS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub num_components: usize,
    pub param_dim: usize,
    pub ranks_per_example: usize,
    pub num_examples: usize,
    pub noise_scale: f64,
    pub max_pairwise_cos: f64,
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_components == 0 || self.param_dim == 0 || self.ranks_per_example == 0 {
            return Err(NpeffError::Domain(
                "planted spec dimensions must be positive".into(),
            ));
        }
        if self.num_components > self.param_dim {
            return Err(NpeffError::Domain(format!(
                "{} components cannot be placed in dimension {}",
                self.num_components, self.param_dim
            )));
        }
        if self.ranks_per_example > self.num_components {
            return Err(NpeffError::Domain(format!(
                "k_act = {} exceeds r* = {}",
                self.ranks_per_example, self.num_components
            )));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(NpeffError::Domain("noise scale must be non-negative".into()));
        }
        if !(self.max_pairwise_cos > 0.0 && self.max_pairwise_cos < 1.0) {
            return Err(NpeffError::Domain(
                "max pairwise cosine must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth for a planted problem: unnormalized LRM PEFs with
/// `F_i = sum_j W*_ij g*_j g*_j^T` (plus noise when requested).
#[derive(Debug, Clone)]
pub struct PlantedInstance {
    pub pefs: PefSet,
    pub w_true: Array2<f64>,
    pub g_true: Array2<f64>,
}

impl PlantedInstance {
    /// Draw further examples that only use components from `allowed`.
    /// Example ids continue from `first_id`.
    pub fn sample_examples<R: Rng + ?Sized>(
        &self,
        allowed: &[usize],
        ranks_per_example: usize,
        num_examples: usize,
        noise_scale: f64,
        first_id: u64,
        rng: &mut R,
    ) -> Result<(PefSet, Array2<f64>)> {
        planted_examples(
            &self.g_true,
            allowed,
            ranks_per_example,
            num_examples,
            noise_scale,
            first_id,
            rng,
        )
    }
}

/// Unit rows with pairwise `|cos| <= max_cos`, by rejection sampling.
pub fn sample_separated_directions<R: Rng + ?Sized>(
    count: usize,
    dim: usize,
    max_cos: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut draws = 0;
    while rows.len() < count {
        if draws >= MAX_DRAWS {
            return Err(NpeffError::Infeasible(format!(
                "could not place {count} directions with |cos| <= {max_cos} in dimension {dim} after {MAX_DRAWS} draws"
            )));
        }
        draws += 1;
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let separated = rows
            .iter()
            .all(|u| u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs() <= max_cos);
        if separated {
            rows.push(v);
        }
    }
    Ok(Array2::from_shape_vec((count, dim), rows.concat()).expect("exact length"))
}

fn planted_examples<R: Rng + ?Sized>(
    g_true: &Array2<f64>,
    allowed: &[usize],
    ranks_per_example: usize,
    num_examples: usize,
    noise_scale: f64,
    first_id: u64,
    rng: &mut R,
) -> Result<(PefSet, Array2<f64>)> {
    let (r, m) = g_true.dim();
    if ranks_per_example == 0 || ranks_per_example > allowed.len() {
        return Err(NpeffError::Domain(format!(
            "cannot activate {ranks_per_example} of {} allowed components",
            allowed.len()
        )));
    }
    if let Some(&bad) = allowed.iter().find(|&&j| j >= r) {
        return Err(NpeffError::ComponentIndex { index: bad, rank: r });
    }
    let weight_dist = Uniform::new(0.5, 1.5).expect("valid range");
    let noise = Normal::new(0.0, noise_scale).map_err(|e| NpeffError::Domain(e.to_string()))?;
    let mut w = Array2::zeros((num_examples, r));
    let mut pefs = Vec::with_capacity(num_examples);
    let mut labels = Vec::with_capacity(num_examples);
    for i in 0..num_examples {
        let mut active: Vec<usize> = sample(rng, allowed.len(), ranks_per_example)
            .into_iter()
            .map(|k| allowed[k])
            .collect();
        active.sort_unstable();
        let mut rows = Vec::with_capacity(active.len());
        for &j in &active {
            let weight: f64 = weight_dist.sample(rng);
            w[[i, j]] = weight;
            let scale = weight.sqrt();
            let row: Vec<f64> = g_true
                .row(j)
                .iter()
                .map(|&g| {
                    let e = if noise_scale > 0.0 { noise.sample(rng) } else { 0.0 };
                    scale * g + e
                })
                .collect();
            rows.push(row);
        }
        let dominant = active
            .iter()
            .copied()
            .fold(active[0], |best, j| if w[[i, j]] > w[[i, best]] { j } else { best });
        labels.push(dominant as i64);
        pefs.push(SparsePef::lrm_from_rows(&rows, first_id + i as u64)?);
    }
    let set = PefSet::new(PefKind::Lrm, m, pefs)?.with_labels(Some(labels), None)?;
    Ok((set, w))
}

/// Build a planted instance; labels hold each example's dominant component.
pub fn generate_planted_pefs(spec: &PlantedSpec, seed: u64) -> Result<PlantedInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g_true = sample_separated_directions(
        spec.num_components,
        spec.param_dim,
        spec.max_pairwise_cos,
        &mut rng,
    )?;
    let all: Vec<usize> = (0..spec.num_components).collect();
    let (pefs, w_true) = planted_examples(
        &g_true,
        &all,
        spec.ranks_per_example,
        spec.num_examples,
        spec.noise_scale,
        0,
        &mut rng,
    )?;
    Ok(PlantedInstance {
        pefs,
        w_true,
        g_true,
    })
}
