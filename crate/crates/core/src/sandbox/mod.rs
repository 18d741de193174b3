//! Self-contained softmax classifier with exact per-class gradients.
//!
//! The model is a plain multilayer perceptron whose parameters live in one
//! flat vector `theta`. Flattening order: every weight matrix layer by layer
//! (shape `out x in`, row-major), followed by every bias vector layer by layer.
//! External tools that map PEF parameter indices back to tensors rely on this
//! order, so it must not change.

mod modular;
mod planted;

pub use modular::{generate_modular_instance, ModularInstance, ModularModelSpec};
pub use planted::{generate_planted_pefs, PlantedInstance, PlantedSpec};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NpeffError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Multilayer softmax classifier over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxModel {
    layer_dims: Vec<usize>,
    activation: Activation,
    theta: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `activations[l]` is the input to layer `l`; `activations[0] == x`.
    activations: Vec<Vec<f64>>,
    /// Pre-activation of every layer; the last entry holds the logits.
    pre_activations: Vec<Vec<f64>>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl ForwardPass {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn logits(&self) -> &[f64] {
        self.pre_activations.last().expect("at least one layer")
    }
}

/// Number of parameters implied by `layer_dims`.
pub fn param_count(layer_dims: &[usize]) -> usize {
    layer_dims
        .windows(2)
        .map(|w| w[1] * w[0] + w[1])
        .sum()
}

impl SandboxModel {
    pub fn new(layer_dims: Vec<usize>, activation: Activation, theta: Vec<f64>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(NpeffError::Domain(
                "a model needs at least an input and an output layer".into(),
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(NpeffError::Domain("layer widths must be positive".into()));
        }
        let m = param_count(&layer_dims);
        if theta.len() != m {
            return Err(NpeffError::Shape {
                expected: m,
                got: theta.len(),
            });
        }
        Ok(Self {
            layer_dims,
            activation,
            theta,
        })
    }

    pub fn zeros(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let m = param_count(&layer_dims);
        Self::new(layer_dims, activation, vec![0.0; m])
    }

    /// Random model with weights `N(0, 1/fan_in)` and biases `N(0, 0.1^2)`.
    pub fn random<R: Rng + ?Sized>(
        layer_dims: Vec<usize>,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, activation)?;
        let bias_dist = Normal::new(0.0, 0.1).expect("valid std");
        for layer in 0..model.num_layers() {
            let fan_in = model.layer_dims[layer];
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
            let range = model.weight_range(layer);
            for v in &mut model.theta[range] {
                *v = dist.sample(rng);
            }
            let range = model.bias_range(layer);
            for v in &mut model.theta[range] {
                *v = bias_dist.sample(rng);
            }
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Same architecture with a different parameter vector.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.layer_dims.clone(), self.activation, theta)
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("non-empty dims")
    }

    /// Index range of layer `layer`'s weight matrix inside `theta`.
    pub fn weight_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start: usize = self.layer_dims[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1])
            .sum();
        start..start + self.layer_dims[layer] * self.layer_dims[layer + 1]
    }

    /// Index range of layer `layer`'s bias vector inside `theta`.
    pub fn bias_range(&self, layer: usize) -> std::ops::Range<usize> {
        let weights: usize = self.layer_dims.windows(2).map(|w| w[0] * w[1]).sum();
        let start = weights + self.layer_dims[1..layer + 1].iter().sum::<usize>();
        start..start + self.layer_dims[layer + 1]
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims && self.activation == other.activation
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(NpeffError::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NpeffError::Domain("input contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn forward_pass(&self, x: &[f64]) -> Result<ForwardPass> {
        self.check_input(x)?;
        let layers = self.num_layers();
        let mut activations = Vec::with_capacity(layers);
        let mut pre_activations = Vec::with_capacity(layers);
        let mut current = x.to_vec();
        for layer in 0..layers {
            let (n_in, n_out) = (self.layer_dims[layer], self.layer_dims[layer + 1]);
            let weights = &self.theta[self.weight_range(layer)];
            let bias = &self.theta[self.bias_range(layer)];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    row.iter().zip(&current).map(|(w, a)| w * a).sum::<f64>() + bias[o]
                })
                .collect();
            let next = if layer + 1 < layers {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            activations.push(std::mem::replace(&mut current, next));
            pre_activations.push(z);
        }
        let log_probs = log_softmax(pre_activations.last().expect("non-empty"));
        let probs = log_probs.iter().map(|v| v.exp()).collect();
        Ok(ForwardPass {
            activations,
            pre_activations,
            probs,
            log_probs,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_pass(x)?.probs)
    }

    /// Pull a gradient with respect to the logits back onto `theta`.
    pub fn backprop_logits(&self, pass: &ForwardPass, d_logits: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.num_params()];
        let mut dz = d_logits.to_vec();
        for layer in (0..self.num_layers()).rev() {
            let n_in = self.layer_dims[layer];
            let input = &pass.activations[layer];
            let w_range = self.weight_range(layer);
            let b_range = self.bias_range(layer);
            for (o, &d) in dz.iter().enumerate() {
                let row = &mut grad[w_range.start + o * n_in..w_range.start + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g = d * a;
                }
            }
            grad[b_range].copy_from_slice(&dz);
            if layer > 0 {
                let weights = &self.theta[w_range];
                let pre = &pass.pre_activations[layer - 1];
                let mut prev = vec![0.0; n_in];
                for (o, &d) in dz.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, w) in prev.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                        *p += w * d;
                    }
                }
                for (p, &z) in prev.iter_mut().zip(pre) {
                    *p *= self.activation.derivative(z);
                }
                dz = prev;
            }
        }
        grad
    }

    /// Gradient of `log p(y_class | x)` with respect to `theta`.
    pub fn per_class_log_grad(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        let pass = self.forward_pass(x)?;
        self.class_log_grad(&pass, class)
    }

    pub fn class_log_grad(&self, pass: &ForwardPass, class: usize) -> Result<Vec<f64>> {
        let c = self.num_classes();
        if class >= c {
            return Err(NpeffError::ClassIndex {
                index: class,
                classes: c,
            });
        }
        // d log p_j / dz = e_j - p
        let d_logits: Vec<f64> = pass
            .probs
            .iter()
            .enumerate()
            .map(|(k, &p)| if k == class { 1.0 - p } else { -p })
            .collect();
        Ok(self.backprop_logits(pass, &d_logits))
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Classes kept when forming a PEF: every class with `p >= eps`, plus the
/// argmax class (lowest index on ties) so the result is never empty.
pub fn retained_classes(probs: &[f64], eps: f64) -> Vec<usize> {
    let argmax = probs
        .iter()
        .enumerate()
        .fold(0, |best, (k, &p)| if p > probs[best] { k } else { best });
    (0..probs.len())
        .filter(|&k| k == argmax || probs[k] >= eps)
        .collect()
}

/// Dense low-rank factor of one example's PEF: `F = rows^T rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrmFactor {
    pub rows: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(NpeffError::Domain(format!("eps must lie in [0, 1), got {eps}")));
    }
    Ok(())
}

/// Rows `sqrt(p_j) * grad log p_j` for each retained class. Probabilities of
/// the retained classes are not renormalized.
pub fn compute_lrm_pef(model: &SandboxModel, x: &[f64], eps: f64) -> Result<LrmFactor> {
    check_eps(eps)?;
    let pass = model.forward_pass(x)?;
    let classes = retained_classes(pass.probs(), eps);
    let rows = classes
        .iter()
        .map(|&j| {
            let scale = pass.probs[j].sqrt();
            let mut g = model.class_log_grad(&pass, j)?;
            g.iter_mut().for_each(|v| *v *= scale);
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LrmFactor { rows, classes })
}

/// `f = sum_j p_j (grad log p_j)^2` over the retained classes.
pub fn compute_diag_pef(model: &SandboxModel, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    let pass = model.forward_pass(x)?;
    let mut f = vec![0.0; model.num_params()];
    for j in retained_classes(pass.probs(), eps) {
        let p = pass.probs[j];
        let g = model.class_log_grad(&pass, j)?;
        for (fi, gi) in f.iter_mut().zip(&g) {
            *fi += p * gi * gi;
        }
    }
    Ok(f)
}

/// `KL(p || q)` between two distributions given as log-probabilities.
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// `KL(p_model(.|x) || q_model(.|x))` over the output classes.
pub fn kl_divergence(model_p: &SandboxModel, model_q: &SandboxModel, x: &[f64]) -> Result<f64> {
    if !model_p.same_architecture(model_q) {
        return Err(NpeffError::Architecture(format!(
            "{:?}/{:?} vs {:?}/{:?}",
            model_p.layer_dims, model_p.activation, model_q.layer_dims, model_q.activation
        )));
    }
    let p = model_p.forward_pass(x)?;
    let q = model_q.forward_pass(x)?;
    Ok(kl_from_log_probs(p.log_probs(), q.log_probs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_zero() -> SandboxModel {
        SandboxModel::zeros(vec![2, 2], Activation::Identity).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = linear_zero().forward(&[0.3, -2.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn identity_weights_give_closed_form_softmax() {
        let m = SandboxModel::new(
            vec![2, 2],
            Activation::Identity,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let p = m.forward(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn layout_ranges_cover_theta() {
        let m = SandboxModel::zeros(vec![3, 4, 2], Activation::Tanh).unwrap();
        assert_eq!(m.num_params(), 3 * 4 + 4 * 2 + 4 + 2);
        assert_eq!(m.weight_range(0), 0..12);
        assert_eq!(m.weight_range(1), 12..20);
        assert_eq!(m.bias_range(0), 20..24);
        assert_eq!(m.bias_range(1), 24..26);
    }

    #[test]
    fn hand_backprop_linear() {
        let g = linear_zero().per_class_log_grad(&[1.0, 0.0], 0).unwrap();
        assert_eq!(g, vec![0.5, 0.0, -0.5, 0.0, 0.5, -0.5]);
    }

    #[test]
    fn input_errors() {
        let m = linear_zero();
        assert!(matches!(m.forward(&[1.0]), Err(NpeffError::Shape { .. })));
        assert!(matches!(
            m.forward(&[f64::NAN, 0.0]),
            Err(NpeffError::Domain(_))
        ));
        assert!(matches!(
            m.per_class_log_grad(&[1.0, 0.0], 2),
            Err(NpeffError::ClassIndex { .. })
        ));
        assert!(SandboxModel::new(vec![2, 2], Activation::Tanh, vec![0.0; 5]).is_err());
    }

    #[test]
    fn lrm_pef_of_zero_linear_model() {
        let a = compute_lrm_pef(&linear_zero(), &[1.0, 0.0], 0.0).unwrap();
        let s = 0.5f64.sqrt();
        assert_eq!(a.classes, vec![0, 1]);
        let want0: Vec<f64> = [0.5, 0.0, -0.5, 0.0, 0.5, -0.5].iter().map(|v| v * s).collect();
        let want1: Vec<f64> = [-0.5, 0.0, 0.5, 0.0, -0.5, 0.5].iter().map(|v| v * s).collect();
        for (got, want) in a.rows[0].iter().zip(&want0).chain(a.rows[1].iter().zip(&want1)) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn high_eps_keeps_argmax_only() {
        let a = compute_lrm_pef(&linear_zero(), &[1.0, 0.0], 0.9).unwrap();
        assert_eq!(a.classes, vec![0]);
        assert!(compute_lrm_pef(&linear_zero(), &[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn diag_pef_of_zero_linear_model() {
        let f = compute_diag_pef(&linear_zero(), &[1.0, 0.0], 0.0).unwrap();
        let want = [0.25, 0.0, 0.25, 0.0, 0.25, 0.25];
        for (g, w) in f.iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_model_has_vanishing_fisher() {
        let m = SandboxModel::new(
            vec![1, 2],
            Activation::Identity,
            vec![0.0, 0.0, 60.0, -60.0],
        )
        .unwrap();
        let f = compute_diag_pef(&m, &[0.5], 0.0).unwrap();
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-6, "norm {norm}");
    }

    #[test]
    fn kl_closed_form() {
        let p = [0.5f64.ln(), 0.5f64.ln()];
        let q = [0.9f64.ln(), 0.1f64.ln()];
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_from_log_probs(&p, &q) - want).abs() < 1e-15);
        assert!((want - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kl_self_is_zero_and_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = SandboxModel::random(vec![3, 4, 2], Activation::Tanh, &mut rng).unwrap();
        assert_eq!(kl_divergence(&a, &a, &[0.1, 0.2, 0.3]).unwrap(), 0.0);
        let b = SandboxModel::random(vec![3, 5, 2], Activation::Tanh, &mut rng).unwrap();
        assert!(matches!(
            kl_divergence(&a, &b, &[0.1, 0.2, 0.3]),
            Err(NpeffError::Architecture(_))
        ));
    }
}
