//! Block-structured classifier whose examples each exercise one block.
//!
//! Layer 1 is block-diagonal: hidden block `b` only reads input block `b`.
//! Hidden units are ReLUs with a strictly negative bias, so for an input that
//! is zero outside block `b` every other block's hidden units sit below their
//! threshold. They output 0 and pass back no gradient, so neither their
//! incoming weights (including the zero cross-block entries) nor their
//! outgoing weights are touched. Only the output biases are shared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Activation, SandboxModel};
use crate::error::{NpeffError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModularModelSpec {
    pub num_blocks: usize,
    pub block_input_width: usize,
    pub block_hidden_width: usize,
    pub num_classes: usize,
    pub num_examples: usize,
    /// Standard deviation of the non-zero input coordinates.
    #[serde(default = "default_input_scale")]
    pub input_scale: f64,
    /// Gain applied to the `1/sqrt(fan_in)` weight initialization.
    #[serde(default = "default_weight_gain")]
    pub weight_gain: f64,
    /// Hidden biases are set to `-hidden_threshold`; must be positive.
    #[serde(default = "default_hidden_threshold")]
    pub hidden_threshold: f64,
}

fn default_input_scale() -> f64 {
    1.0
}

fn default_weight_gain() -> f64 {
    2.0
}

fn default_hidden_threshold() -> f64 {
    0.1
}

impl ModularModelSpec {
    pub fn new(
        num_blocks: usize,
        block_input_width: usize,
        block_hidden_width: usize,
        num_classes: usize,
        num_examples: usize,
    ) -> Self {
        Self {
            num_blocks,
            block_input_width,
            block_hidden_width,
            num_classes,
            num_examples,
            input_scale: default_input_scale(),
            weight_gain: default_weight_gain(),
            hidden_threshold: default_hidden_threshold(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_blocks == 0
            || self.block_input_width == 0
            || self.block_hidden_width == 0
            || self.num_classes < 2
        {
            return Err(NpeffError::Domain(
                "modular spec needs positive block sizes and at least two classes".into(),
            ));
        }
        if !(self.hidden_threshold > 0.0) {
            return Err(NpeffError::Domain(
                "hidden threshold must be positive so idle blocks stay inactive".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        vec![
            self.num_blocks * self.block_input_width,
            self.num_blocks * self.block_hidden_width,
            self.num_classes,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModularInstance {
    pub model: SandboxModel,
    pub inputs: Vec<Vec<f64>>,
    /// Block excited by each input.
    pub block_labels: Vec<usize>,
}

impl ModularInstance {
    /// Parameter indices of block `b`'s first-layer weights.
    pub fn block_weight_indices(&self, spec: &ModularModelSpec, block: usize) -> Vec<usize> {
        let n_in = self.model.input_dim();
        let start = self.model.weight_range(0).start;
        let mut out = Vec::new();
        for h in block * spec.block_hidden_width..(block + 1) * spec.block_hidden_width {
            for i in block * spec.block_input_width..(block + 1) * spec.block_input_width {
                out.push(start + h * n_in + i);
            }
        }
        out
    }

    /// Every parameter that only block `b`'s inputs can move: its first-layer
    /// weights, its hidden biases and the output weights reading its hidden
    /// units. Output biases are shared and belong to no block.
    pub fn block_parameter_indices(&self, spec: &ModularModelSpec, block: usize) -> Vec<usize> {
        let mut out = self.block_weight_indices(spec, block);
        let hidden = block * spec.block_hidden_width..(block + 1) * spec.block_hidden_width;
        let b1 = self.model.bias_range(0).start;
        out.extend(hidden.clone().map(|h| b1 + h));
        let w2 = self.model.weight_range(1).start;
        let n_hidden = self.model.layer_dims()[1];
        for c in 0..self.model.num_classes() {
            out.extend(hidden.clone().map(|h| w2 + c * n_hidden + h));
        }
        out.sort_unstable();
        out
    }
}

pub fn generate_modular_instance(spec: &ModularModelSpec, seed: u64) -> Result<ModularInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SandboxModel::zeros(spec.layer_dims(), Activation::Relu)?;
    let n_in = model.input_dim();
    let hidden = spec.num_blocks * spec.block_hidden_width;

    let first = Normal::new(0.0, spec.weight_gain / (spec.block_input_width as f64).sqrt())
        .map_err(|e| NpeffError::Domain(e.to_string()))?;
    let w1 = model.weight_range(0);
    for b in 0..spec.num_blocks {
        for h in b * spec.block_hidden_width..(b + 1) * spec.block_hidden_width {
            for i in b * spec.block_input_width..(b + 1) * spec.block_input_width {
                model.theta_mut()[w1.start + h * n_in + i] = first.sample(&mut rng);
            }
        }
    }
    let b1 = model.bias_range(0);
    for v in &mut model.theta_mut()[b1] {
        *v = -spec.hidden_threshold;
    }
    let second = Normal::new(0.0, spec.weight_gain / (spec.block_hidden_width as f64).sqrt())
        .map_err(|e| NpeffError::Domain(e.to_string()))?;
    let w2 = model.weight_range(1);
    for v in &mut model.theta_mut()[w2] {
        *v = second.sample(&mut rng);
    }
    let b2 = model.bias_range(1);
    for v in &mut model.theta_mut()[b2] {
        *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    debug_assert_eq!(model.weight_range(1).len(), hidden * spec.num_classes);

    let mut inputs = Vec::with_capacity(spec.num_examples);
    let mut block_labels = Vec::with_capacity(spec.num_examples);
    for i in 0..spec.num_examples {
        let b = i % spec.num_blocks;
        let mut x = vec![0.0; n_in];
        for v in &mut x[b * spec.block_input_width..(b + 1) * spec.block_input_width] {
            *v = spec.input_scale * rng.sample::<f64, _>(StandardNormal);
        }
        inputs.push(x);
        block_labels.push(b);
    }
    Ok(ModularInstance {
        model,
        inputs,
        block_labels,
    })
}
