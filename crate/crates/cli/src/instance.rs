//! Model-plus-inputs JSON written by `gen-pefs` and read by the stages that
//! need to run the model. PEF example ids index into `inputs`.

use std::fs;
use std::path::Path;

use npeff::pef::{decode_decomposition, decode_pef_set, encode_decomposition, encode_pef_set};
use npeff::sandbox::SandboxModel;
use npeff::{Decomposition, NpeffError, PefSet};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct Instance {
    pub model: SandboxModel,
    pub inputs: Vec<Vec<f64>>,
    #[serde(default)]
    pub labels: Option<Vec<i64>>,
}

impl Instance {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let raw: Instance = serde_json::from_str(&text)?;
        // deserialization bypasses the constructor's shape checks
        let model = SandboxModel::new(
            raw.model.layer_dims().to_vec(),
            raw.model.activation(),
            raw.model.theta().to_vec(),
        )?;
        for x in &raw.inputs {
            if x.len() != model.input_dim() {
                return Err(NpeffError::Shape {
                    expected: model.input_dim(),
                    got: x.len(),
                }
                .into());
            }
        }
        Ok(Self { model, ..raw })
    }

    /// Inputs for the given example ids, in order.
    pub fn inputs_for(&self, ids: &[u64]) -> Result<Vec<Vec<f64>>, CliError> {
        ids.iter()
            .map(|&id| {
                usize::try_from(id)
                    .ok()
                    .and_then(|i| self.inputs.get(i))
                    .cloned()
                    .ok_or_else(|| {
                        NpeffError::Domain(format!(
                            "example id {id} has no input in the instance ({} inputs)",
                            self.inputs.len()
                        ))
                        .into()
                    })
            })
            .collect()
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_pefs(path: &Path) -> Result<PefSet, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_pef_set(&bytes).map_err(|e| in_file(path, e))
}

pub fn write_pefs(set: &PefSet, path: &Path) -> Result<(), CliError> {
    fs::write(path, encode_pef_set(set)).map_err(|e| CliError::io(path, e))
}

pub fn read_decomposition(path: &Path) -> Result<Decomposition, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_decomposition(&bytes).map_err(|e| in_file(path, e))
}

pub fn write_decomposition(dec: &Decomposition, path: &Path) -> Result<(), CliError> {
    fs::write(path, encode_decomposition(dec)?).map_err(|e| CliError::io(path, e))
}

fn in_file(path: &Path, e: NpeffError) -> CliError {
    match e {
        NpeffError::Format { offset, message } => NpeffError::Format {
            offset,
            message: format!("{message} (in {})", path.display()),
        }
        .into(),
        other => other.into(),
    }
}

/// Rows of `dec` must line up with the examples of `set`.
pub fn check_alignment(dec: &Decomposition, set: &PefSet) -> Result<(), CliError> {
    if dec.n() != set.len() {
        return Err(NpeffError::Shape {
            expected: dec.n(),
            got: set.len(),
        }
        .into());
    }
    if !dec.example_ids.is_empty() && dec.example_ids != set.example_ids() {
        return Err(NpeffError::Domain(
            "decomposition rows and PEF examples have different example ids".into(),
        )
        .into());
    }
    Ok(())
}

/// Parse a JSON value given inline or as `@path`.
pub fn inline_or_file<T: serde::de::DeserializeOwned>(arg: &str) -> Result<T, CliError> {
    match arg.strip_prefix('@') {
        Some(path) => {
            let path = Path::new(path);
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            Ok(serde_json::from_str(&text)?)
        }
        None => Ok(serde_json::from_str(arg)?),
    }
}
