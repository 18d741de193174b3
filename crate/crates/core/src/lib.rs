//! Non-negative per-example Fisher factorization.
//!
//! Each example's Fisher information (or its diagonal) is compressed into a
//! sparse, unit-norm representation. The collection is then factored into
//! non-negative combinations of a small set of shared components, each of
//! which stands for a piece of the model's computation. Components can be
//! turned into parameter perturbations whose effect concentrates on the
//! examples that use them.
//!
//! The modules follow the pipeline:
//!
//! * [`sandbox`]: small MLPs, planted instances and exact PEF computation
//! * [`pef`]: sparse PEF storage, preprocessing and the on-disk formats
//! * [`lrm`] / [`diag`]: the two factorizers, sharded over columns via [`shard`]
//! * [`coeff`]: coefficient fitting and component expansion
//! * [`perturb`]: component-targeted perturbations
//! * [`eval`]: selectivity and comparison metrics

pub mod coeff;
pub mod decomposition;
pub mod diag;
pub mod error;
pub mod eval;
pub mod lrm;
pub mod pef;
pub mod perturb;
pub mod sandbox;
pub mod shard;

pub use decomposition::{Decomposition, LossRecord};
pub use error::{NpeffError, Result};
pub use pef::{ColumnIndexMap, PefKind, PefSet, SparsePef};
