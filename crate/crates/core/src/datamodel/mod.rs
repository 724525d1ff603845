//! Shared domain types, the dataset container and the symmetric-position table.

mod dataset;
mod symmetry;
mod types;

pub use dataset::{Dataset, Record, DATASET_FORMAT_VERSION};
pub use symmetry::{build_symmetry_table, SymmetryTable};
pub use types::*;
