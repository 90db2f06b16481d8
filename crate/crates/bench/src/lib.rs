//! Shared fixtures for the benchmarks.

use wit_core::simulation::generate;
use wit_core::{BuiltinCase, IVDataset};

/// Replication 0 of a built-in design, standardized as the estimator sees it.
pub fn standardized(case: BuiltinCase, n: usize) -> IVDataset {
    raw(case, n)
        .standardize()
        .expect("built-in designs standardize")
}

/// Replication 0 of a built-in design on the raw scale.
pub fn raw(case: BuiltinCase, n: usize) -> IVDataset {
    let spec = case.spec(n).expect("built-in design");
    generate(&spec).expect("built-in design generates").0
}
