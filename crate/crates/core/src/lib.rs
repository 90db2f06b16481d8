//! WIT estimator: selection of valid instruments by MCP-penalized regression on an
//! annihilator-transformed design, MCD-test tuning, and LIML post-selection
//! estimation, with a Monte Carlo harness for the standard simulation designs.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod moments;
pub mod penalty;
pub mod selector;
pub mod simulation;
pub mod tuning;
pub mod wit;

pub use data::{load_csv, ColumnRef, ColumnSpec, IVDataset, ReducedForm, TruthLabels};
pub use error::{Result, WitError};
pub use estimators::{KClassFit, SpectralStats, VarianceMethod, WITFit};
pub use moments::Moments;
pub use penalty::{PenaltyKind, PenaltySpec};
pub use selector::{LocalSolution, SolverConfig, TransformedDesign};
pub use simulation::{
    BuiltinCase, DGPSpec, EquivalentDGP, Method, MetricsReport, StudyCase, StudyConfig, StudyTable,
    ZCovRule,
};
pub use tuning::{McdResult, TuningConfig, TuningReport};
pub use wit::{all_iv_comparators, fit_wit, IntervalEstimate, WitConfig, WitOutcome, WitStatus};
