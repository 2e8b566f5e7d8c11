//! Tests and estimates for the dimension of a signal subspace based on pairs
//! of scatter matrices: principal components (subsphericity), FOBI
//! (non-Gaussian components) and sliced inverse regression.

pub mod bootstrap;
pub mod data;
pub mod distributions;
pub mod error;
pub mod fobi;
pub mod linalg;
pub mod pca;
pub mod result;
pub mod scatter;
pub mod sim;
pub mod sir;

pub use bootstrap::{
    alpha_schedule, bootstrap_pvalue, estimate_dimension, BootstrapConfig, BootstrapOutcome, Decision,
    DimensionEstimate, LevelSource, Strategy,
};
pub use data::{load_table, read_table, DataTable};
pub use distributions::{chisq_sf, weighted_chisq_mix_sf};
pub use error::{Error, Result};
pub use fobi::{FobiBootstrap, FobiFit, Sigma1Variant};
pub use linalg::{
    haar_orthogonal, matrix_moments, sym_eigen, sym_power, EigenSystem, Exponent, MomentTriple, SymMatrix,
};
pub use pca::{PcaBootstrap, PcaFit, PcaScatter, PcaStatistic};
pub use result::{Family, Mode, ReferenceLaw, TestResult};
pub use scatter::{ScatterEstimate, ScatterKind, SliceAssignment, TylerMode};
pub use sim::{rejection_rate, simulate_model, Method, Model, RejectionReport, RejectionRow, SimulationSpec};
pub use sir::{SirFit, SliceMode};
