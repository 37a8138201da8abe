//! Entropic optimal transport for graph alignment.
//!
//! Node alignment uses Wasserstein transport between embeddings, edge
//! alignment uses Gromov-Wasserstein transport between adjacencies, and the
//! two are fused into a single alignment distance. The [`exact`] module holds
//! enumeration oracles for small instances.

pub mod align;
pub mod exact;
pub mod gw;
pub mod sinkhorn;

pub use align::{
    batch_alignment, cost_matrix, ga_distance, omega_reference, Ablation, AlignProblem,
    AlignSettings, GaResult, GraphValues, OmegaMode,
};
pub use exact::{equivalence_check, EquivalenceOutcome};
pub use gw::{entropic_gwd, gwd_cost, pseudo_cost, GwOptions};
pub use sinkhorn::{sinkhorn_wd, uniform, SinkhornOptions, TransportPlan};

use ndarray::Array2;

use crate::tensor::Tensor;

pub fn to_tensor(a: &Array2<f64>) -> Tensor {
    let (r, c) = a.dim();
    Tensor::from_fn(r, c, |i, j| a[[i, j]])
}

pub fn to_array(t: &Tensor) -> Array2<f64> {
    Array2::from_shape_fn((t.rows(), t.cols()), |(i, j)| t.at(i, j))
}
