//! Exact probabilistic ground truth: Gaussians, Gaussian mixtures, and
//! linear-Gaussian models over a view × frame matrix of entries.

mod gaussian;
mod gmm;
mod matrix;
mod pivot_tree;
pub(crate) mod serde_mat;

pub use gaussian::{joint_score, noised_model, GaussianModel};
pub use gmm::{gmm_score, GmmModel};
pub(crate) use gmm::responsibilities as gmm_responsibilities;
pub use matrix::{marginal, partial_covariance, Entry, MatrixGaussianModel, MatrixLayout};
pub use pivot_tree::{build_pivot_tree, random_pivot_tree, ExtraEdge, PivotTreeSpec, TreeFamily, Wiring};
