//! Hierarchical matrices and their multiplication through sum-expressions.
//!
//! Kernel matrices on a sphere mesh are stored as H-matrices over a
//! block-cluster tree. Products are formed block by block from exact
//! sum-expressions and compressed once per far-field block by a
//! matrix-free scheme: adaptive cross approximation, Golub-Kahan-Lanczos
//! bidiagonalization, randomized range finding, or a dense SVD reference.
//! A traditional multiplication with fast truncation is provided as a
//! baseline.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`).
//!
//! ```
//! use std::sync::Arc;
//! use hmat_core::{
//!     assemble_hmatrix, build_block_cluster_tree, build_cluster_tree, build_sphere_mesh, hmult_new,
//!     CompressorKind, HMatrixF64, KernelKind, MultiplyConfig, TruncationPolicy,
//! };
//!
//! let panels = build_sphere_mesh(2).unwrap();
//! let clusters = Arc::new(build_cluster_tree(&panels, 16).unwrap());
//! let tree = Arc::new(build_block_cluster_tree(clusters, 1.0).unwrap());
//! let policy = TruncationPolicy::EpsRank(1e-8);
//! let h: HMatrixF64 = assemble_hmatrix(KernelKind::Exponential, &panels, tree, policy).unwrap();
//! let product = hmult_new(&h, &h, &MultiplyConfig::new(CompressorKind::Aca, policy)).unwrap();
//! assert_eq!(product.matrix.size(), 96);
//! ```

pub mod cluster;
pub mod compress;
pub mod error;
pub mod geometry;
pub mod hmatrix;
pub mod lowrank;
pub mod multiply;
pub mod scalar;
pub mod serialize;
pub mod sumexpr;

pub use cluster::{
    build_block_cluster_tree, build_cluster_tree, identity_constant, sparsity_constant, BlockClusterTree,
    BlockKind, ClusterTree, DEFAULT_ETA, DEFAULT_N_MIN,
};
pub use compress::{compress, CompressorKind, LinearMap};
pub use error::{HmError, Result};
pub use geometry::{build_sphere_mesh, KernelKind, PanelSet};
pub use hmatrix::{assemble_hmatrix, BlockData, HMatrix, OpCounter};
pub use lowrank::{LowRank, TruncationPolicy};
pub use multiply::{
    estimate_product_error, hmult_new, hmult_traditional, multiply, Converter, MultiplyConfig, MultiplyMode,
    MultiplyReport, Product,
};
pub use scalar::Real;
pub use sumexpr::SumExpression;

pub type HMatrixF64 = HMatrix<f64>;
pub type HMatrixF32 = HMatrix<f32>;
pub type LowRankF64 = LowRank<f64>;
pub type LowRankF32 = LowRank<f32>;
