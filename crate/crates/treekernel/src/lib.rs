//! Tree-ensemble kernel toolkit.
//!
//! Builds randomized hyperrectangle partitions of the unit cube, the two
//! Random Forest kernels (the connection kernel `k0` and the weighted kernel
//! `kP`), RKHS-level analytics on their Gram matrices, a forest-kernel PCA
//! pipeline, the GVI/MDI/MDA variable-importance suite with its synthetic
//! benchmark, and an explicit-Euler integrator for the infinitesimal
//! gradient boosting ODE.

pub mod error;
pub mod forest;
pub mod geometry;
pub mod igb;
pub mod importance;
pub mod kpca;
pub mod pipeline;
pub mod rkhs;
pub mod stats;
pub mod trees;

pub use error::{Error, Result};
pub use forest::{Forest, GramBundle, KernelTag};
pub use geometry::{Hyperrectangle, Partition};
pub use trees::{Dataset, FittedTree, GrowConfig, SplitScheme, Strategy};
