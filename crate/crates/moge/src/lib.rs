//! Mixture-of-Group-Experts.
//!
//! A sparsely gated mixture-of-experts layer whose routing distribution is
//! reshaped into a 2D topographic map and penalised with a Gaussian-smoothed
//! group-sparse regularizer. The crate carries everything needed to train and
//! inspect such a layer at desk scale: dense kernels ([`tensor`]), routing
//! ([`router`]), the regularizer and its analytic gradient ([`group_reg`]),
//! an explicitly back-propagated single-layer model ([`model`]), Fashion-MNIST
//! ingestion and affine perturbations ([`data`]), and the evaluation
//! instruments used to judge invariance and aggregation ([`analysis`]).
//!
//! ```
//! use moge::group_reg::{group_sparse_reg, GaussianFilter, near_square_shape};
//!
//! assert_eq!(near_square_shape(32), (4, 8));
//! let filter = GaussianFilter::new(3, 2.0).unwrap();
//! let z = vec![1.0 / 16.0; 16];
//! let r = group_sparse_reg(&z, &filter, 0.0).unwrap();
//! // 2x2 valid positions, each window holds nine cells of 1/16.
//! assert!((r - 4.0 / 16.0).abs() < 1e-12);
//! ```

pub mod analysis;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod group_reg;
pub mod model;
pub mod rng;
pub mod router;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
