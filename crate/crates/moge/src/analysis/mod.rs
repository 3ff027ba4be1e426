//! Evaluation instruments for trained routers.
//!
//! Everything here looks at the dense routing distribution laid out as a
//! topographic map: per-class average maps and how spatially clustered they
//! are ([`maps`]), how far a token's map moves under small image
//! perturbations measured with the image Euclidean distance ([`imed`],
//! [`invariance`]), and how evenly tokens spread over experts ([`usage`]).

pub mod imed;
pub mod invariance;
pub mod maps;
pub mod usage;

pub use imed::imed;
pub use invariance::{invariance_report, InvarianceReport, InvarianceRow};
pub use maps::{category_mean_maps, morans_i, CategoryMaps};
pub use usage::{expert_usage_stats, UsageStats};

use crate::model::ModelParams;
use crate::tensor::{gemm, softmax_in_place, Matrix};

/// Dense routing distribution `softmax(W_g x + b_g)` for every row of `x`.
pub fn routing_distribution(model: &ModelParams, x: &Matrix) -> Matrix {
    let n = model.n_experts();
    let mut z = Matrix::zeros(x.rows(), n);
    gemm(1.0, x.view(), model.gate.weight.view().t(), 0.0, z.as_mut_slice());
    for t in 0..x.rows() {
        let row = z.row_mut(t);
        for (v, b) in row.iter_mut().zip(&model.gate.bias) {
            *v += b;
        }
        softmax_in_place(row);
    }
    z
}
