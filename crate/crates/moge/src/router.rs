//! Top-k gating.
//!
//! Two orderings are supported. In [`RoutingMode::SoftmaxFirst`] the gate
//! logits go through a softmax and the k largest probabilities are kept as
//! they are, so the selected weights sum to at most one. In
//! [`RoutingMode::TopkFirst`] the k largest logits are selected first and the
//! softmax runs over those alone (every other logit treated as `-inf`), so
//! the weights sum to one. Either way the full softmax of the logits is kept
//! as [`RoutingDecision::dense_z`]; that dense vector is what the
//! group-sparse regularizer and the load-balance loss see.

use serde::{Deserialize, Serialize};

use crate::tensor::{dense_affine, softmax_in_place, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    SoftmaxFirst,
    TopkFirst,
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RoutingMode::SoftmaxFirst => "softmax_first",
            RoutingMode::TopkFirst => "topk_first",
        })
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_first" => Ok(RoutingMode::SoftmaxFirst),
            "topk_first" => Ok(RoutingMode::TopkFirst),
            other => Err(Error::config(format!("unknown routing mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouterConfig {
    pub n_experts: usize,
    pub k: usize,
    pub mode: RoutingMode,
}

impl RouterConfig {
    pub fn new(n_experts: usize, k: usize, mode: RoutingMode) -> Result<Self> {
        let cfg = Self { n_experts, k, mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.n_experts {
            return Err(Error::config(format!(
                "top-k needs 1 <= k <= n (k={}, n={})",
                self.k, self.n_experts
            )));
        }
        Ok(())
    }
}

/// Gating network `G(x) = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl GateParams {
    pub fn n_experts(&self) -> usize {
        self.weight.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        dense_affine(&self.weight, &self.bias, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Selected experts, strongest first.
    pub indices: Vec<usize>,
    /// Combination weight of each selected expert, aligned with `indices`.
    pub weights: Vec<f64>,
    /// Softmax of the gate logits over all experts.
    pub dense_z: Vec<f64>,
}

impl RoutingDecision {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Full-length code with the selected weights in place and zeros elsewhere.
    pub fn sparse_code(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.dense_z.len()];
        for (&i, &wi) in self.indices.iter().zip(&self.weights) {
            w[i] = wi;
        }
        w
    }
}

pub fn route(cfg: &RouterConfig, gate: &GateParams, x: &[f64]) -> Result<RoutingDecision> {
    cfg.validate()?;
    if gate.n_experts() != cfg.n_experts {
        return Err(Error::config(format!(
            "gate has {} outputs but router expects {} experts",
            gate.n_experts(),
            cfg.n_experts
        )));
    }
    let logits = gate.logits(x)?;
    Ok(route_logits(cfg, &logits))
}

/// Routing from precomputed gate logits. `logits.len()` must equal `cfg.n_experts`.
pub fn route_logits(cfg: &RouterConfig, logits: &[f64]) -> RoutingDecision {
    debug_assert_eq!(logits.len(), cfg.n_experts);
    let mut dense_z = logits.to_vec();
    softmax_in_place(&mut dense_z);
    let indices = top_k_indices(logits, cfg.k);
    let weights = match cfg.mode {
        RoutingMode::SoftmaxFirst => indices.iter().map(|&i| dense_z[i]).collect(),
        RoutingMode::TopkFirst => {
            let mut w: Vec<f64> = indices.iter().map(|&i| logits[i]).collect();
            softmax_in_place(&mut w);
            w
        }
    };
    RoutingDecision {
        indices,
        weights,
        dense_z,
    }
}

/// Indices of the k largest values, largest first; equal values resolve to
/// the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    let mut idx: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &v) in values.iter().enumerate() {
        // position of the first kept entry strictly smaller than v
        let pos = idx.iter().position(|&j| values[j] < v).unwrap_or(idx.len());
        if pos < k {
            idx.insert(pos, i);
            idx.truncate(k);
        }
    }
    idx
}

/// `y = sum_i w_i E_i(x)` over the selected experts.
pub fn combine_experts(decision: &RoutingDecision, expert_outputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if expert_outputs.len() != decision.k() {
        return Err(Error::shape(format!(
            "{} expert outputs for {} selected experts",
            expert_outputs.len(),
            decision.k()
        )));
    }
    let m = expert_outputs.first().map_or(0, Vec::len);
    if expert_outputs.iter().any(|o| o.len() != m) {
        return Err(Error::shape("expert outputs differ in length"));
    }
    let mut y = vec![0.0; m];
    for (w, out) in decision.weights.iter().zip(expert_outputs) {
        for (yi, oi) in y.iter_mut().zip(out) {
            *yi += w * oi;
        }
    }
    Ok(y)
}

/// Residual `||y - D w||_2` of the layer output against the dictionary whose
/// i-th column is `E_i(x)` and the sparse code built from `decision`.
///
/// A layer output produced by [`combine_experts`] is an exact k-sparse
/// representation, so the residual is at rounding level.
pub fn verify_sparse_representation(
    decision: &RoutingDecision,
    all_expert_outputs: &[Vec<f64>],
    y: &[f64],
) -> f64 {
    let code = decision.sparse_code();
    debug_assert_eq!(code.len(), all_expert_outputs.len());
    let mut recon = vec![0.0; y.len()];
    for (col, &w) in all_expert_outputs.iter().zip(&code) {
        if w == 0.0 {
            continue;
        }
        for (r, c) in recon.iter_mut().zip(col) {
            *r += w * c;
        }
    }
    y.iter()
        .zip(&recon)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}
