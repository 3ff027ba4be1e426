//! Loss terms.

use crate::router::RoutingDecision;
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Per-batch loss decomposition.
///
/// `total = task + lb_weight * load_balance + lambda * reg`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub task: f64,
    pub load_balance: f64,
    pub reg: f64,
    pub lambda: f64,
    pub lb_weight: f64,
    pub total: f64,
}

pub fn total_loss(task: f64, load_balance: f64, reg: f64, lambda: f64, lb_weight: f64) -> LossBreakdown {
    debug_assert!(lambda >= 0.0 && lb_weight >= 0.0);
    LossBreakdown {
        task,
        load_balance,
        reg,
        lambda,
        lb_weight,
        total: task + lb_weight * load_balance + lambda * reg,
    }
}

/// Mean cross-entropy of `logits` (rows) against `labels`. Writes
/// `softmax(logits)` into `probs` and returns (loss, correct count).
pub(crate) fn cross_entropy(logits: &Matrix, labels: &[u8], probs: &mut Matrix) -> (f64, usize) {
    let b = logits.rows();
    let mut loss = 0.0;
    let mut correct = 0;
    for t in 0..b {
        let row = logits.row(t);
        let label = labels[t] as usize;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - row[label];
        let p = probs.row_mut(t);
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = (v - lse).exp();
        }
        if argmax(row) == label {
            correct += 1;
        }
    }
    (loss / b as f64, correct)
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Squared coefficient of variation `var / mean^2` (population variance) and
/// its gradient with respect to each entry.
fn cv_squared(v: &[f64], grad: &mut [f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if mean == 0.0 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        return 0.0;
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let m2 = mean * mean;
    for (g, x) in grad.iter_mut().zip(v) {
        *g = 2.0 * (x - mean) / (n * m2) - 2.0 * var / (n * m2 * mean);
    }
    var / m2
}

/// Auxiliary balancing loss `0.5 * (CV^2(importance) + CV^2(load))`.
///
/// `importance_i` sums the routing probability of expert `i` over the batch.
/// `load_i` sums it only over tokens that actually selected expert `i`, a
/// smooth stand-in for the assignment count that agrees with it in value
/// whenever the routing distribution is one-hot.
pub fn load_balance_loss(z: &Matrix, decisions: &[RoutingDecision]) -> Result<f64> {
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    load_balance_loss_with_grad(z, decisions, &mut grad)
}

/// As [`load_balance_loss`], with `d loss / d z` written to `grad`.
pub fn load_balance_loss_with_grad(z: &Matrix, decisions: &[RoutingDecision], grad: &mut Matrix) -> Result<f64> {
    let (b, n) = z.shape();
    if b == 0 {
        return Err(Error::config("load balance loss of an empty batch"));
    }
    if decisions.len() != b || grad.shape() != (b, n) {
        return Err(Error::shape("load balance inputs disagree on batch size"));
    }
    let mut importance = vec![0.0; n];
    let mut load = vec![0.0; n];
    for (t, d) in decisions.iter().enumerate() {
        let row = z.row(t);
        for (imp, v) in importance.iter_mut().zip(row) {
            *imp += v;
        }
        for &i in &d.indices {
            load[i] += row[i];
        }
    }
    let mut g_imp = vec![0.0; n];
    let mut g_load = vec![0.0; n];
    let value = 0.5 * (cv_squared(&importance, &mut g_imp) + cv_squared(&load, &mut g_load));
    for (t, d) in decisions.iter().enumerate() {
        let g = grad.row_mut(t);
        for (gi, gv) in g.iter_mut().zip(&g_imp) {
            *gi = 0.5 * gv;
        }
        for &i in &d.indices {
            g[i] += 0.5 * g_load[i];
        }
    }
    Ok(value)
}
