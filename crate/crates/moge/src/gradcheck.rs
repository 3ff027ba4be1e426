//! Finite-difference verification of the analytic gradients.
//!
//! Every check compares a whole gradient tensor against central
//! differences and reports
//! `max |a - n| / max(||n||_inf, ||a||_inf, 1e-12)`.

use crate::group_reg::{group_sparse_reg, group_sparse_reg_grad, GaussianFilter, DEFAULT_EPS};
use crate::model::batch::batch_loss;
use crate::model::{forward_batch, loss_and_grad, Activation, LossWeights, ModelDims, ModelParams, RegSpec};
use crate::rng::Rng;
use crate::router::{RouterConfig, RoutingMode};
use crate::tensor::{softmax, Matrix};
use crate::Result;

pub const REG_STEP: f64 = 1e-6;
pub const REG_TOLERANCE: f64 = 1e-5;
pub const MODEL_STEP: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

pub const REG_SIGMAS: [f64; 3] = [0.5, 2.0, 10.0];
pub const REG_SIZES: [usize; 2] = [3, 5];
pub const REG_SHAPES: [(usize, usize); 4] = [(4, 4), (4, 8), (8, 16), (20, 20)];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance
    }
}

/// A deliberate corruption of the analytic gradient, for testing the checker.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum GradMutation {
    #[default]
    None,
    /// Negate the named tensor's gradient.
    FlipSign(String),
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(numeric).max(inf(analytic)).max(1e-12)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// The regularizer gradient over every (sigma, h, shape) combination whose
/// filter fits the map, at a softmax-distributed random point.
pub fn reg_gradcheck(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::substream(seed, "gradcheck/reg");
    let mut out = Vec::new();
    for &(r, c) in &REG_SHAPES {
        let logits: Vec<f64> = (0..r * c).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let z = softmax(&logits)?;
        for &h in REG_SIZES.iter().filter(|&&h| h <= r.min(c)) {
            for &sigma in &REG_SIGMAS {
                let filter = GaussianFilter::new(h, sigma)?;
                let analytic = group_sparse_reg_grad(&z, &filter, DEFAULT_EPS)?;
                let numeric = numeric_gradient(&z, REG_STEP, |p| {
                    group_sparse_reg(p, &filter, DEFAULT_EPS).expect("shape checked above")
                });
                out.push(CheckResult {
                    name: format!("reg sigma={sigma} h={h} {r}x{c}"),
                    rel_error: relative_error(&analytic, &numeric),
                    tolerance: REG_TOLERANCE,
                });
            }
        }
    }
    Ok(out)
}

/// A small model and batch on which every parameter is checked.
#[derive(Debug, Clone)]
pub struct ToyProblem {
    pub model: ModelParams,
    pub router: RouterConfig,
    pub x: Matrix,
    pub labels: Vec<u8>,
    pub weights: LossWeights,
    pub reg: RegSpec,
}

impl ToyProblem {
    /// `n_experts` experts on 8-dim tokens; the filter is the largest odd
    /// size that fits the map.
    pub fn new(seed: u64, n_experts: usize, k: usize, mode: RoutingMode) -> Result<Self> {
        let dims = ModelDims { input: 8, hidden: 6, output: 8, classes: 3 };
        let model = ModelParams::init_with_std(dims, n_experts, Activation::Relu, 0.5, seed)?;
        let router = RouterConfig::new(n_experts, k, mode)?;
        let mut rng = Rng::substream(seed, "gradcheck/batch");
        let tokens = 12;
        let x = Matrix::from_fn(tokens, dims.input, |_, _| 2.0 * rng.uniform() - 1.0);
        let labels = (0..tokens).map(|_| rng.below(dims.classes) as u8).collect();
        let (r, c) = crate::group_reg::near_square_shape(n_experts);
        let side = r.min(c);
        let h = if side % 2 == 1 { side.min(3) } else { (side - 1).min(3) };
        Ok(Self {
            model,
            router,
            x,
            labels,
            weights: LossWeights { lambda: 0.5, lb_weight: 0.3 },
            reg: RegSpec { filter: GaussianFilter::new(h, 1.0)?, eps: DEFAULT_EPS },
        })
    }

    pub fn loss(&self, model: &ModelParams) -> Result<f64> {
        let fwd = forward_batch(model, &self.router, &self.x)?;
        Ok(batch_loss(&fwd, &self.labels, self.weights, Some(&self.reg))?.0.total)
    }
}

/// Every tensor of the toy model against central differences of the total loss.
pub fn model_gradcheck(problem: &ToyProblem, mutation: &GradMutation) -> Result<Vec<CheckResult>> {
    let p = problem;
    let (_, grads, _) = loss_and_grad(&p.model, &p.router, &p.x, &p.labels, p.weights, Some(&p.reg))?;
    let dense = grads.to_dense(&p.model);
    let mode = p.router.mode;
    let mut probe = p.model.clone();
    let mut out = Vec::new();
    for (ti, t) in dense.tensors().iter().enumerate() {
        let mut analytic = t.data.to_vec();
        if *mutation == GradMutation::FlipSign(t.name.clone()) {
            analytic.iter_mut().for_each(|v| *v = -*v);
        }
        let base = p.model.tensors()[ti].data.to_vec();
        let mut numeric = Vec::with_capacity(base.len());
        for j in 0..base.len() {
            let mut eval = |v: f64| -> Result<f64> {
                probe.tensors_mut()[ti].data[j] = v;
                p.loss(&probe)
            };
            let up = eval(base[j] + MODEL_STEP)?;
            let down = eval(base[j] - MODEL_STEP)?;
            eval(base[j])?;
            numeric.push((up - down) / (2.0 * MODEL_STEP));
        }
        out.push(CheckResult {
            name: format!("{mode} k={} {}", p.router.k, t.name),
            rel_error: relative_error(&analytic, &numeric),
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(out)
}

/// The standard model suite: 4 experts in both routing orders, plus a
/// 16-expert model whose 4x4 map takes a 3x3 filter.
pub fn default_model_suite(seed: u64, mutation: &GradMutation) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (n, k, mode) in [
        (4, 1, RoutingMode::SoftmaxFirst),
        (4, 2, RoutingMode::SoftmaxFirst),
        (4, 2, RoutingMode::TopkFirst),
        (16, 2, RoutingMode::SoftmaxFirst),
        (16, 3, RoutingMode::TopkFirst),
    ] {
        let problem = ToyProblem::new(seed, n, k, mode)?;
        out.extend(
            model_gradcheck(&problem, mutation)?
                .into_iter()
                .map(|r| CheckResult { name: format!("n={n} {}", r.name), ..r }),
        );
    }
    Ok(out)
}

/// Worst result per leading name component pattern, e.g. all `experts.*`
/// tensors of one configuration collapse to one line.
pub fn worst_by_group(results: &[CheckResult]) -> Vec<CheckResult> {
    let mut groups: Vec<CheckResult> = Vec::new();
    for r in results {
        let key = group_key(&r.name);
        match groups.iter_mut().find(|g| g.name == key) {
            Some(g) => g.rel_error = g.rel_error.max(r.rel_error),
            None => groups.push(CheckResult { name: key, ..r.clone() }),
        }
    }
    groups
}

fn group_key(name: &str) -> String {
    let Some((prefix, tensor)) = name.rsplit_once(' ') else { return name.to_string() };
    let group = if tensor.starts_with("experts.") {
        "experts"
    } else if tensor.starts_with("gate.") {
        "gate"
    } else if tensor.starts_with("classifier.") {
        "classifier"
    } else {
        tensor
    };
    format!("{prefix} {group}")
}
