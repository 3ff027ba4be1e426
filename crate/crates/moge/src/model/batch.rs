//! Batched forward and backward passes.
//!
//! Gradient paths:
//!
//! * task loss -> classifier -> layer output `y` -> selected experts, and
//!   -> selected combination weights -> gate logits;
//! * regularizer -> dense routing distribution `z` -> all gate logits;
//! * load balance -> dense `z` -> all gate logits.
//!
//! Experts that receive no token in a batch get no gradient at all
//! (`None` in [`Gradients::experts`]); the optimizer leaves them untouched.
//! Per-expert work runs on the rayon pool but every reduction happens in a
//! fixed order, so results do not depend on the number of threads.

use rayon::prelude::*;

use super::loss::{cross_entropy, load_balance_loss_with_grad, total_loss, LossBreakdown};
use super::{Activation, ExpertParams, Linear, ModelParams};
use crate::group_reg::{group_sparse_reg_with_grad, GaussianFilter};
use crate::router::{top_k_indices, GateParams, RouterConfig, RoutingDecision, RoutingMode};
use crate::tensor::{gemm, softmax_in_place, Matrix, MatRef};
use crate::{Error, Result};

/// Coefficients of the auxiliary terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossWeights {
    pub lambda: f64,
    pub lb_weight: f64,
}

/// Regularizer filter for the current step.
#[derive(Debug, Clone)]
pub struct RegSpec {
    pub filter: GaussianFilter,
    pub eps: f64,
}

#[derive(Debug, Clone)]
struct ExpertSlice {
    expert: usize,
    /// (token, slot within that token's decision)
    rows: Vec<(usize, usize)>,
    x: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub gate_logits: Matrix,
    /// Dense routing distribution, one row per token.
    pub z: Matrix,
    pub decisions: Vec<RoutingDecision>,
    /// MoE layer output, one row per token.
    pub y: Matrix,
    pub logits: Matrix,
    slices: Vec<ExpertSlice>,
}

fn check_input(model: &ModelParams, cfg: &RouterConfig, x: &Matrix) -> Result<()> {
    cfg.validate()?;
    if cfg.n_experts != model.n_experts() {
        return Err(Error::config(format!(
            "router expects {} experts, model has {}",
            cfg.n_experts,
            model.n_experts()
        )));
    }
    if x.cols() != model.dims.input {
        return Err(Error::config(format!(
            "batch has {} features, model expects {}",
            x.cols(),
            model.dims.input
        )));
    }
    if x.rows() == 0 {
        return Err(Error::config("empty batch"));
    }
    Ok(())
}

fn affine_rows(x: MatRef<'_>, w: &Matrix, b: &[f64], out: &mut [f64]) {
    gemm(1.0, x, w.view().t(), 0.0, out);
    let cols = b.len();
    for row in out.chunks_exact_mut(cols) {
        for (o, bi) in row.iter_mut().zip(b) {
            *o += bi;
        }
    }
}

pub fn forward_batch(model: &ModelParams, cfg: &RouterConfig, x: &Matrix) -> Result<BatchForward> {
    check_input(model, cfg, x)?;
    let dims = model.dims;
    let (b, n, d) = (x.rows(), cfg.n_experts, dims.input);

    let mut gate_logits = Matrix::zeros(b, n);
    affine_rows(x.view(), &model.gate.weight, &model.gate.bias, gate_logits.as_mut_slice());

    let mut z = gate_logits.clone();
    let mut decisions = Vec::with_capacity(b);
    for t in 0..b {
        softmax_in_place(z.row_mut(t));
        let logits = gate_logits.row(t);
        let indices = top_k_indices(logits, cfg.k);
        let weights = match cfg.mode {
            RoutingMode::SoftmaxFirst => indices.iter().map(|&i| z.get(t, i)).collect(),
            RoutingMode::TopkFirst => {
                let mut w: Vec<f64> = indices.iter().map(|&i| logits[i]).collect();
                softmax_in_place(&mut w);
                w
            }
        };
        decisions.push(RoutingDecision {
            indices,
            weights,
            dense_z: z.row(t).to_vec(),
        });
    }

    let mut buckets: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (t, dcs) in decisions.iter().enumerate() {
        for (slot, &e) in dcs.indices.iter().enumerate() {
            buckets[e].push((t, slot));
        }
    }
    let active: Vec<(usize, Vec<(usize, usize)>)> = buckets
        .into_iter()
        .enumerate()
        .filter(|(_, rows)| !rows.is_empty())
        .collect();

    let act = model.activation;
    let slices: Vec<ExpertSlice> = active
        .into_par_iter()
        .map(|(e, rows)| {
            let params = &model.experts[e];
            let m = rows.len();
            let mut xs = Vec::with_capacity(m * d);
            for &(t, _) in &rows {
                xs.extend_from_slice(x.row(t));
            }
            let mut pre = vec![0.0; m * dims.hidden];
            affine_rows(MatRef::new(&xs, m, d), &params.w1, &params.b1, &mut pre);
            let hidden: Vec<f64> = pre.iter().map(|&v| act.apply(v)).collect();
            let mut out = vec![0.0; m * dims.output];
            affine_rows(MatRef::new(&hidden, m, dims.hidden), &params.w2, &params.b2, &mut out);
            ExpertSlice {
                expert: e,
                rows,
                x: xs,
                pre,
                hidden,
                out,
            }
        })
        .collect();

    let mut locations: Vec<Vec<(usize, usize)>> = decisions.iter().map(|d| vec![(0, 0); d.k()]).collect();
    for (si, s) in slices.iter().enumerate() {
        for (r, &(t, slot)) in s.rows.iter().enumerate() {
            locations[t][slot] = (si, r);
        }
    }

    let mo = dims.output;
    let mut y = Matrix::zeros(b, mo);
    for t in 0..b {
        let yt = y.row_mut(t);
        for (slot, &(si, r)) in locations[t].iter().enumerate() {
            let w = decisions[t].weights[slot];
            let o = &slices[si].out[r * mo..(r + 1) * mo];
            for (yi, oi) in yt.iter_mut().zip(o) {
                *yi += w * oi;
            }
        }
    }

    let mut logits = Matrix::zeros(b, dims.classes);
    affine_rows(y.view(), &model.classifier.weight, &model.classifier.bias, logits.as_mut_slice());

    Ok(BatchForward {
        gate_logits,
        z,
        decisions,
        y,
        logits,
        slices,
    })
}

impl BatchForward {
    pub fn batch_size(&self) -> usize {
        self.y.rows()
    }

    /// Experts that received at least one token.
    pub fn active_experts(&self) -> impl Iterator<Item = usize> + '_ {
        self.slices.iter().map(|s| s.expert)
    }
}

/// Gradients for one batch. Experts without tokens carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub gate: GateParams,
    pub experts: Vec<Option<ExpertParams>>,
    pub classifier: Linear,
}

impl Gradients {
    /// Dense copy with zeros for untouched experts, laid out like the model.
    pub fn to_dense(&self, model: &ModelParams) -> ModelParams {
        let mut out = ModelParams::zeros(model.dims, model.n_experts(), model.activation);
        out.gate = self.gate.clone();
        out.classifier = self.classifier.clone();
        for (dst, src) in out.experts.iter_mut().zip(&self.experts) {
            if let Some(g) = src {
                *dst = g.clone();
            }
        }
        out
    }
}

/// Mean regularizer over the batch and, when `grad` is given,
/// `d mean / d z` row by row.
fn batch_reg(z: &Matrix, reg: &RegSpec, mut grad: Option<&mut Matrix>) -> Result<f64> {
    let b = z.rows();
    let mut total = 0.0;
    let mut scratch = vec![0.0; z.cols()];
    for t in 0..b {
        total += group_sparse_reg_with_grad(z.row(t), &reg.filter, reg.eps, &mut scratch)?;
        if let Some(g) = grad.as_deref_mut() {
            for (gi, si) in g.row_mut(t).iter_mut().zip(&scratch) {
                *gi = si / b as f64;
            }
        }
    }
    Ok(total / b as f64)
}

/// Loss of a finished forward pass, without gradients.
pub fn batch_loss(
    fwd: &BatchForward,
    labels: &[u8],
    weights: LossWeights,
    reg: Option<&RegSpec>,
) -> Result<(LossBreakdown, usize)> {
    let mut probs = Matrix::zeros(fwd.logits.rows(), fwd.logits.cols());
    let (task, correct) = cross_entropy(&fwd.logits, labels, &mut probs);
    let reg_value = match reg {
        Some(r) => batch_reg(&fwd.z, r, None)?,
        None => 0.0,
    };
    let lb = crate::model::loss::load_balance_loss(&fwd.z, &fwd.decisions)?;
    Ok((total_loss(task, lb, reg_value, weights.lambda, weights.lb_weight), correct))
}

/// Loss, gradients, and the number of correctly classified tokens.
///
/// `reg` may be `None` only when `weights.lambda == 0`; the reported
/// regularizer value is then zero.
pub fn loss_and_grad(
    model: &ModelParams,
    cfg: &RouterConfig,
    x: &Matrix,
    labels: &[u8],
    weights: LossWeights,
    reg: Option<&RegSpec>,
) -> Result<(LossBreakdown, Gradients, usize)> {
    if labels.len() != x.rows() {
        return Err(Error::shape(format!("{} labels for {} tokens", labels.len(), x.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= model.dims.classes) {
        return Err(Error::config(format!("label {bad} outside {} classes", model.dims.classes)));
    }
    if weights.lambda > 0.0 && reg.is_none() {
        return Err(Error::config("lambda > 0 needs a regularizer filter"));
    }
    let fwd = forward_batch(model, cfg, x)?;
    let dims = model.dims;
    let (b, n) = (x.rows(), cfg.n_experts);
    let inv_b = 1.0 / b as f64;

    // classifier
    let mut probs = Matrix::zeros(b, dims.classes);
    let (task, correct) = cross_entropy(&fwd.logits, labels, &mut probs);
    let mut dlogits = probs;
    for (t, &l) in labels.iter().enumerate() {
        dlogits.row_mut(t)[l as usize] -= 1.0;
    }
    dlogits.as_mut_slice().iter_mut().for_each(|v| *v *= inv_b);

    let mut gc_w = Matrix::zeros(dims.classes, dims.output);
    gemm(1.0, dlogits.view().t(), fwd.y.view(), 0.0, gc_w.as_mut_slice());
    let gc_b = column_sums(&dlogits);
    let mut dy = Matrix::zeros(b, dims.output);
    gemm(1.0, dlogits.view(), model.classifier.weight.view(), 0.0, dy.as_mut_slice());

    // experts
    let act = model.activation;
    let expert_results: Vec<(ExpertParams, Vec<f64>)> = fwd
        .slices
        .par_iter()
        .map(|s| expert_backward(&model.experts[s.expert], act, s, &fwd.decisions, &dy, &dims))
        .collect();

    let mut expert_grads: Vec<Option<ExpertParams>> = vec![None; n];
    let mut dweights: Vec<Vec<f64>> = fwd.decisions.iter().map(|d| vec![0.0; d.k()]).collect();
    for (s, (g, dw)) in fwd.slices.iter().zip(expert_results) {
        for (&(t, slot), v) in s.rows.iter().zip(dw) {
            dweights[t][slot] = v;
        }
        expert_grads[s.expert] = Some(g);
    }

    // auxiliary terms on the dense distribution
    let mut dz = Matrix::zeros(b, n);
    let reg_value = match reg {
        Some(r) => {
            let mut g = Matrix::zeros(b, n);
            let v = batch_reg(&fwd.z, r, Some(&mut g))?;
            if weights.lambda != 0.0 {
                for (d, gv) in dz.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *d += weights.lambda * gv;
                }
            }
            v
        }
        None => 0.0,
    };
    let mut lb_grad = Matrix::zeros(b, n);
    let lb = load_balance_loss_with_grad(&fwd.z, &fwd.decisions, &mut lb_grad)?;
    if weights.lb_weight != 0.0 {
        for (d, gv) in dz.as_mut_slice().iter_mut().zip(lb_grad.as_slice()) {
            *d += weights.lb_weight * gv;
        }
    }

    // gate logits
    let mut dgate = Matrix::zeros(b, n);
    for t in 0..b {
        let dec = &fwd.decisions[t];
        let dzt = dz.row_mut(t);
        if cfg.mode == RoutingMode::SoftmaxFirst {
            for (&i, &dw) in dec.indices.iter().zip(&dweights[t]) {
                dzt[i] += dw;
            }
        }
        let zt = fwd.z.row(t);
        let inner: f64 = zt.iter().zip(dzt.iter()).map(|(a, c)| a * c).sum();
        let dl = dgate.row_mut(t);
        for ((o, &zi), &gi) in dl.iter_mut().zip(zt).zip(dzt.iter()) {
            *o = zi * (gi - inner);
        }
        if cfg.mode == RoutingMode::TopkFirst {
            let dw = &dweights[t];
            let inner: f64 = dec.weights.iter().zip(dw).map(|(w, g)| w * g).sum();
            for ((&i, &w), &g) in dec.indices.iter().zip(&dec.weights).zip(dw) {
                dl[i] += w * (g - inner);
            }
        }
    }
    let mut gg_w = Matrix::zeros(n, dims.input);
    gemm(1.0, dgate.view().t(), x.view(), 0.0, gg_w.as_mut_slice());
    let gg_b = column_sums(&dgate);

    let loss = total_loss(task, lb, reg_value, weights.lambda, weights.lb_weight);
    let grads = Gradients {
        gate: GateParams {
            weight: gg_w,
            bias: gg_b,
        },
        experts: expert_grads,
        classifier: Linear {
            weight: gc_w,
            bias: gc_b,
        },
    };
    Ok((loss, grads, correct))
}

fn expert_backward(
    params: &ExpertParams,
    act: Activation,
    s: &ExpertSlice,
    decisions: &[RoutingDecision],
    dy: &Matrix,
    dims: &super::ModelDims,
) -> (ExpertParams, Vec<f64>) {
    let (m, mo, mh, d) = (s.rows.len(), dims.output, dims.hidden, dims.input);
    let mut dout = vec![0.0; m * mo];
    let mut dweight = Vec::with_capacity(m);
    for (r, &(t, slot)) in s.rows.iter().enumerate() {
        let w = decisions[t].weights[slot];
        let dyt = dy.row(t);
        let o = &s.out[r * mo..(r + 1) * mo];
        dweight.push(dyt.iter().zip(o).map(|(a, c)| a * c).sum());
        for (dst, &g) in dout[r * mo..(r + 1) * mo].iter_mut().zip(dyt) {
            *dst = w * g;
        }
    }
    let dout_v = MatRef::new(&dout, m, mo);
    let mut gw2 = Matrix::zeros(mo, mh);
    gemm(1.0, dout_v.t(), MatRef::new(&s.hidden, m, mh), 0.0, gw2.as_mut_slice());
    let gb2 = sum_rows(&dout, mo);
    let mut dpre = vec![0.0; m * mh];
    gemm(1.0, dout_v, params.w2.view(), 0.0, &mut dpre);
    for (g, &p) in dpre.iter_mut().zip(&s.pre) {
        *g *= act.derivative(p);
    }
    let mut gw1 = Matrix::zeros(mh, d);
    gemm(1.0, MatRef::new(&dpre, m, mh).t(), MatRef::new(&s.x, m, d), 0.0, gw1.as_mut_slice());
    let gb1 = sum_rows(&dpre, mh);
    (
        ExpertParams {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
        dweight,
    )
}

fn sum_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    sum_rows(m.as_slice(), m.cols())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, ParamGroup};
    use crate::rng::Rng;

    fn toy() -> (ModelParams, Matrix, Vec<u8>) {
        let dims = ModelDims {
            input: 8,
            hidden: 6,
            output: 8,
            classes: 3,
        };
        let model = ModelParams::init_with_std(dims, 4, Activation::Relu, 0.5, 42).unwrap();
        let mut rng = Rng::new(1);
        let x = Matrix::from_fn(10, 8, |_, _| rng.uniform());
        let labels = (0..10).map(|i| (i % 3) as u8).collect();
        (model, x, labels)
    }

    #[test]
    fn batched_forward_matches_per_token() {
        let (model, x, _) = toy();
        for mode in [RoutingMode::SoftmaxFirst, RoutingMode::TopkFirst] {
            let cfg = RouterConfig::new(4, 2, mode).unwrap();
            let fwd = forward_batch(&model, &cfg, &x).unwrap();
            for t in 0..x.rows() {
                let tok = model.forward_token(&cfg, x.row(t)).unwrap();
                assert_eq!(tok.decision.indices, fwd.decisions[t].indices);
                for (a, b) in tok.y.iter().zip(fwd.y.row(t)) {
                    assert!((a - b).abs() < 1e-12);
                }
                for (a, b) in tok.logits.iter().zip(fwd.logits.row(t)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lambda_zero_removes_regularizer_path() {
        let (model, x, labels) = toy();
        let cfg = RouterConfig::new(4, 1, RoutingMode::SoftmaxFirst).unwrap();
        let reg = RegSpec {
            filter: GaussianFilter::new(1, 1.0).unwrap(),
            eps: 1e-12,
        };
        let w = LossWeights {
            lambda: 0.0,
            lb_weight: 0.01,
        };
        let (l1, g1, _) = loss_and_grad(&model, &cfg, &x, &labels, w, Some(&reg)).unwrap();
        let (l2, g2, _) = loss_and_grad(&model, &cfg, &x, &labels, w, None).unwrap();
        assert_eq!(g1.gate, g2.gate);
        assert_eq!(l1.task, l2.task);
        assert!(l1.reg > 0.0 && l2.reg == 0.0);
    }

    #[test]
    fn unrouted_experts_get_no_gradient() {
        let (model, x, labels) = toy();
        let cfg = RouterConfig::new(4, 1, RoutingMode::SoftmaxFirst).unwrap();
        let fwd = forward_batch(&model, &cfg, &x).unwrap();
        let active: Vec<usize> = fwd.active_experts().collect();
        let (_, g, _) = loss_and_grad(&model, &cfg, &x.clone(), &labels, LossWeights::default(), None).unwrap();
        for (e, ge) in g.experts.iter().enumerate() {
            assert_eq!(ge.is_some(), active.contains(&e));
        }
        let dense = g.to_dense(&model);
        for t in dense.tensors() {
            if let ParamGroup::Expert(e) = t.group {
                if !active.contains(&e) {
                    assert!(t.data.iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn total_is_additive() {
        let (model, x, labels) = toy();
        let cfg = RouterConfig::new(4, 2, RoutingMode::SoftmaxFirst).unwrap();
        let reg = RegSpec {
            filter: GaussianFilter::new(1, 1.0).unwrap(),
            eps: 1e-12,
        };
        let w = LossWeights {
            lambda: 0.3,
            lb_weight: 0.05,
        };
        let (l, _, _) = loss_and_grad(&model, &cfg, &x, &labels, w, Some(&reg)).unwrap();
        let want = l.task + l.lb_weight * l.load_balance + l.lambda * l.reg;
        assert!((l.total - want).abs() < 1e-12);
        let fwd = forward_batch(&model, &cfg, &x).unwrap();
        let (l2, _) = batch_loss(&fwd, &labels, w, Some(&reg)).unwrap();
        assert_eq!(l, l2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (model, x, labels) = toy();
        let cfg = RouterConfig::new(4, 1, RoutingMode::SoftmaxFirst).unwrap();
        assert!(loss_and_grad(&model, &cfg, &x, &labels[..3], LossWeights::default(), None).is_err());
        let w = LossWeights {
            lambda: 1.0,
            lb_weight: 0.0,
        };
        assert!(loss_and_grad(&model, &cfg, &x, &labels, w, None).is_err());
        let wrong = RouterConfig::new(5, 1, RoutingMode::SoftmaxFirst).unwrap();
        assert!(forward_batch(&model, &wrong, &x).is_err());
    }
}
