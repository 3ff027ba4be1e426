//! Single MoE layer of two-layer feedforward experts followed by a linear
//! classifier, with hand-written backpropagation.
//!
//! Every token is routed to its top-k experts; the layer output is the
//! weighted sum of the selected experts' outputs and goes straight into the
//! classifier. [`batch`] holds the batched forward/backward pass used for
//! training, [`loss`] the loss terms, [`optim`] AdamW with warmup plus cosine
//! decay, and [`checkpoint`] the on-disk format.

pub mod batch;
pub mod checkpoint;
pub mod loss;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::router::{combine_experts, route, GateParams, RouterConfig, RoutingDecision};
use crate::tensor::{dense_affine, truncated_normal_init, Matrix};
use crate::{Error, Result};

pub use batch::{forward_batch, loss_and_grad, BatchForward, Gradients, LossWeights, RegSpec};
pub use loss::{load_balance_loss, total_loss, LossBreakdown};
pub use optim::{adamw_update, AdamW, AdamWConfig, Moments};

/// Hidden-layer nonlinearity of each expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    /// Expert output width, which is also the classifier input width.
    pub output: usize,
    pub classes: usize,
}

impl ModelDims {
    /// 28x28 images, 64 hidden units, 784-wide expert outputs, 10 classes.
    pub const FASHION_MNIST: ModelDims = ModelDims {
        input: 784,
        hidden: 64,
        output: 784,
        classes: 10,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ExpertParams {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            w1: Matrix::zeros(dims.hidden, dims.input),
            b1: vec![0.0; dims.hidden],
            w2: Matrix::zeros(dims.output, dims.hidden),
            b2: vec![0.0; dims.output],
        }
    }
}

/// `W2 act(W1 x + b1) + b2`.
pub fn expert_forward(e: &ExpertParams, act: Activation, x: &[f64]) -> Result<Vec<f64>> {
    let mut h = dense_affine(&e.w1, &e.b1, x)?;
    h.iter_mut().for_each(|v| *v = act.apply(*v));
    dense_affine(&e.w2, &e.b2, &h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Gate,
    Expert(usize),
    Classifier,
}

/// Borrowed parameter tensor with its checkpoint name.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub group: ParamGroup,
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct TensorMut<'a> {
    pub group: ParamGroup,
    pub name: String,
    pub data: &'a mut [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub activation: Activation,
    pub gate: GateParams,
    pub experts: Vec<ExpertParams>,
    pub classifier: Linear,
}

/// Result of running one token through the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenOutput {
    pub logits: Vec<f64>,
    pub decision: RoutingDecision,
    pub y: Vec<f64>,
}

impl ModelParams {
    /// Truncated-normal weights (std 0.02, cut at two std), zero biases.
    pub fn init(dims: ModelDims, n_experts: usize, activation: Activation, seed: u64) -> Result<Self> {
        Self::init_with_std(dims, n_experts, activation, 0.02, seed)
    }

    pub fn init_with_std(
        dims: ModelDims,
        n_experts: usize,
        activation: Activation,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_experts == 0 || dims.input == 0 || dims.hidden == 0 || dims.output == 0 || dims.classes == 0 {
            return Err(Error::config(format!("degenerate model dims {dims:?} with {n_experts} experts")));
        }
        let mut rng = Rng::substream(seed, "init");
        let w = |r, c, rng: &mut Rng| truncated_normal_init(r, c, 0.0, std, -2.0, 2.0, rng);
        let gate = GateParams {
            weight: w(n_experts, dims.input, &mut rng)?,
            bias: vec![0.0; n_experts],
        };
        let mut experts = Vec::with_capacity(n_experts);
        for _ in 0..n_experts {
            experts.push(ExpertParams {
                w1: w(dims.hidden, dims.input, &mut rng)?,
                b1: vec![0.0; dims.hidden],
                w2: w(dims.output, dims.hidden, &mut rng)?,
                b2: vec![0.0; dims.output],
            });
        }
        let classifier = Linear {
            weight: w(dims.classes, dims.output, &mut rng)?,
            bias: vec![0.0; dims.classes],
        };
        Ok(Self {
            dims,
            activation,
            gate,
            experts,
            classifier,
        })
    }

    pub fn zeros(dims: ModelDims, n_experts: usize, activation: Activation) -> Self {
        Self {
            dims,
            activation,
            gate: GateParams {
                weight: Matrix::zeros(n_experts, dims.input),
                bias: vec![0.0; n_experts],
            },
            experts: (0..n_experts).map(|_| ExpertParams::zeros(&dims)).collect(),
            classifier: Linear {
                weight: Matrix::zeros(dims.classes, dims.output),
                bias: vec![0.0; dims.classes],
            },
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn forward_token(&self, cfg: &RouterConfig, x: &[f64]) -> Result<TokenOutput> {
        self.forward_token_with(cfg, x, |e, x| expert_forward(e, self.activation, x))
    }

    /// Forward pass with a caller-supplied expert evaluator; it is invoked
    /// once per selected expert.
    pub fn forward_token_with<F>(&self, cfg: &RouterConfig, x: &[f64], mut expert: F) -> Result<TokenOutput>
    where
        F: FnMut(&ExpertParams, &[f64]) -> Result<Vec<f64>>,
    {
        if x.len() != self.dims.input {
            return Err(Error::config(format!(
                "token has {} features, model expects {}",
                x.len(),
                self.dims.input
            )));
        }
        let decision = route(cfg, &self.gate, x)?;
        let outputs = decision
            .indices
            .iter()
            .map(|&i| expert(&self.experts[i], x))
            .collect::<Result<Vec<_>>>()?;
        let y = combine_experts(&decision, &outputs)?;
        let logits = dense_affine(&self.classifier.weight, &self.classifier.bias, &y)?;
        Ok(TokenOutput { logits, decision, y })
    }

    /// All tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            TensorRef {
                group: ParamGroup::Gate,
                name: "gate.weight".into(),
                shape: vec![self.gate.weight.rows(), self.gate.weight.cols()],
                data: self.gate.weight.as_slice(),
            },
            TensorRef {
                group: ParamGroup::Gate,
                name: "gate.bias".into(),
                shape: vec![self.gate.bias.len()],
                data: &self.gate.bias,
            },
        ];
        for (i, e) in self.experts.iter().enumerate() {
            let g = ParamGroup::Expert(i);
            out.push(TensorRef {
                group: g,
                name: format!("experts.{i}.w1"),
                shape: vec![e.w1.rows(), e.w1.cols()],
                data: e.w1.as_slice(),
            });
            out.push(TensorRef {
                group: g,
                name: format!("experts.{i}.b1"),
                shape: vec![e.b1.len()],
                data: &e.b1,
            });
            out.push(TensorRef {
                group: g,
                name: format!("experts.{i}.w2"),
                shape: vec![e.w2.rows(), e.w2.cols()],
                data: e.w2.as_slice(),
            });
            out.push(TensorRef {
                group: g,
                name: format!("experts.{i}.b2"),
                shape: vec![e.b2.len()],
                data: &e.b2,
            });
        }
        out.push(TensorRef {
            group: ParamGroup::Classifier,
            name: "classifier.weight".into(),
            shape: vec![self.classifier.weight.rows(), self.classifier.weight.cols()],
            data: self.classifier.weight.as_slice(),
        });
        out.push(TensorRef {
            group: ParamGroup::Classifier,
            name: "classifier.bias".into(),
            shape: vec![self.classifier.bias.len()],
            data: &self.classifier.bias,
        });
        out
    }

    /// Mutable tensors, same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![
            TensorMut {
                group: ParamGroup::Gate,
                name: "gate.weight".into(),
                data: self.gate.weight.as_mut_slice(),
            },
            TensorMut {
                group: ParamGroup::Gate,
                name: "gate.bias".into(),
                data: &mut self.gate.bias,
            },
        ];
        for (i, e) in self.experts.iter_mut().enumerate() {
            let g = ParamGroup::Expert(i);
            out.push(TensorMut {
                group: g,
                name: format!("experts.{i}.w1"),
                data: e.w1.as_mut_slice(),
            });
            out.push(TensorMut {
                group: g,
                name: format!("experts.{i}.b1"),
                data: &mut e.b1,
            });
            out.push(TensorMut {
                group: g,
                name: format!("experts.{i}.w2"),
                data: e.w2.as_mut_slice(),
            });
            out.push(TensorMut {
                group: g,
                name: format!("experts.{i}.b2"),
                data: &mut e.b2,
            });
        }
        out.push(TensorMut {
            group: ParamGroup::Classifier,
            name: "classifier.weight".into(),
            data: self.classifier.weight.as_mut_slice(),
        });
        out.push(TensorMut {
            group: ParamGroup::Classifier,
            name: "classifier.bias".into(),
            data: &mut self.classifier.bias,
        });
        out
    }
}
