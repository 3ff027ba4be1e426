//! AdamW with linear warmup and cosine decay.

use super::batch::Gradients;
use super::{ModelParams, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_epochs: 10.0,
            total_epochs: 150.0,
        }
    }
}

impl AdamWConfig {
    /// Learning rate at a (fractional) epoch: linear from 0 up to `base_lr`
    /// over the warmup, then half-cosine down to 0 at `total_epochs`.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        if self.warmup_epochs > 0.0 && epoch < self.warmup_epochs {
            return self.base_lr * (epoch / self.warmup_epochs).max(0.0);
        }
        let span = self.total_epochs - self.warmup_epochs;
        if span <= 0.0 {
            return self.base_lr;
        }
        let progress = ((epoch - self.warmup_epochs) / span).clamp(0.0, 1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moment accumulators of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update of a single tensor, decoupled weight decay first.
pub fn adamw_update(param: &mut [f64], grad: &[f64], state: &mut Moments, lr: f64, cfg: &AdamWConfig) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), state.m.len());
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *p *= decay;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Optimizer state for a whole model. Expert moments are allocated the
/// first time the expert receives a gradient.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    gate: Vec<Moments>,
    experts: Vec<Option<Vec<Moments>>>,
    classifier: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, model: &ModelParams) -> Self {
        let sized = |group: ParamGroup| -> Vec<Moments> {
            model
                .tensors()
                .iter()
                .filter(|t| t.group == group)
                .map(|t| Moments::new(t.data.len()))
                .collect()
        };
        Self {
            config,
            gate: sized(ParamGroup::Gate),
            experts: vec![None; model.n_experts()],
            classifier: sized(ParamGroup::Classifier),
        }
    }

    /// Applies one step at fractional epoch `epoch`; returns the learning
    /// rate used. Experts without a gradient this step are skipped entirely.
    pub fn step(&mut self, model: &mut ModelParams, grads: &Gradients, epoch: f64) -> f64 {
        let lr = self.config.lr_at(epoch);
        let cfg = self.config;

        let gate_grads = [grads.gate.weight.as_slice(), &grads.gate.bias[..]];
        let gate_params = [model.gate.weight.as_mut_slice(), &mut model.gate.bias[..]];
        for ((p, g), s) in gate_params.into_iter().zip(gate_grads).zip(&mut self.gate) {
            adamw_update(p, g, s, lr, &cfg);
        }

        for ((e, g), state) in model.experts.iter_mut().zip(&grads.experts).zip(&mut self.experts) {
            let Some(g) = g else { continue };
            let state = state.get_or_insert_with(|| {
                vec![
                    Moments::new(e.w1.as_slice().len()),
                    Moments::new(e.b1.len()),
                    Moments::new(e.w2.as_slice().len()),
                    Moments::new(e.b2.len()),
                ]
            });
            let ps = [e.w1.as_mut_slice(), &mut e.b1[..], e.w2.as_mut_slice(), &mut e.b2[..]];
            let gs = [g.w1.as_slice(), &g.b1[..], g.w2.as_slice(), &g.b2[..]];
            for ((p, g), s) in ps.into_iter().zip(gs).zip(state.iter_mut()) {
                adamw_update(p, g, s, lr, &cfg);
            }
        }

        let cls_grads = [grads.classifier.weight.as_slice(), &grads.classifier.bias[..]];
        let cls_params = [model.classifier.weight.as_mut_slice(), &mut model.classifier.bias[..]];
        for ((p, g), s) in cls_params.into_iter().zip(cls_grads).zip(&mut self.classifier) {
            adamw_update(p, g, s, lr, &cfg);
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut s = Moments::new(3);
        for _ in 0..5 {
            adamw_update(&mut p, &[0.0; 3], &mut s, 1e-2, &cfg);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn warmup_and_cosine_endpoints() {
        let cfg = AdamWConfig::default();
        assert_eq!(cfg.lr_at(0.0), 0.0);
        assert!((cfg.lr_at(5.0) - 5e-4).abs() < 1e-18);
        assert_eq!(cfg.lr_at(10.0), 1e-3);
        assert!((cfg.lr_at(80.0) - 5e-4).abs() < 1e-15);
        assert!(cfg.lr_at(150.0).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for e in 10..=150 {
            let lr = cfg.lr_at(e as f64);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn scalar_step_matches_hand_rolled() {
        let cfg = AdamWConfig {
            weight_decay: 0.05,
            ..Default::default()
        };
        let lr = 1e-3;
        let mut p = vec![0.5];
        let mut s = Moments::new(1);
        adamw_update(&mut p, &[1.0], &mut s, lr, &cfg);
        // m = 0.1, v = 0.001; bias-corrected both give m_hat = 1, v_hat = 1.
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let want = 0.5 * (1.0 - lr * 0.05) - lr * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);

        // second step with g = -2
        adamw_update(&mut p, &[-2.0], &mut s, lr, &cfg);
        let m = 0.9 * 0.1 + 0.1 * -2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let want2 = want * (1.0 - lr * 0.05) - lr * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!((p[0] - want2).abs() < 1e-15);
    }
}
