//! AdamW with decoupled weight decay and linear learning-rate warmup.
//!
//! The effective learning rate ramps linearly over the first `warmup_steps`
//! updates (`lr * t / warmup_steps` at 1-based step `t`) and stays constant
//! afterwards — there is no decay phase. Weight decay is decoupled from the
//! moment estimates, so zero decay reduces the update to plain Adam with
//! bias correction:
//!
//! ```text
//! m_t = b1*m + (1-b1)*g        m_hat = m_t / (1 - b1^t)
//! v_t = b2*v + (1-b2)*g^2      v_hat = v_t / (1 - b2^t)
//! theta = theta*(1 - lr_t*wd) - lr_t * m_hat / (sqrt(v_hat) + eps)
//! ```

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, TensorId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 2e-5,
            warmup_steps: 120,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state: step counter plus per-parameter moment buffers, keyed by
/// parameter name so state survives checkpoint round trips in a stable
/// order.
#[derive(Debug, Clone)]
pub struct Optimizer<S: Scalar = f64> {
    pub config: OptimConfig,
    step_count: usize,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Effective learning rate at 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t < self.config.warmup_steps {
            self.config.learning_rate * t as f64 / self.config.warmup_steps as f64
        } else {
            self.config.learning_rate
        }
    }

    /// Apply one update to every named parameter. Every parameter must have
    /// a populated, finite gradient.
    pub fn step(&mut self, graph: &mut Graph<S>, params: &[(String, TensorId)]) -> Result<()> {
        for (name, id) in params {
            match graph.grad(*id) {
                None => {
                    return Err(Error::Usage(format!(
                        "optimizer step with missing gradient for parameter '{name}'"
                    )))
                }
                Some(g) => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient for parameter '{name}'"
                        )));
                    }
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let lr = S::from_f64(self.lr_at(t));
        let b1 = S::from_f64(self.config.beta1);
        let b2 = S::from_f64(self.config.beta2);
        let eps = S::from_f64(self.config.eps);
        let wd = S::from_f64(self.config.weight_decay);
        let bc1 = S::one() - S::from_f64(self.config.beta1.powi(t as i32));
        let bc2 = S::one() - S::from_f64(self.config.beta2.powi(t as i32));
        let one = S::one();
        for (name, id) in params {
            let entry = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Vec::new(), Vec::new()));
            graph.apply_to_data(*id, |data, grad| {
                let g = grad.expect("checked above");
                if entry.0.is_empty() {
                    entry.0 = vec![S::zero(); data.len()];
                    entry.1 = vec![S::zero(); data.len()];
                }
                let (m, v) = (&mut entry.0, &mut entry.1);
                for i in 0..data.len() {
                    m[i] = b1 * m[i] + (one - b1) * g[i];
                    v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] = data[i] * (one - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }

    /// Clear gradients on every named parameter.
    pub fn zero_grads(&self, graph: &mut Graph<S>, params: &[(String, TensorId)]) {
        for (_, id) in params {
            graph.zero_grad(*id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_graph(theta: f64) -> (Graph<f64>, Vec<(String, TensorId)>) {
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(1, 1, vec![theta]).unwrap();
        (g, vec![("theta".to_string(), p)])
    }

    fn set_grad(g: &mut Graph<f64>, id: TensorId, grad: f64) {
        // Drive the gradient through a real backward pass: loss = grad * theta.
        let c = g.scalar(grad);
        let prod = g.mul(c, id).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
    }

    #[test]
    fn zero_gradient_and_zero_decay_leave_parameters_unchanged() {
        let (mut g, params) = one_param_graph(1.25);
        set_grad(&mut g, params[0].1, 0.0);
        let mut opt: Optimizer<f64> = Optimizer::new(OptimConfig {
            learning_rate: 0.1,
            warmup_steps: 0,
            weight_decay: 0.0,
            ..OptimConfig::default()
        });
        opt.step(&mut g, &params).unwrap();
        assert_eq!(g.data(params[0].1), &[1.25]);
    }

    #[test]
    fn warmup_scales_first_step_learning_rate() {
        let cfg = OptimConfig {
            learning_rate: 2e-5,
            warmup_steps: 120,
            ..OptimConfig::default()
        };
        let opt: Optimizer<f64> = Optimizer::new(cfg);
        assert!((opt.lr_at(1) - 2e-5 / 120.0).abs() < 1e-20);
        assert!((opt.lr_at(119) - 2e-5 * 119.0 / 120.0).abs() < 1e-20);
        assert_eq!(opt.lr_at(120), 2e-5);
        assert_eq!(opt.lr_at(500), 2e-5);
    }

    #[test]
    fn two_steps_match_hand_unrolled_update() {
        // Scalar oracle, written out longhand and independently of the
        // implementation above.
        let (lr, b1, b2, eps, wd) = (0.1f64, 0.9, 0.999, 1e-8, 0.1);
        let grads = [0.5f64, -0.25];
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta = theta * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps);
        }

        let (mut g, params) = one_param_graph(1.0);
        let mut opt: Optimizer<f64> = Optimizer::new(OptimConfig {
            learning_rate: lr,
            warmup_steps: 0,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        });
        for gv in grads {
            opt.zero_grads(&mut g, &params);
            set_grad(&mut g, params[0].1, gv);
            opt.step(&mut g, &params).unwrap();
        }
        let got = g.data(params[0].1)[0];
        assert!(
            (got - theta).abs() < 1e-12,
            "optimizer {got} vs hand-unrolled {theta}"
        );
    }

    #[test]
    fn missing_gradient_is_a_usage_error_naming_the_parameter() {
        let (mut g, params) = one_param_graph(0.0);
        let mut opt: Optimizer<f64> = Optimizer::new(OptimConfig::default());
        let err = opt.step(&mut g, &params).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(err.to_string().contains("theta"), "{err}");
    }

    #[test]
    fn non_finite_gradient_is_a_numeric_error() {
        let (mut g, params) = one_param_graph(0.0);
        set_grad(&mut g, params[0].1, f64::MAX);
        set_grad(&mut g, params[0].1, f64::MAX); // accumulate to overflow
        // f64::MAX + f64::MAX overflows to +inf in the accumulated grad.
        let mut opt: Optimizer<f64> = Optimizer::new(OptimConfig::default());
        let err = opt.step(&mut g, &params).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert!(err.to_string().contains("theta"));
    }
}
