//! First-order optimizers over flat parameter vectors. All steps here are
//! ascent steps: the objectives in this crate are log-likelihoods.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, lr: f64, n_params: usize) -> Self {
        Optimizer { spec, lr, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// Moves `params` along `grad` (gradient of the objective to maximize).
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        match self.spec {
            OptimizerSpec::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += self.lr * g;
                }
            }
            OptimizerSpec::Adam { beta1, beta2, eps } => {
                self.step += 1;
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] += self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_maximizes_concave_quadratic() {
        // f(x) = -(x - 3)^2 - 2 (y + 1)^2
        let mut x = vec![0.0, 0.0];
        let mut opt = Optimizer::new(OptimizerSpec::default(), 0.05, 2);
        for _ in 0..3000 {
            let g = vec![-2.0 * (x[0] - 3.0), -4.0 * (x[1] + 1.0)];
            opt.ascend(&mut x, &g);
        }
        assert!((x[0] - 3.0).abs() < 1e-3 && (x[1] + 1.0).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn first_adam_step_has_learning_rate_size() {
        let mut x = vec![0.0];
        Optimizer::new(OptimizerSpec::default(), 0.01, 1).ascend(&mut x, &[123.0]);
        assert!((x[0] - 0.01).abs() < 1e-9);
        let mut x = vec![1.0];
        Optimizer::new(OptimizerSpec::Sgd, 0.5, 1).ascend(&mut x, &[2.0]);
        assert_eq!(x[0], 2.0);
    }

    #[test]
    fn spec_parses() {
        let s: OptimizerSpec = serde_json::from_str(r#"{"kind":"adam"}"#).unwrap();
        assert_eq!(s, OptimizerSpec::default());
        let s: OptimizerSpec = serde_json::from_str(r#"{"kind":"sgd"}"#).unwrap();
        assert_eq!(s, OptimizerSpec::Sgd);
        assert!(serde_json::from_str::<OptimizerSpec>(r#"{"kind":"adam","lr":1}"#).is_err());
    }
}
