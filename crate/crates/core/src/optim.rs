//! First-order parameter updates. Both rules descend the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerSpec {
    /// `v ← μv + g; θ ← θ − lr·v`.
    Sgd { lr: f64, momentum: f64 },
    /// Bias-corrected Adam.
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimizerSpec {
    pub const SGD_DEFAULT: OptimizerSpec = OptimizerSpec::Sgd {
        lr: 0.06,
        momentum: 0.9,
    };
    pub const ADAM_DEFAULT: OptimizerSpec = OptimizerSpec::Adam {
        lr: 1e-4,
        beta1: 0.5,
        beta2: 0.9,
        eps: 1e-8,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerSpec::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer with its per-parameter state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    spec: OptimizerSpec,
    /// Velocity (SGD) or first moment (Adam).
    pub first: Vec<Vec<f64>>,
    /// Second moment (Adam only; empty for SGD).
    pub second: Vec<Vec<f64>>,
    pub t: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, params: &[Tensor]) -> Result<Self> {
        spec.validate()?;
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        let second = match spec {
            OptimizerSpec::Adam { .. } => zeros(),
            OptimizerSpec::Sgd { .. } => Vec::new(),
        };
        Ok(Optimizer {
            spec,
            first: zeros(),
            second,
            t: 0,
        })
    }

    pub fn spec(&self) -> OptimizerSpec {
        self.spec
    }

    /// One update of every parameter with its gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(shape_err!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(shape_err!("gradient length {} for parameter of {}", g.len(), p.len()));
            }
        }
        self.t += 1;
        match self.spec {
            OptimizerSpec::Sgd { lr, momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = momentum * *vi + gi;
                        *x -= lr * *vi;
                    }
                }
            }
            OptimizerSpec::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Vec<Tensor> {
        vec![Tensor::new(vec![v.len()], v.to_vec()).unwrap()]
    }

    #[test]
    fn plain_sgd() {
        let mut p = param(&[1.0, 2.0]);
        let mut o = Optimizer::new(OptimizerSpec::Sgd { lr: 1.0, momentum: 0.0 }, &p).unwrap();
        o.step(&mut p, &[vec![0.5, -1.0]]).unwrap();
        assert_eq!(p[0].data(), &[0.5, 3.0]);
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let mut p = param(&[0.0, 0.0, 0.0]);
        let mut o = Optimizer::new(OptimizerSpec::ADAM_DEFAULT, &p).unwrap();
        o.step(&mut p, &[vec![3.0, -0.02, 1e3]]).unwrap();
        for (x, s) in p[0].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 1e-4).abs() < 1e-9);
        }
    }

    #[test]
    fn momentum_velocity_converges() {
        let mut p = param(&[0.0]);
        let mut o = Optimizer::new(OptimizerSpec::Sgd { lr: 0.0, momentum: 0.9 }, &p).unwrap();
        for _ in 0..200 {
            o.step(&mut p, &[vec![2.0]]).unwrap();
        }
        // geometric series: g·(1 − 0.9²⁰⁰)/(1 − 0.9)
        assert!((o.first[0][0] - 2.0 / 0.1).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = param(&[0.0, 1.0]);
        let mut o = Optimizer::new(OptimizerSpec::SGD_DEFAULT, &p).unwrap();
        assert!(o.step(&mut p, &[vec![1.0]]).is_err());
        assert!(o.step(&mut p, &[]).is_err());
        assert!(Optimizer::new(OptimizerSpec::Sgd { lr: 0.1, momentum: 1.0 }, &p).is_err());
    }
}
