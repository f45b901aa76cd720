//! SGD with momentum and L2 weight decay folded into the gradient.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            momentum: 0.95,
            weight_decay: 1e-5,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if !ok {
            return Err(Error::Config(format!(
                "invalid SGD hyperparameters: lr {}, momentum {}, weight_decay {}",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: SgdConfig,
    /// One buffer per parameter tensor, in visit order.
    pub velocity: Vec<Array2<T>>,
    pub step_count: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<P: Parameters<T>>(params: &P, config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: params
                .named_tensors()
                .into_iter()
                .map(|(_, t)| Array2::zeros(t.dim()))
                .collect(),
            step_count: 0,
        })
    }
}

/// `g += wd p; v = mu v + g; p -= lr v`, with `lr` overridable for
/// schedules. Nothing is modified if any gradient is non-finite.
pub fn sgd_step_with_lr<T: Scalar, P: Parameters<T>>(
    params: &mut P,
    grads: &[Array2<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    let names = params.named_tensors();
    if names.len() != grads.len() || names.len() != state.velocity.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} momentum buffers",
            names.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((name, p), g) in names.iter().zip(grads) {
        if p.dim() != g.dim() {
            return Err(Error::Shape(format!(
                "gradient for {name} is {:?}, parameter {:?}",
                g.dim(),
                p.dim()
            )));
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                location: format!("gradient of {name}"),
            });
        }
    }
    drop(names);
    let (lr, mu, wd) = (
        T::of(lr),
        T::of(state.config.momentum),
        T::of(state.config.weight_decay),
    );
    let mut i = 0;
    let velocity = &mut state.velocity;
    params.visit_mut("", &mut |_, p| {
        let v = &mut velocity[i];
        ndarray::Zip::from(p).and(v).and(&grads[i]).for_each(|p, v, &g| {
            let g = g + wd * *p;
            *v = mu * *v + g;
            *p -= lr * *v;
        });
        i += 1;
    });
    state.step_count += 1;
    Ok(())
}

pub fn sgd_step<T: Scalar, P: Parameters<T>>(
    params: &mut P,
    grads: &[Array2<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let lr = state.config.lr;
    sgd_step_with_lr(params, grads, state, lr)
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Linear, ZeroInit};
    use ndarray::array;

    fn scalar(v: f64) -> Linear<f64> {
        let mut l = Linear::new(&mut ZeroInit, 1, 1);
        l.weight[[0, 0]] = v;
        l
    }

    #[test]
    fn zero_grad_only_decays() {
        let mut p = scalar(2.0);
        let mut s = OptimizerState::new(&p, SgdConfig::default()).unwrap();
        let g = vec![array![[0.0]], array![[0.0]]];
        sgd_step(&mut p, &g, &mut s).unwrap();
        let expected = 2.0 * (1.0 - 0.003 * 1e-5);
        assert!((p.weight[[0, 0]] - expected).abs() < 1e-15);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn two_steps_by_hand() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(&p, cfg).unwrap();
        sgd_step(&mut p, &[array![[0.5]], array![[0.0]]], &mut s).unwrap();
        // g = 0.5 + 0.01, v = 0.51, p = 1 - 0.051
        assert!((p.weight[[0, 0]] - 0.949).abs() < 1e-12);
        sgd_step(&mut p, &[array![[-0.2]], array![[0.0]]], &mut s).unwrap();
        let g = -0.2 + 0.01 * 0.949;
        let v = 0.9 * 0.51 + g;
        assert!((p.weight[[0, 0]] - (0.949 - 0.1 * v)).abs() < 1e-12);
    }

    #[test]
    fn plain_descent_without_momentum() {
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = scalar(3.0);
        let mut s = OptimizerState::new(&p, cfg).unwrap();
        for _ in 0..3 {
            sgd_step(&mut p, &[array![[1.0]], array![[2.0]]], &mut s).unwrap();
        }
        assert_eq!(p.weight[[0, 0]], 1.5);
        assert_eq!(p.bias[[0, 0]], -3.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(&p, SgdConfig::default()).unwrap();
        let err = sgd_step(&mut p, &[array![[0.0]], array![[f64::NAN]]], &mut s).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
        assert_eq!(p.weight[[0, 0]], 1.0);
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let p = scalar(0.0);
        for cfg in [
            SgdConfig {
                lr: 0.0,
                ..Default::default()
            },
            SgdConfig {
                momentum: 1.0,
                ..Default::default()
            },
            SgdConfig {
                weight_decay: -1.0,
                ..Default::default()
            },
        ] {
            assert!(OptimizerState::new(&p, cfg).is_err());
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }
}
