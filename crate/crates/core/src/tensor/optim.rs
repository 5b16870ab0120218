use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Updates parameters in place from their gradient accumulators. Parameters that do
/// not require gradients are skipped.
pub trait Optimizer {
    fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()>;
    fn learning_rate(&self) -> f64;
}

fn check_lr(lr: f64) -> Result<()> {
    if lr.is_finite() && lr > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "learning rate must be positive and finite, got {lr}"
        )))
    }
}

/// Plain SGD, no momentum, no decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Sgd { lr })
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        for (_, p) in params.iter_mut() {
            let (value, grad) = p.value_and_grad_mut();
            let Some(grad) = grad else { continue };
            for (w, g) in value.iter_mut().zip(grad.iter()) {
                *w -= self.lr * g;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// First and second moment estimates per parameter name, plus the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_params(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_params(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        check_lr(lr)?;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(Error::invalid(format!(
                "adam needs betas in [0,1) and positive epsilon, got {beta1}, {beta2}, {eps}"
            )));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            state: AdamState::default(),
        })
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn with_state(mut self, state: AdamState) -> Self {
        self.state = state;
        self
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let (value, grad) = p.value_and_grad_mut();
            let Some(grad) = grad else { continue };
            let n = value.len();
            let (m, v) = self
                .state
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(Error::invalid(format!(
                    "adam state for {name} has {} entries, parameter has {n}",
                    m.len()
                )));
            }
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weight(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap().with_requires_grad();
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    #[test]
    fn sgd_hand_update() {
        let mut w = weight(1.0, 2.0);
        let mut opt = Sgd::new(0.1).unwrap();
        opt.step(&mut [("w".into(), &mut w)]).unwrap();
        assert!((w.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut a = weight(1.5, 0.0);
        let mut b = weight(-0.25, 0.0);
        Sgd::new(0.1)
            .unwrap()
            .step(&mut [("a".into(), &mut a)])
            .unwrap();
        Adam::new(0.1)
            .unwrap()
            .step(&mut [("b".into(), &mut b)])
            .unwrap();
        assert_eq!(a.data()[0], 1.5);
        assert_eq!(b.data()[0], -0.25);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut w = weight(1.0, 2.0);
        let mut opt = Adam::new(0.001).unwrap();
        opt.step(&mut [("w".into(), &mut w)]).unwrap();
        // At t=1 the bias-corrected moments are exactly g and g*g.
        let expected = 1.0 - 0.001 * 2.0 / (2.0 + 1e-8);
        assert!((w.data()[0] - expected).abs() < 1e-15);
        assert!((1.0 - w.data()[0] - 0.001).abs() < 1e-10);
        assert_eq!(opt.state().step, 1);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut w = Tensor::new(vec![1], vec![3.0]).unwrap();
        let mut opt = Adam::new(0.1).unwrap();
        opt.step(&mut [("w".into(), &mut w)]).unwrap();
        assert_eq!(w.data()[0], 3.0);
        assert!(opt.state().moments.is_empty());
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        assert!(Sgd::new(0.0).is_err());
        assert!(Sgd::new(-1.0).is_err());
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(f64::NAN).is_err());
    }
}
