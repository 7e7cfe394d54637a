//! Stochastic gradient descent with optional heavy-ball momentum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD state: one velocity buffer per parameter, created lazily.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        Ok(Self {
            momentum,
            velocity: Vec::new(),
        })
    }

    /// `v <- momentum * v + grad; p <- p - lr * v`, then clears the grads.
    ///
    /// Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate {lr}")));
        }
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::MissingGrad(i));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = p.grad().expect("checked above").to_vec();
            if self.momentum == 0.0 {
                p.data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(w, gi)| *w -= lr * gi);
            } else {
                for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                    *vi = self.momentum * *vi + gi;
                    *w -= lr * *vi;
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// One plain SGD step over `params` (momentum 0 keeps no state).
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64, momentum: f64, state: &mut Sgd) -> Result<()> {
    if state.momentum != momentum {
        *state = Sgd::new(momentum)?;
    }
    state.step(params, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).with_grad();
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    #[test]
    fn single_step() {
        let mut p = param(1.0, 0.5);
        let mut opt = Sgd::new(0.0).unwrap();
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = param(3.25, 0.0);
        let mut opt = Sgd::new(0.9).unwrap();
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.data()[0], 3.25);
    }

    #[test]
    fn momentum_unrolls() {
        let mut p = param(0.0, 1.0);
        let mut opt = Sgd::new(0.9).unwrap();
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-12);
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut p = Tensor::scalar(1.0).with_grad();
        let mut opt = Sgd::new(0.0).unwrap();
        assert!(matches!(
            opt.step(&mut [&mut p], 0.1),
            Err(Error::MissingGrad(0))
        ));
    }

    #[test]
    fn bad_momentum_rejected() {
        assert!(Sgd::new(1.0).is_err());
    }
}
