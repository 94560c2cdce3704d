use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Non-centered RMSprop with a stepwise exponential learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub accum: Vec<Tensor>,
    pub step_count: u64,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub rho: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmspropConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            decay_factor: 0.94,
            decay_every: 100_000,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

impl OptimizerState {
    pub fn new<'a>(
        cfg: RmspropConfig,
        params: impl IntoIterator<Item = &'a Tensor>,
    ) -> Result<Self> {
        if !(cfg.base_lr > 0.0) {
            return Err(Error::InvalidValue(format!("base lr {}", cfg.base_lr)));
        }
        if !(cfg.decay_factor > 0.0 && cfg.decay_factor <= 1.0) {
            return Err(Error::InvalidValue(format!(
                "decay factor {} not in (0, 1]",
                cfg.decay_factor
            )));
        }
        if cfg.decay_every == 0 {
            return Err(Error::InvalidValue("decay_every must be positive".into()));
        }
        Ok(Self {
            accum: params.into_iter().map(Tensor::zeros_like).collect(),
            step_count: 0,
            base_lr: cfg.base_lr,
            decay_factor: cfg.decay_factor,
            decay_every: cfg.decay_every,
            rho: cfg.rho,
            eps: cfg.eps,
        })
    }

    /// Learning rate for the next step. The decay is applied by repeated
    /// multiplication so consecutive boundaries differ by exactly one factor.
    pub fn effective_lr(&self) -> f64 {
        let mut lr = self.base_lr;
        for _ in 0..self.step_count / self.decay_every {
            lr *= self.decay_factor;
        }
        lr
    }

    /// One update over all parameters, then advance the step counter.
    /// Returns the learning rate that was used.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<f64> {
        if params.len() != self.accum.len() || grads.len() != self.accum.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.accum.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), a) in params.iter().zip(grads).zip(&self.accum) {
            if p.shape() != g.shape() || p.shape() != a.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "param {:?}, grad {:?}, accumulator {:?}",
                    p.shape(),
                    g.shape(),
                    a.shape()
                )));
            }
        }
        let lr = self.effective_lr();
        let (rho, eps) = (self.rho, self.eps);
        for ((p, g), a) in params.iter_mut().zip(grads).zip(self.accum.iter_mut()) {
            for ((pv, &gv), av) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(a.data_mut().iter_mut())
            {
                *av = rho * *av + (1.0 - rho) * gv * gv;
                *pv -= lr * gv / (av.sqrt() + eps);
            }
        }
        self.step_count += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(decay_every: u64) -> RmspropConfig {
        RmspropConfig {
            decay_every,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut st = OptimizerState::new(cfg(10), [&p]).unwrap();
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn schedule_boundary() {
        let p = Tensor::zeros(&[1]);
        let mut st = OptimizerState::new(cfg(5), [&p]).unwrap();
        assert_eq!(st.effective_lr(), 5e-4);
        st.step_count = 4;
        assert_eq!(st.effective_lr(), 5e-4);
        st.step_count = 5;
        assert_eq!(st.effective_lr(), 5e-4 * 0.94);
        st.step_count = 10;
        assert_eq!(st.effective_lr(), 5e-4 * 0.94 * 0.94);
        let mut prev = f64::INFINITY;
        for s in 0..100 {
            st.step_count = s;
            assert!(st.effective_lr() <= prev);
            prev = st.effective_lr();
        }
    }

    #[test]
    fn single_step_by_hand() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let g = Tensor::from_vec(vec![1.0]);
        let mut st = OptimizerState::new(cfg(100), [&p]).unwrap();
        let lr = st.step(&mut [&mut p], &[&g]).unwrap();
        let acc = st.accum[0].data()[0];
        assert!((acc - 0.1).abs() < 1e-15);
        let expect = -lr * 1.0 / (acc.sqrt() + 1e-8);
        assert_eq!(p.data()[0], expect);
        assert!(st.accum[0].data()[0] >= 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = OptimizerState::new(cfg(1), [&p]).unwrap();
        assert!(matches!(
            st.step(&mut [&mut p], &[&g]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn rejects_bad_schedule() {
        let p = Tensor::zeros(&[1]);
        let bad = RmspropConfig {
            decay_factor: 1.5,
            ..Default::default()
        };
        assert!(OptimizerState::new(bad, [&p]).is_err());
        assert!(OptimizerState::new(cfg(0), [&p]).is_err());
    }
}
