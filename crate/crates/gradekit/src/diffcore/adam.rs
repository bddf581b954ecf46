//! Adam optimizer with bias correction.

use ndarray::ArrayD;

use super::Element;
use crate::error::{Error, Result};

/// Hyperparameters; `beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8` unless
/// overridden.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T: Element> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Element> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        AdamConfig {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            epsilon: T::from_f64(1e-8),
        }
    }
}

/// Per-parameter first and second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Element> {
    config: AdamConfig<T>,
    t: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig<T>) -> Self {
        AdamState { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig<T> {
        &self.config
    }

    /// One Adam update over aligned parameter and gradient lists. Moments
    /// are allocated lazily on the first call; shapes must stay fixed.
    pub fn step(&mut self, params: &mut [ArrayD<T>], grads: &[ArrayD<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam got {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state tracks {} params, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let one = T::one();
        let bc1 = one - beta1.powi(self.t as i32);
        let bc2 = one - beta2.powi(self.t as i32);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "adam param shape {:?} vs grad {:?} vs moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            let (ps, gs) = (
                p.as_slice_mut().expect("standard layout"),
                g.as_slice().expect("standard layout"),
            );
            let ms = m.as_slice_mut().expect("standard layout");
            let vs = v.as_slice_mut().expect("standard layout");
            for i in 0..ps.len() {
                let gi = gs[i];
                ms[i] = beta1 * ms[i] + (one - beta1) * gi;
                vs[i] = beta2 * vs[i] + (one - beta2) * gi * gi;
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                ps[i] = ps[i] - lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
