//! Adam with linear warmup and linear decay.

use serde::{Deserialize, Serialize};

use crate::model::Parameters;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Multiplier on the base learning rate at zero-based `step` of `total`.
/// Ramps linearly over `warmup` steps, then decays linearly toward zero.
pub fn linear_schedule(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        (total - step.min(total)) as f64 / (total - warmup) as f64
    } else {
        1.0
    }
}

/// Number of warmup steps for a ratio of the total (rounded up).
pub fn warmup_steps(total: usize, ratio: f64) -> usize {
    (total as f64 * ratio).ceil() as usize
}

/// Adam over flat slices: one moment pair per parameter entry.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(config: AdamConfig, params: &Parameters<T>) -> Self {
        let shapes: Vec<usize> = params
            .named_arrays()
            .iter()
            .map(|(_, m)| m.data().len())
            .collect();
        Self::new(config, &shapes)
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update with learning rate `lr`. `slots` pairs each parameter slice
    /// with its gradient; `None` gradients mark frozen slices.
    pub fn step_slices(&mut self, lr: f64, slots: Vec<(&mut [T], Option<&[T]>)>) {
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(self.t);
        let bc2 = T::one() - b2.powi(self.t);
        let lr = T::lit(lr);
        let eps = T::lit(c.eps);
        let wd = T::lit(c.weight_decay);
        for (i, (p, g)) in slots.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p[j]);
            }
        }
    }

    /// Applies `grads` to the trainable arrays of `params`.
    pub fn step(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>, lr: f64) {
        let trainable: Vec<bool> = params
            .named_arrays()
            .iter()
            .map(|(n, _)| params.is_trainable(n))
            .collect();
        let grad_arrays = grads.named_arrays();
        let slots = params
            .named_arrays_mut()
            .into_iter()
            .zip(&grad_arrays)
            .zip(trainable)
            .map(|(((_, p), (_, g)), train)| (p.data_mut(), train.then(|| g.data())))
            .collect();
        self.step_slices(lr, slots);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_matches_update_rule() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), &[2]);
        let mut p = [0.5, -1.0];
        let g = vec![0.2, -3.0];
        adam.step_slices(0.01, vec![(&mut p[..], Some(&g[..]))]);
        // first step: m̂ = g, v̂ = g², update = lr · g / (|g| + eps)
        for (pi, (p0, gi)) in p.iter().zip([0.5f64, -1.0].iter().zip(&g)) {
            let expect = p0 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-15);
        }
        // second step with the same gradient, computed by hand
        adam.step_slices(0.01, vec![(&mut p[..], Some(&g[..]))]);
        let (b1, b2) = (0.9f64, 0.999f64);
        for (k, gi) in g.iter().enumerate() {
            let m = (1.0 - b1) * gi * (1.0 + b1);
            let v = (1.0 - b2) * gi * gi * (1.0 + b2);
            let mhat = m / (1.0 - b1 * b1);
            let vhat = v / (1.0 - b2 * b2);
            let p0 = [0.5f64, -1.0][k] - 0.01 * gi / (gi.abs() + 1e-8);
            let expect = p0 - 0.01 * mhat / (vhat.sqrt() + 1e-8);
            assert!((p[k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn frozen_slices_do_not_move() {
        let mut adam = Adam::<f64>::new(AdamConfig::default(), &[1, 1]);
        let mut a = [1.0];
        let mut b = [1.0];
        adam.step_slices(
            0.1,
            vec![(&mut a[..], Some(&[1.0][..])), (&mut b[..], None)],
        );
        assert!(a[0] < 1.0);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let total = 100;
        let warm = warmup_steps(total, 0.03);
        assert_eq!(warm, 3);
        assert!((linear_schedule(0, total, warm) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(linear_schedule(2, total, warm), 1.0);
        assert_eq!(linear_schedule(3, total, warm), 1.0);
        assert!(linear_schedule(99, total, warm) > 0.0);
        assert!(linear_schedule(50, total, warm) < 1.0);
    }
}
