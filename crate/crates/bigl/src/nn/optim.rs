//! Optimizers over [`ParamSet`]s. A zero learning rate is an exact no-op:
//! neither parameters nor optimizer state are touched, so checkpoints and
//! digests are bitwise unchanged.

use ndarray::ArrayD;

use super::params::ParamSet;
use super::Scalar;

/// SGD with classical momentum: `v = m*v + g; p -= lr * v`.
pub struct SgdMomentum<F: Scalar> {
    momentum: F,
    velocity: Vec<ArrayD<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum { momentum: F::from_f64(momentum), velocity: Vec::new() }
    }

    /// Velocity buffers in parameter order; empty before the first step.
    pub fn velocity(&self) -> &[ArrayD<F>] {
        &self.velocity
    }

    /// Restore velocity buffers (checkpoint resume).
    pub fn set_velocity(&mut self, velocity: Vec<ArrayD<F>>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Option<ArrayD<F>>], lr: F) {
        if lr == F::zero() {
            return;
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect();
        }
        assert_eq!(grads.len(), self.velocity.len());
        let m = self.momentum;
        for ((vel, grad), (_, p)) in self.velocity.iter_mut().zip(grads).zip(params.iter_mut()) {
            match grad {
                Some(g) => vel.zip_mut_with(g, |v, &gi| *v = m * *v + gi),
                None => vel.mapv_inplace(|v| m * v),
            }
            p.zip_mut_with(vel, |pi, &v| *pi = *pi - lr * v);
        }
    }
}

/// Adam with bias correction.
pub struct Adam<F: Scalar> {
    beta1: F,
    beta2: F,
    eps: F,
    t: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1: F::from_f64(beta1),
            beta2: F::from_f64(beta2),
            eps: F::from_f64(eps),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// (step count, first moments, second moments) in parameter order;
    /// moment vectors are empty before the first step.
    pub fn state(&self) -> (u64, &[ArrayD<F>], &[ArrayD<F>]) {
        (self.t, &self.m, &self.v)
    }

    /// Restore optimizer state (checkpoint resume).
    pub fn set_state(&mut self, t: u64, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Option<ArrayD<F>>], lr: F) {
        if lr == F::zero() {
            return;
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|(_, p)| ArrayD::zeros(p.raw_dim())).collect();
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = F::one() - b1.powi(self.t as i32);
        let bc2 = F::one() - b2.powi(self.t as i32);
        for (((m, v), grad), (_, p)) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grads)
            .zip(params.iter_mut())
        {
            match grad {
                Some(g) => {
                    m.zip_mut_with(g, |mi, &gi| *mi = b1 * *mi + (F::one() - b1) * gi);
                    v.zip_mut_with(g, |vi, &gi| *vi = b2 * *vi + (F::one() - b2) * gi * gi);
                }
                None => {
                    m.mapv_inplace(|mi| b1 * mi);
                    v.mapv_inplace(|vi| b2 * vi);
                }
            }
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{scalar_param, ParamSet};
    use ndarray::{ArrayD, IxDyn};

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("w", scalar_param(v));
        p
    }

    fn grad(v: f64) -> Vec<Option<ArrayD<f64>>> {
        vec![Some(ArrayD::from_elem(IxDyn(&[]), v))]
    }

    #[test]
    fn sgd_momentum_two_steps_match_hand_computation() {
        let mut p = one_param(1.0);
        let mut opt = SgdMomentum::new(0.9);
        opt.step(&mut p, &grad(0.5), 0.1);
        // v1 = 0.5, p = 1 - 0.05 = 0.95
        assert!((p.get("w").iter().next().unwrap() - 0.95).abs() < 1e-12);
        opt.step(&mut p, &grad(0.2), 0.1);
        // v2 = 0.9*0.5 + 0.2 = 0.65, p = 0.95 - 0.065 = 0.885
        assert!((p.get("w").iter().next().unwrap() - 0.885).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_signed_unit_step() {
        let mut p = one_param(0.0);
        let mut opt = Adam::new(0.9, 0.999, 1e-8);
        opt.step(&mut p, &grad(3.0), 0.01);
        // bias-corrected first step: lr * g/|g| up to eps
        let w = *p.get("w").iter().next().unwrap();
        assert!((w + 0.01).abs() < 1e-6, "{w}");
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let mut p = one_param(0.123456789);
        let before = p.digest();
        let mut sgd = SgdMomentum::new(0.9);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        for _ in 0..5 {
            sgd.step(&mut p, &grad(1.7), 0.0);
            adam.step(&mut p, &grad(-2.3), 0.0);
        }
        assert_eq!(p.digest(), before);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn missing_gradient_decays_momentum_only() {
        let mut p = one_param(1.0);
        let mut opt = SgdMomentum::new(0.5);
        opt.step(&mut p, &grad(1.0), 0.1);
        // v = 1.0, p = 0.9
        opt.step(&mut p, &[None], 0.1);
        // v = 0.5, p = 0.85
        assert!((p.get("w").iter().next().unwrap() - 0.85).abs() < 1e-12);
    }
}
