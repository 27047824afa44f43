//! Optimizers and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cosine decay from `lr_max` at t=0 to `lr_min` at t=T, no restarts:
/// lr(t) = lr_min + (lr_max - lr_min) * (1 + cos(pi t / T)) / 2.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total < 1 {
        return Err(Error::config("cosine schedule needs at least one step"));
    }
    if t > total {
        return Err(Error::config(format!("schedule step {t} out of range 0..={total}")));
    }
    let cos = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + cos))
}

/// Classic momentum SGD with coupled weight decay:
/// v <- momentum * v + (grad + wd * p); p <- p - lr * v.
/// State is keyed by caller-chosen slot indices and starts at zero, so a
/// parameter that never receives a gradient is never moved.
pub struct SgdMomentum<S: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(momentum: f64, weight_decay: f64) -> SgdMomentum<S> {
        SgdMomentum { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, key: usize, param: &mut [S], grad: &[S], lr: f64) {
        debug_assert_eq!(param.len(), grad.len());
        if key >= self.velocity.len() {
            self.velocity.resize_with(key + 1, || None);
        }
        let v = self.velocity[key].get_or_insert_with(|| vec![S::ZERO; param.len()]);
        let mu = S::from_f64(self.momentum);
        let wd = S::from_f64(self.weight_decay);
        let lrs = S::from_f64(lr);
        for ((p, vel), &g) in param.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vel = mu * *vel + (g + wd * *p);
            *p -= lrs * *vel;
        }
    }

    pub fn velocity(&self, key: usize) -> Option<&[S]> {
        self.velocity.get(key).and_then(|v| v.as_deref())
    }

    pub fn set_velocity(&mut self, key: usize, v: Vec<S>) {
        if key >= self.velocity.len() {
            self.velocity.resize_with(key + 1, || None);
        }
        self.velocity[key] = Some(v);
    }

    pub fn state_keys(&self) -> impl Iterator<Item = usize> + '_ {
        self.velocity.iter().enumerate().filter_map(|(k, v)| v.as_ref().map(|_| k))
    }
}

/// Adam with bias correction and coupled weight decay (decay added to the
/// gradient). The step counter advances once per `begin_step`.
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: Vec<Option<(Vec<S>, Vec<S>)>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Adam<S> {
        Adam { lr, beta1, beta2, eps, weight_decay, t: 0, moments: Vec::new() }
    }

    /// Advance the shared step counter; call once before the per-key steps
    /// of one optimization step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step(&mut self, key: usize, param: &mut [S], grad: &[S]) {
        debug_assert!(self.t > 0, "begin_step before step");
        debug_assert_eq!(param.len(), grad.len());
        if key >= self.moments.len() {
            self.moments.resize_with(key + 1, || None);
        }
        let (m, v) = self.moments[key]
            .get_or_insert_with(|| (vec![S::ZERO; param.len()], vec![S::ZERO; param.len()]));
        let b1 = self.beta1;
        let b2 = self.beta2;
        let corr1 = 1.0 - b1.powi(self.t as i32);
        let corr2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..param.len() {
            let g = grad[i].to_f64() + self.weight_decay * param[i].to_f64();
            let mi = b1 * m[i].to_f64() + (1.0 - b1) * g;
            let vi = b2 * v[i].to_f64() + (1.0 - b2) * g * g;
            m[i] = S::from_f64(mi);
            v[i] = S::from_f64(vi);
            let m_hat = mi / corr1;
            let v_hat = vi / corr2;
            let delta = self.lr * m_hat / (v_hat.sqrt() + self.eps);
            param[i] = S::from_f64(param[i].to_f64() - delta);
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn set_t(&mut self, t: u64) {
        self.t = t;
    }

    pub fn moments(&self, key: usize) -> Option<(&[S], &[S])> {
        self.moments.get(key).and_then(|mv| mv.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice())))
    }

    pub fn set_moments(&mut self, key: usize, m: Vec<S>, v: Vec<S>) {
        if key >= self.moments.len() {
            self.moments.resize_with(key + 1, || None);
        }
        self.moments[key] = Some((m, v));
    }

    pub fn state_keys(&self) -> impl Iterator<Item = usize> + '_ {
        self.moments.iter().enumerate().filter_map(|(k, v)| v.as_ref().map(|_| k))
    }
}
