//! Optimizers and learning-rate schedules.
//!
//! Adam uses the standard bias-corrected update with betas (0.9, 0.999) and
//! epsilon 1e-8. SGD applies L2 regularization inside the update:
//! `p <- p - lr * (g + l2 * p)`.

use crate::tensor::{Elem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub struct Optimizer<E: Elem = f32> {
    kind: OptimizerKind,
    params: Vec<Tensor<E>>,
    lr: f64,
    l2: f64,
    betas: (f64, f64),
    eps: f64,
    step_count: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Elem> Optimizer<E> {
    pub fn adam(params: Vec<Tensor<E>>, lr: f64) -> Self {
        let m = params.iter().map(|p| vec![E::ZERO; p.numel()]).collect();
        let v = params.iter().map(|p| vec![E::ZERO; p.numel()]).collect();
        Optimizer {
            kind: OptimizerKind::Adam,
            params,
            lr,
            l2: 0.0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    pub fn sgd(params: Vec<Tensor<E>>, lr: f64, l2: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            params,
            lr,
            l2,
            betas: (0.9, 0.999),
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Applies one update using the gradients currently stored on the
    /// parameters. Parameters without a gradient are skipped.
    pub fn step(&mut self) {
        self.step_count += 1;
        let t = self.step_count;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = E::from_f64(self.lr);
                let l2 = E::from_f64(self.l2);
                for p in &self.params {
                    let Some(g) = p.grad() else { continue };
                    let mut data = p.data_mut();
                    for (pi, gi) in data.iter_mut().zip(&g) {
                        *pi = *pi - lr * (*gi + l2 * *pi);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = self.betas;
                let bc1 = 1.0 - b1.powi(t as i32);
                let bc2 = 1.0 - b2.powi(t as i32);
                let b1e = E::from_f64(b1);
                let b2e = E::from_f64(b2);
                let one_m_b1 = E::from_f64(1.0 - b1);
                let one_m_b2 = E::from_f64(1.0 - b2);
                let lr = E::from_f64(self.lr);
                let eps = E::from_f64(self.eps);
                let inv_bc1 = E::from_f64(1.0 / bc1);
                let inv_bc2 = E::from_f64(1.0 / bc2);
                for (i, p) in self.params.iter().enumerate() {
                    let Some(g) = p.grad() else { continue };
                    let mut data = p.data_mut();
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    for j in 0..g.len() {
                        m[j] = b1e * m[j] + one_m_b1 * g[j];
                        v[j] = b2e * v[j] + one_m_b2 * g[j] * g[j];
                        let mhat = m[j] * inv_bc1;
                        let vhat = v[j] * inv_bc2;
                        data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// Linear warmup from 0 to `peak_lr` over the first `warmup_fraction` of
/// steps, then cosine or linear decay to 0 at `total_steps`.
pub fn lr_schedule(
    kind: ScheduleKind,
    step: usize,
    total_steps: usize,
    warmup_fraction: f64,
    peak_lr: f64,
) -> f64 {
    assert!(step <= total_steps, "lr_schedule: step beyond total");
    assert!((0.0..1.0).contains(&warmup_fraction));
    let warmup = (total_steps as f64 * warmup_fraction).round() as usize;
    if warmup > 0 && step < warmup {
        return peak_lr * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return peak_lr;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    match kind {
        ScheduleKind::Cosine => peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        ScheduleKind::Linear => peak_lr * (1.0 - progress),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_basic_update() {
        let p: Tensor<f64> = Tensor::param(vec![1], vec![1.0]);
        p.accumulate_grad(&[1.0]);
        let mut opt = Optimizer::sgd(vec![p.clone()], 0.1, 0.0);
        opt.step();
        assert!((p.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_l2_pure_decay() {
        let p: Tensor<f64> = Tensor::param(vec![1], vec![1.0]);
        p.accumulate_grad(&[0.0]);
        let mut opt = Optimizer::sgd(vec![p.clone()], 0.1, 0.01);
        opt.step();
        assert!((p.data()[0] - 0.999).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        // With g=1 everywhere at t=1: mhat=1, vhat=1, delta = -lr/(1+eps).
        let p: Tensor<f64> = Tensor::param(vec![3], vec![0.5, -0.25, 2.0]);
        p.accumulate_grad(&[1.0, 1.0, 1.0]);
        let mut opt = Optimizer::adam(vec![p.clone()], 1e-3);
        opt.step();
        let expect = 1e-3 / (1.0 + 1e-8);
        for (after, before) in p.data().iter().zip([0.5, -0.25, 2.0]) {
            assert!(((before - after) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let total = 100;
        let peak = 3e-4;
        assert_eq!(lr_schedule(ScheduleKind::Cosine, 0, total, 0.1, peak), 0.0);
        assert_eq!(lr_schedule(ScheduleKind::Cosine, 10, total, 0.1, peak), peak);
        // Midpoint of the decay phase: (10 + 100) / 2 = 55.
        let mid = lr_schedule(ScheduleKind::Cosine, 55, total, 0.1, peak);
        assert!((mid - peak / 2.0).abs() < 1e-12);
        let end = lr_schedule(ScheduleKind::Cosine, total, total, 0.1, peak);
        assert!(end.abs() < 1e-18);
        let lin_mid = lr_schedule(ScheduleKind::Linear, 55, total, 0.1, peak);
        assert!((lin_mid - peak / 2.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_updates_same_seed() {
        let run = || {
            let p: Tensor<f32> = crate::rng::normal_param(&mut crate::rng::rng_for(9, "p"), vec![8], 0.1);
            let mut opt = Optimizer::adam(vec![p.clone()], 1e-2);
            for _ in 0..25 {
                opt.zero_grad();
                let loss = p.mul(&p).sum_all();
                loss.backward();
                opt.step();
            }
            p.to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed must give bit-identical parameters");
    }
}
