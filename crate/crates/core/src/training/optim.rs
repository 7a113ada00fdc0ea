//! First-order optimizers with Keras-compatible update rules.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adadelta,
    Nadam,
}

pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPSILON: f64 = 1e-7;
pub const NADAM_BETA1: f64 = 0.9;
pub const NADAM_BETA2: f64 = 0.999;
pub const NADAM_EPSILON: f64 = 1e-7;
pub const NADAM_SCHEDULE_DECAY: f64 = 0.004;

/// Optimizer state for a list of parameter tensors.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adadelta { lr: f64, accum: Vec<Vec<f32>>, delta_accum: Vec<Vec<f32>> },
    Nadam { lr: f64, step: u64, m_schedule: f64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>> },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, sizes: &[usize]) -> Self {
        let zeros = || sizes.iter().map(|&n| vec![0f32; n]).collect::<Vec<_>>();
        match kind {
            OptimizerKind::Adadelta => Optimizer::Adadelta { lr, accum: zeros(), delta_accum: zeros() },
            OptimizerKind::Nadam => Optimizer::Nadam { lr, step: 0, m_schedule: 1.0, m: zeros(), v: zeros() },
        }
    }

    /// Applies one update to every tensor whose `mask` entry is true.
    pub fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>], mask: &[bool]) {
        match self {
            Optimizer::Adadelta { lr, accum, delta_accum } => {
                let (rho, eps, lr) = (ADADELTA_RHO as f32, ADADELTA_EPSILON as f32, *lr as f32);
                for (i, p) in params.iter_mut().enumerate().filter(|(i, _)| mask[*i]) {
                    for (((w, &g), a), d) in p.iter_mut().zip(&grads[i]).zip(&mut accum[i]).zip(&mut delta_accum[i]) {
                        *a = rho * *a + (1.0 - rho) * g * g;
                        let update = g * (*d + eps).sqrt() / (*a + eps).sqrt();
                        *w -= lr * update;
                        *d = rho * *d + (1.0 - rho) * update * update;
                    }
                }
            }
            Optimizer::Nadam { lr, step, m_schedule, m, v } => {
                *step += 1;
                let t = *step as f64;
                let cache_t = NADAM_BETA1 * (1.0 - 0.5 * 0.96f64.powf(t * NADAM_SCHEDULE_DECAY));
                let cache_next = NADAM_BETA1 * (1.0 - 0.5 * 0.96f64.powf((t + 1.0) * NADAM_SCHEDULE_DECAY));
                let schedule_new = *m_schedule * cache_t;
                let schedule_next = schedule_new * cache_next;
                *m_schedule = schedule_new;
                let g_scale = (1.0 / (1.0 - schedule_new)) as f32;
                let m_scale = (1.0 / (1.0 - schedule_next)) as f32;
                let v_scale = (1.0 / (1.0 - NADAM_BETA2.powf(t))) as f32;
                let (b1, b2, eps, lr) = (NADAM_BETA1 as f32, NADAM_BETA2 as f32, NADAM_EPSILON as f32, *lr as f32);
                let (ct, cn) = (cache_t as f32, cache_next as f32);
                for (i, p) in params.iter_mut().enumerate().filter(|(i, _)| mask[*i]) {
                    for (((w, &g), mm), vv) in p.iter_mut().zip(&grads[i]).zip(&mut m[i]).zip(&mut v[i]) {
                        *mm = b1 * *mm + (1.0 - b1) * g;
                        *vv = b2 * *vv + (1.0 - b2) * g * g;
                        let m_bar = (1.0 - ct) * g * g_scale + cn * *mm * m_scale;
                        *w -= lr * m_bar / ((*vv * v_scale).sqrt() + eps);
                    }
                }
            }
        }
    }
}
