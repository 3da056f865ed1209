//! First-order optimizers and learning-rate schedules.
//!
//! Optimizer state (moments, velocities) is a flat list aligned with the
//! model's `params_mut` visitation order; the trainer pairs parameters with
//! gradients by that shared order, so the optimizer never needs names. State
//! is serializable so checkpoints can resume mid-run without disturbing the
//! moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        /// First-moment estimates, lazily shaped on the first step.
        m: Vec<Tensor>,
        /// Second-moment estimates.
        v: Vec<Tensor>,
        /// Completed steps (bias correction uses t + 1).
        t: u64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
        velocity: Vec<Tensor>,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer::Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr, .. } => *lr,
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            Optimizer::Adam { lr, .. } | Optimizer::Sgd { lr, .. } => *lr = new_lr,
        }
    }

    /// In-place update of `params` from `grads` (same order and shapes).
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Tensor],
    ) -> Result<(), Error> {
        if params.len() != grads.len() {
            return Err(Error::config(format!(
                "optimizer got {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::config(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        match self {
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                if m.is_empty() {
                    *m = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
                    *v = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for (i, (_, p)) in params.iter_mut().enumerate() {
                    let g = grads[i].data();
                    let (md, vd) = (m[i].data_mut(), v[i].data_mut());
                    for (e, pv) in p.data_mut().iter_mut().enumerate() {
                        md[e] = *beta1 * md[e] + (1.0 - *beta1) * g[e];
                        vd[e] = *beta2 * vd[e] + (1.0 - *beta2) * g[e] * g[e];
                        let mhat = md[e] / bc1;
                        let vhat = vd[e] / bc2;
                        *pv -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
            Optimizer::Sgd {
                lr,
                momentum,
                velocity,
            } => {
                if velocity.is_empty() {
                    *velocity = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
                }
                for (i, (_, p)) in params.iter_mut().enumerate() {
                    let g = grads[i].data();
                    let vel = velocity[i].data_mut();
                    for (e, pv) in p.data_mut().iter_mut().enumerate() {
                        vel[e] = *momentum * vel[e] + g[e];
                        *pv -= *lr * vel[e];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-epoch learning rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    /// base · gamma^(epoch / every): staircase decay.
    Step { gamma: f64, every: usize },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { gamma, every } => {
                assert!(*every > 0, "step schedule needs a positive period");
                base * gamma.powi((epoch / every) as i32)
            }
        }
    }
}
