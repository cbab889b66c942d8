//! SGD with Nesterov momentum, L1 on convolution weights, and learning-rate
//! schedules.

use crate::error::{invalid, Error, Result};
use crate::params::{ParamKind, ParamStore};

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub l1_weight: f64,
    velocities: Vec<Option<Vec<f64>>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, nesterov: bool, l1_weight: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate {learning_rate} must be finite and >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(l1_weight >= 0.0 && l1_weight.is_finite()) {
            return Err(invalid(format!("l1 weight {l1_weight} must be finite and >= 0")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            nesterov,
            l1_weight,
            velocities: Vec::new(),
        })
    }

    pub fn velocity(&self, index: usize) -> Option<&[f64]> {
        self.velocities.get(index).and_then(|v| v.as_deref())
    }
}

fn sign(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One update of every trainable parameter from its accumulated gradient,
/// then every gradient is zeroed. Nothing is modified if any trainable
/// gradient is non-finite.
///
/// With momentum `m`, rate `lr` and effective gradient `g` (plus
/// `l1 * sign(w)` on convolution weights): `v <- m v - lr g`, then
/// `w <- w + m v - lr g` (Nesterov) or `w <- w + v`.
pub fn sgd_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    for id in store.ids() {
        let p = store.get(id);
        if p.trainable && p.tensor.grad().iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged(p.name.clone()));
        }
    }
    if state.velocities.len() < store.len() {
        state.velocities.resize(store.len(), None);
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for id in store.ids() {
        let p = store.get_mut(id);
        if !p.trainable {
            p.tensor.zero_grad();
            continue;
        }
        let l1 = if p.kind == ParamKind::Conv { state.l1_weight } else { 0.0 };
        let n = p.tensor.len();
        let vel = state.velocities[id.index()].get_or_insert_with(|| vec![0.0; n]);
        let grads = p.tensor.grad().to_vec();
        for ((w, v), g) in p.tensor.values_mut().iter_mut().zip(vel.iter_mut()).zip(grads) {
            let g = g + l1 * sign(*w);
            *v = mu * *v - lr * g;
            if state.nesterov {
                *w += mu * *v - lr * g;
            } else {
                *w += *v;
            }
        }
        p.tensor.zero_grad();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Divide by `factor` every `every` epochs.
    StepDecay { factor: f64, every: usize },
    /// Divide by `factor` once the monitored loss has not improved for
    /// more than `patience` epochs.
    Plateau { factor: f64, patience: usize },
}

#[derive(Debug, Clone)]
pub struct LrScheduler {
    base: f64,
    schedule: LrSchedule,
    current: f64,
    best: f64,
    since_best: usize,
}

impl LrScheduler {
    pub fn new(base: f64, schedule: LrSchedule) -> Result<Self> {
        match schedule {
            LrSchedule::StepDecay { factor, every } if factor <= 0.0 || every == 0 => {
                return Err(invalid("step decay needs factor > 0 and every >= 1"))
            }
            LrSchedule::Plateau { factor, .. } if factor <= 0.0 => {
                return Err(invalid("plateau decay needs factor > 0"))
            }
            _ => {}
        }
        Ok(Self {
            base,
            schedule,
            current: base,
            best: f64::INFINITY,
            since_best: 0,
        })
    }

    /// Learning rate for a 1-based epoch number.
    pub fn lr(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::StepDecay { factor, every } => {
                let k = epoch.saturating_sub(1) / every;
                self.base / factor.powi(k as i32)
            }
            LrSchedule::Constant => self.base,
            LrSchedule::Plateau { .. } => self.current,
        }
    }

    /// Feeds the end-of-epoch monitored loss (plateau schedule only).
    pub fn observe(&mut self, loss: f64) {
        if let LrSchedule::Plateau { factor, patience } = self.schedule {
            if loss < self.best {
                self.best = loss;
                self.since_best = 0;
            } else {
                self.since_best += 1;
                if self.since_best > patience {
                    self.current /= factor;
                    self.since_best = 0;
                }
            }
        }
    }
}
