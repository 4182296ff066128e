//! SGD with momentum, AdamW with decoupled weight decay, and the cosine
//! annealing schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd {
        momentum: f64,
    },
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }

    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Optimizer slots for one model. `first` holds the momentum buffer (SGD)
/// or first moment (AdamW); `second` the AdamW second moment.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub kind: OptimizerKind,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptState {
    pub fn new(kind: OptimizerKind, shapes: &[usize]) -> Self {
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::AdamW { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            first: zeros(),
            second,
            step: 0,
        }
    }

    fn check_shapes(&self, params: &[&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        let ok = params.len() == self.first.len()
            && grads.len() == self.first.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.first)
                .all(|((p, g), s)| p.len() == g.len() && p.len() == s.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("optimizer slots, parameters and gradients disagree".into()))
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd { .. } => sgd_step(self, params, grads, lr),
            OptimizerKind::AdamW { .. } => adamw_step(self, params, grads, lr),
        }
    }
}

/// `buf ← ρ·buf + g; θ ← θ − η·buf`.
pub fn sgd_step(state: &mut OptState, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) -> Result<()> {
    let OptimizerKind::Sgd { momentum } = state.kind else {
        return Err(Error::invalid("sgd_step on a non-SGD optimizer state"));
    };
    state.check_shapes(params, grads)?;
    for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut state.first) {
        for ((theta, &gi), b) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
            *b = momentum * *b + gi;
            *theta -= lr * *b;
        }
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam moments with decoupled weight decay:
/// `θ ← θ − η·(m̂/(√v̂ + ε) + λθ)`.
pub fn adamw_step(state: &mut OptState, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) -> Result<()> {
    let OptimizerKind::AdamW {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.kind
    else {
        return Err(Error::invalid("adamw_step on a non-AdamW optimizer state"));
    };
    state.check_shapes(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.first).zip(&mut state.second) {
        for (((theta, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *theta);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        if !(0.0 <= lr_min && lr_min <= lr_max) || !lr_max.is_finite() {
            return Err(Error::invalid(format!("need 0 <= lr_min ({lr_min}) <= lr_max ({lr_max})")));
        }
        if total_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        Ok(Self {
            lr_max,
            lr_min,
            total_steps,
        })
    }
}

/// `η_t = η_min + ½(η₀ − η_min)(1 + cos(π t / T))`.
pub fn cosine_lr(s: &LrSchedule, t: u64) -> Result<f64> {
    if t > s.total_steps {
        return Err(Error::invalid(format!("step {t} beyond schedule length {}", s.total_steps)));
    }
    let frac = t as f64 / s.total_steps as f64;
    Ok(s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + (PI * frac).cos()))
}
