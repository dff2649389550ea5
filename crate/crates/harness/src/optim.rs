//! AdamW with decoupled weight decay, and learning-rate schedules.

use prodial_core::{Error, Matrix, Result};

use crate::config::{OptimizerConfig, ScheduleConfig, ScheduleKind};

/// Moment estimates for a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hyper: OptimizerConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamW {
    pub fn new(hyper: OptimizerConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            hyper,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every tensor. `params[i]` pairs with `grads[i]`.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        self.begin_step(grads)?;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, g, lr)?;
        }
        Ok(())
    }

    /// Validates a full gradient set and advances the step counter. Call
    /// [`update`](Self::update) once per slot afterwards.
    pub fn begin_step(&mut self, grads: &[&Matrix]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} grads",
                self.m.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!("optimizer slot {i}: gradient shape changed")));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in tensor {i} at step {}",
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        Ok(())
    }

    /// Applies decay and the bias-corrected Adam update to one slot.
    pub fn update(&mut self, slot: usize, p: &mut Matrix, g: &Matrix, lr: f64) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Contract("update before begin_step".into()));
        }
        if p.shape() != self.m[slot].shape() {
            return Err(Error::Shape(format!("optimizer slot {slot}: parameter shape changed")));
        }
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * h.weight_decay;
        let m = self.m[slot].data_mut();
        let v = self.v[slot].data_mut();
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x *= decay;
            *x -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        Ok(())
    }
}

/// Learning rate at 0-based `step`: linear warmup, then constant or cosine
/// decay to zero at `steps`.
pub fn lr_at(schedule: &ScheduleConfig, base: f64, step: usize) -> f64 {
    let warm = schedule.warmup;
    if step < warm {
        return base * (step + 1) as f64 / warm as f64;
    }
    match schedule.kind {
        ScheduleKind::Constant => base,
        ScheduleKind::Cosine => {
            let span = schedule.steps.saturating_sub(warm).max(1) as f64;
            let progress = ((step - warm) as f64 / span).min(1.0);
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}
