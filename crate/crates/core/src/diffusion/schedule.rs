//! Noise schedule and sampling grid.
//!
//! Trajectories are indexed by *position*: position 0 is the clean latent
//! (`alpha_bar = 1`), position `k >= 1` is the `k`-th sampling timestep in
//! ascending noise order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// Betas evenly spaced between the endpoints.
    #[default]
    Linear,
    /// Square roots of the betas evenly spaced between the square roots of the
    /// endpoints.
    ScaledLinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerParams<T> {
    train_steps: usize,
    betas: Vec<T>,
    alphas_cumprod: Vec<T>,
    timesteps: Vec<usize>,
}

/// Linear beta schedule with `sample_steps` evenly spaced sampling timesteps
/// ending at the last training step.
pub fn make_schedule<T: Scalar>(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    sample_steps: usize,
) -> Result<SchedulerParams<T>> {
    make_schedule_with(BetaSchedule::Linear, train_steps, beta_start, beta_end, sample_steps)
}

pub fn make_schedule_with<T: Scalar>(
    kind: BetaSchedule,
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    sample_steps: usize,
) -> Result<SchedulerParams<T>> {
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    if train_steps < 2 {
        return Err(Error::InvalidSchedule(format!("train_steps {train_steps} < 2")));
    }
    if sample_steps == 0 || sample_steps > train_steps {
        return Err(Error::InvalidSchedule(format!(
            "sample_steps {sample_steps} must be in 1..={train_steps}"
        )));
    }
    let span = (train_steps - 1) as f64;
    let betas_f64: Vec<f64> = (0..train_steps)
        .map(|i| {
            let frac = i as f64 / span;
            match kind {
                BetaSchedule::Linear => beta_start + (beta_end - beta_start) * frac,
                BetaSchedule::ScaledLinear => {
                    let r = beta_start.sqrt() + (beta_end.sqrt() - beta_start.sqrt()) * frac;
                    r * r
                }
            }
        })
        .collect();
    let mut acc = 1.0f64;
    let alphas_cumprod = betas_f64
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            T::of(acc)
        })
        .collect();
    let timesteps = (0..sample_steps)
        .map(|k| (k + 1) * train_steps / sample_steps - 1)
        .collect();
    Ok(SchedulerParams {
        train_steps,
        betas: betas_f64.into_iter().map(T::of).collect(),
        alphas_cumprod,
        timesteps,
    })
}

impl<T: Scalar> SchedulerParams<T> {
    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn sample_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    /// `alpha_bar` indexed by training step (0-based).
    pub fn alphas_cumprod(&self) -> &[T] {
        &self.alphas_cumprod
    }

    /// Training-step index of every sampling position `1..=sample_steps`.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Training-step index at a trajectory position; `None` for the clean
    /// position 0.
    pub fn timestep_at(&self, position: usize) -> Option<usize> {
        position.checked_sub(1).and_then(|i| self.timesteps.get(i).copied())
    }

    pub fn alpha_bar_at(&self, position: usize) -> Result<T> {
        if position == 0 {
            return Ok(T::one());
        }
        self.timestep_at(position)
            .map(|t| self.alphas_cumprod[t])
            .ok_or(Error::OutOfRange {
                what: "trajectory position",
                value: position as f64,
            })
    }

    /// Normalized time in `[0, 1]` of a training step; the noisiest step maps
    /// to exactly 1.
    pub fn normalized(&self, train_step: usize) -> T {
        T::of((train_step + 1) as f64) / T::of(self.train_steps as f64)
    }

    /// Normalized time at a trajectory position (0 for the clean latent).
    pub fn normalized_at(&self, position: usize) -> T {
        self.timestep_at(position).map_or(T::zero(), |t| self.normalized(t))
    }
}
