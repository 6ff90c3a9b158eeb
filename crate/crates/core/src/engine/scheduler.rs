//! Cosine stage scheduler.
//!
//! Each iteration reports `s_t`, the batch mean of `cos²(x_i, w_{y_i})`. The
//! scheduler smooths it with an EMA and advances the phase once the smoothed
//! score reaches the active threshold. Phases only move forward, one step at
//! a time.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::ClassifierBank;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Alignment,
    Stabilization,
    Refinement,
}

impl Phase {
    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Phase::Alignment),
            1 => Some(Phase::Stabilization),
            2 => Some(Phase::Refinement),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Alignment => "alignment",
            Phase::Stabilization => "stabilization",
            Phase::Refinement => "refinement",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alignment" => Ok(Phase::Alignment),
            "stabilization" => Ok(Phase::Stabilization),
            "refinement" => Ok(Phase::Refinement),
            _ => Err(Error::Format(format!("unknown phase `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulerConfig {
    pub delta1: f64,
    pub delta2: f64,
    /// EMA weight on the previous smoothed score.
    pub smoothing: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageState {
    pub phase: Phase,
    pub css_raw: f64,
    pub css_smoothed: f64,
    pub iteration: u64,
    /// Whether any score has been observed (the EMA seeds from the first).
    pub observed: bool,
}

impl Default for StageState {
    fn default() -> Self {
        StageState {
            phase: Phase::Alignment,
            css_raw: 0.0,
            css_smoothed: 0.0,
            iteration: 0,
            observed: false,
        }
    }
}

/// Folds one score into the state and applies at most one transition.
pub fn step_scheduler(state: &StageState, s_t: f64, cfg: &SchedulerConfig) -> StageState {
    let smoothed = if state.observed {
        cfg.smoothing * state.css_smoothed + (1.0 - cfg.smoothing) * s_t
    } else {
        s_t
    };
    let phase = match state.phase {
        Phase::Alignment if smoothed >= cfg.delta1 => Phase::Stabilization,
        Phase::Stabilization if smoothed >= cfg.delta2 => Phase::Refinement,
        p => p,
    };
    StageState {
        phase,
        css_raw: s_t,
        css_smoothed: smoothed,
        iteration: state.iteration + 1,
        observed: true,
    }
}

/// Batch mean of squared cosine between each feature and its own class
/// column (both normalized first). No gradient.
pub fn css_score(features: &Tensor, bank: &ClassifierBank, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::domain("css_score", "empty batch"));
    }
    if features.rows() != labels.len() || features.cols() != bank.dim() {
        return Err(Error::Shape {
            op: "css_score",
            lhs: features.shape().to_vec(),
            rhs: vec![labels.len(), bank.dim()],
        });
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= bank.classes() {
            return Err(Error::OutOfRange {
                what: "classes",
                index: y,
                len: bank.classes(),
            });
        }
        let x = features.row(i);
        let w = bank.column(y);
        let dot: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = (dot / (nx * nw)).clamp(-1.0, 1.0);
        total += cos * cos;
    }
    Ok(total / labels.len() as f64)
}
