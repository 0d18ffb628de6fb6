//! Dense f64 matrices, a tape-based reverse-mode differentiation graph,
//! and the five first-order optimizers used by training and transfer.

mod graph;
mod matrix;
mod optim;

pub use graph::{BatchStats, Gradients, NodeId, Tape};
pub use matrix::{gram, Matrix};
pub use optim::{Optimizer, OptimizerKind};

use std::str::FromStr;

use crate::error::Error;

/// Epsilon added to variances before taking square roots in batch norm.
pub const BN_EPSILON: f64 = 1e-5;

/// Exponential-moving-average coefficient for batch-norm running stats.
pub const BN_MOMENTUM: f64 = 0.9;

/// Gram matrix normalization mode. `PerPoint` divides by the number of
/// rows so that style statistics of clouds with different cardinalities
/// live on a comparable scale; `None` is the raw sum of inner products.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramNorm {
    None,
    PerPoint,
}

impl GramNorm {
    pub fn per_point(&self) -> bool {
        matches!(self, GramNorm::PerPoint)
    }

    pub fn name(&self) -> &'static str {
        match self {
            GramNorm::None => "none",
            GramNorm::PerPoint => "per-point",
        }
    }
}

impl FromStr for GramNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(GramNorm::None),
            "per-point" | "per_point" => Ok(GramNorm::PerPoint),
            other => Err(Error::InvalidArgument(format!(
                "unknown gram normalization {other:?}; expected none or per-point"
            ))),
        }
    }
}

/// Per-column running mean/variance for inference-mode batch norm.
/// `ready` is false until the first train-mode update (or checkpoint load);
/// inference before that is an error.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub ready: bool,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        RunningStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
            ready: false,
        }
    }

    pub fn frozen(mean: Vec<f64>, var: Vec<f64>) -> Self {
        RunningStats {
            mean,
            var,
            ready: true,
        }
    }

    /// EMA update from one batch's statistics; marks the stats ready.
    pub fn update(&mut self, batch: &BatchStats) {
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        self.ready = true;
    }
}
