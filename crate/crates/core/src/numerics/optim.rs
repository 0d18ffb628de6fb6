use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

/// First-order update rules exercised by the transfer loop and trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adagrad,
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Sgd,
        OptimizerKind::Momentum,
        OptimizerKind::Adagrad,
        OptimizerKind::RmsProp,
        OptimizerKind::Adam,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer {other:?}; expected one of sgd, momentum, adagrad, rmsprop, adam"
            ))),
        }
    }
}

/// Per-parameter accumulator slots; which of the two are used depends on
/// the optimizer kind.
#[derive(Debug, Clone)]
struct Slot {
    first: Matrix,
    second: Matrix,
}

/// Stateful first-order optimizer over a fixed list of parameter matrices.
///
/// Accumulators are allocated lazily on the first step and must keep the
/// same shapes for the lifetime of the optimizer.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            momentum: 0.9,
            decay: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            slots: Vec::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter given its gradient.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer got {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    first: Matrix::zeros(p.rows(), p.cols()),
                    second: Matrix::zeros(p.rows(), p.cols()),
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state holds {} slots but got {} params",
                self.slots.len(),
                params.len()
            )));
        }
        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&self.slots) {
            if param.shape() != grad.shape() || param.shape() != slot.first.shape() {
                return Err(Error::ShapeMismatch {
                    context: "optimizer step",
                    left: param.shape(),
                    right: grad.shape(),
                });
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = self.learning_rate;

        for ((param, grad), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            let p = param.data_mut();
            let g = grad.data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, &gv) in p.iter_mut().zip(g) {
                        *pv -= lr * gv;
                    }
                }
                OptimizerKind::Momentum => {
                    let v = slot.first.data_mut();
                    for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v) {
                        *vv = self.momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
                OptimizerKind::Adagrad => {
                    let acc = slot.second.data_mut();
                    for ((pv, &gv), av) in p.iter_mut().zip(g).zip(acc) {
                        *av += gv * gv;
                        *pv -= lr * gv / (av.sqrt() + self.epsilon);
                    }
                }
                OptimizerKind::RmsProp => {
                    let acc = slot.second.data_mut();
                    for ((pv, &gv), av) in p.iter_mut().zip(g).zip(acc) {
                        *av = self.decay * *av + (1.0 - self.decay) * gv * gv;
                        *pv -= lr * gv / (av.sqrt() + self.epsilon);
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - self.beta1.powi(t);
                    let bc2 = 1.0 - self.beta2.powi(t);
                    let m = slot.first.data_mut();
                    let v = slot.second.data_mut();
                    for (((pv, &gv), mv), vv) in p.iter_mut().zip(g).zip(m).zip(v) {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
