//! First-order optimizers over the flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{decode_f64s, encode_f64s};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Serialized optimizer state; moment vectors are base64 little-endian f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub t: u64,
    pub m: String,
    pub v: String,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Adam => (vec![0.0; n], vec![0.0; n]),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self { kind, lr, m, v, t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), grad.len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (x, g) in theta.iter_mut().zip(grad) {
                    *x -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.t as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..theta.len() {
                    let g = grad[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    theta[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            kind: self.kind,
            lr: self.lr,
            t: self.t,
            m: encode_f64s(&self.m),
            v: encode_f64s(&self.v),
        }
    }

    pub fn from_state(s: &OptimizerState, n: usize) -> Result<Self> {
        let m = decode_f64s(&s.m)?;
        let v = decode_f64s(&s.v)?;
        let expect = match s.kind {
            OptimizerKind::Adam => n,
            OptimizerKind::Sgd => 0,
        };
        if m.len() != expect || v.len() != expect {
            return Err(Error::Checkpoint(format!(
                "optimizer moments have length {}/{}, expected {expect}",
                m.len(),
                v.len()
            )));
        }
        Ok(Self {
            kind: s.kind,
            lr: s.lr,
            m,
            v,
            t: s.t,
        })
    }
}
