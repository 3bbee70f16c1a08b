//! Affine and normalisation layers shared by the attention block and the
//! masking network.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: b.fan_in_uniform(&format!("{name}.weight"), &[inputs, outputs], inputs),
            bias: b.zeros(&format!("{name}.bias"), &[outputs]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, p.var(self.weight), p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, features: usize) -> Self {
        Self {
            gamma: b.ones(&format!("{name}.gamma"), &[features]),
            beta: b.zeros(&format!("{name}.beta"), &[features]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LAYER_NORM_EPS)
    }
}
