//! Minimal dense-matrix neural network toolkit: values, reverse-mode
//! differentiation, parameter storage and an optimiser.

mod matrix;
mod optim;
mod params;
mod tape;

pub use matrix::{dot, euclidean, sq_dist, Matrix};
pub use optim::Adam;
pub use params::{random_normal, Gradients, ParamId, ParamSet};
pub use tape::{log_sum_exp, sigmoid, softmax_in_place, Tape, Var};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Affine layer `x · W + b` with `W: in × out`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: params.add_glorot(format!("{name}.weight"), input, output, rng),
            bias: params.add_zeros(format!("{name}.bias"), 1, output),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Var {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    /// Evaluation-only forward pass on a plain row.
    pub fn apply(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let w = params.get(self.weight);
        let mut out = params.get(self.bias).data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(w.row(i)) {
                *o += xi * wv;
            }
        }
        out
    }

    pub fn output_dim(&self, params: &ParamSet) -> usize {
        params.get(self.weight).cols()
    }
}
