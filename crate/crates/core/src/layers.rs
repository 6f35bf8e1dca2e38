//! Parameter bundles shared by the neck, the relation head and the encoder.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{randn, ParamId, ParamSet, Tape, Tensor, Var};

/// Every parameter of a set recorded once on a tape, indexed by [`ParamId`].
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, params: &ParamSet) -> Self {
        Self {
            tape,
            vars: params.ids().map(|id| tape.param(params, id)).collect(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

/// `y = x·W + b` over row vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self {
            weight: ps.add(format!("{name}.weight"), randn(rng, &[fan_in, fan_out], std)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
            fan_in,
            fan_out,
        }
    }

    /// `x` is `rows × fan_in`.
    pub fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(b.get(self.weight))?.add_row(b.get(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layernorm(b.get(self.gamma), b.get(self.beta))
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::init(ps, &format!("{name}.fc1"), dims.0, dims.1, rng),
            fc2: Linear::init(ps, &format!("{name}.fc2"), dims.1, dims.2, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(b, self.fc1.forward(b, x)?.gelu())
    }
}
