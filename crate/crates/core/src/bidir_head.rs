//! Gated bidirectional relation head.
//!
//! One class-token feature `x` is split by a sigmoid gate into a forward and
//! a backward intermediate; a single shared MLP classifies both.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::layers::{Bound, Mlp};
use crate::numerics::{bce_with_logits, mse, ParamSet, Var};

pub const DEFAULT_LAMBDA_CONS: f64 = 1.0;

/// `gate_mlp`: `D → D (GELU) → D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateParams {
    pub mlp: Mlp,
}

impl GateParams {
    pub fn init<R: Rng + ?Sized>(ps: &mut ParamSet, dim: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::init(ps, "head.gate", (dim, dim, dim), rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.fc1.fan_in
    }
}

/// `relhead_mlp`: `D → D (GELU) → C`, shared by both directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelHeadParams {
    pub mlp: Mlp,
}

impl RelHeadParams {
    pub fn init<R: Rng + ?Sized>(ps: &mut ParamSet, dim: usize, num_predicates: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::init(ps, "head.rel", (dim, dim, num_predicates), rng),
        }
    }

    pub fn num_predicates(&self) -> usize {
        self.mlp.fc2.fan_out
    }
}

/// Forward and backward intermediates of one gate pass.
#[derive(Debug, Clone, Copy)]
pub struct GateSplit<'t> {
    pub gate: Var<'t>,
    pub t_fwd: Var<'t>,
    pub t_bwd: Var<'t>,
}

/// Both directions' predicate logits for one ordered pair `(S0, S1)`.
/// `z_fwd` scores `S0 → S1`, `z_bwd` scores `S1 → S0`.
#[derive(Debug, Clone, Copy)]
pub struct BidirLogits<'t> {
    pub split: GateSplit<'t>,
    pub z_fwd: Var<'t>,
    pub z_bwd: Var<'t>,
}

fn as_row<'t>(x: Var<'t>, dim: usize, op: &'static str) -> Result<Var<'t>> {
    let shape = x.shape();
    if x.numel() != dim || !(shape.len() == 1 || (shape.len() == 2 && shape[0] == 1)) {
        return Err(shape_err(op, format!("expected a length-{dim} feature, got {shape:?}")));
    }
    x.reshape(vec![1, dim])
}

/// `g = σ(gate_mlp(x))`, `t_fwd = g⊙x`, `t_bwd = (1−g)⊙x`.
pub fn gate_split<'t>(b: &Bound<'t>, x: Var<'t>, gate: &GateParams) -> Result<GateSplit<'t>> {
    let d = gate.dim();
    let row = as_row(x, d, "gate_split")?;
    let g = gate.mlp.forward(b, row)?.sigmoid().reshape(vec![d])?;
    let x = row.reshape(vec![d])?;
    Ok(GateSplit {
        gate: g,
        t_fwd: g.mul(x)?,
        t_bwd: g.one_minus().mul(x)?,
    })
}

/// Shared relation MLP on one intermediate; returns `C` logits.
pub fn relation_logits<'t>(b: &Bound<'t>, t: Var<'t>, head: &RelHeadParams) -> Result<Var<'t>> {
    let d = head.mlp.fc1.fan_in;
    let z = head.mlp.forward(b, as_row(t, d, "relation_logits")?)?;
    z.reshape(vec![head.num_predicates()])
}

/// One gate pass and two applications of the shared relation MLP.
pub fn predict_bidirectional<'t>(
    b: &Bound<'t>,
    x: Var<'t>,
    gate: &GateParams,
    head: &RelHeadParams,
) -> Result<BidirLogits<'t>> {
    let split = gate_split(b, x, gate)?;
    Ok(BidirLogits {
        split,
        z_fwd: relation_logits(b, split.t_fwd, head)?,
        z_bwd: relation_logits(b, split.t_bwd, head)?,
    })
}

/// `(1/D) Σ (t_fwd − t2_bwd)² + (t_bwd − t2_fwd)²`.
pub fn consistency_loss<'t>(t_fwd: Var<'t>, t_bwd: Var<'t>, t2_fwd: Var<'t>, t2_bwd: Var<'t>) -> Result<Var<'t>> {
    mse(t_fwd, t2_bwd)?.add(mse(t_bwd, t2_fwd)?)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingLosses<'t> {
    pub bce_total: Var<'t>,
    pub consistency: Var<'t>,
    pub combined: Var<'t>,
}

/// Losses for one ordered pair and its swapped counterpart.
///
/// `x` is the feature of `(S0, S1)`, `x_swapped` that of `(S1, S0)`.
/// BCE terms: `(z_fwd, y_fwd)`, `(z_bwd, y_bwd)`, `(z'_fwd, y_bwd)`,
/// `(z'_bwd, y_fwd)`, summed.
pub fn training_losses<'t>(
    b: &Bound<'t>,
    x: Var<'t>,
    x_swapped: Var<'t>,
    y_fwd: &[f64],
    y_bwd: &[f64],
    gate: &GateParams,
    head: &RelHeadParams,
    lambda_cons: f64,
) -> Result<TrainingLosses<'t>> {
    let p = predict_bidirectional(b, x, gate, head)?;
    let q = predict_bidirectional(b, x_swapped, gate, head)?;
    let bce_total = bce_with_logits(p.z_fwd, y_fwd)?
        .add(bce_with_logits(p.z_bwd, y_bwd)?)?
        .add(bce_with_logits(q.z_fwd, y_bwd)?)?
        .add(bce_with_logits(q.z_bwd, y_fwd)?)?;
    let consistency = consistency_loss(p.split.t_fwd, p.split.t_bwd, q.split.t_fwd, q.split.t_bwd)?;
    let combined = bce_total.add(consistency.scale(lambda_cons))?;
    Ok(TrainingLosses {
        bce_total,
        consistency,
        combined,
    })
}
