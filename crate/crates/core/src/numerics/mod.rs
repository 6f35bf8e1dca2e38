//! Dense `f64` tensors, a reverse-mode tape, and the optimizer.

pub mod gradcheck;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use optim::{
    adamw_step, clip_grad_norm, lr_at, LrSchedule, OptimizerState, DEFAULT_LR, DEFAULT_WEIGHT_DECAY,
};
pub use tape::{avg_pool2d, bce_with_logits, concat_cols, concat_rows, mse, outer, Gradients, Tape, Var};
pub use tensor::{ParamId, ParamSet, Tensor};

use rand::Rng;
use rand_distr::StandardNormal;

/// Gaussian-initialized tensor with the given standard deviation.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
