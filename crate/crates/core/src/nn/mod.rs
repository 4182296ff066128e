//! Trainable heads over frozen features, their analytic gradients, and the
//! optimizers that train them. All training math is 64-bit.

mod attention;
mod checkpoint;
mod gradcheck;
mod linear;
mod loss;
mod matrix;
mod optim;

pub use attention::{AttentionMil, MilCache, MilGrads};
pub use checkpoint::{Checkpoint, NamedTensor, CKPT_MAGIC, CKPT_VERSION};
pub use gradcheck::{grad_check, grad_check_against, relative_error, GradCheckReport, FD_STEP, REL_FLOOR};
pub use linear::{LinearGrads, LinearProbe};
pub use loss::{softmax, softmax_xent};
pub use matrix::Matrix;
pub use optim::{adamw_step, cosine_lr, sgd_step, LrSchedule, OptState, OptimizerKind};

use crate::{Result, Rng};

/// Flat views over a model's parameter tensors, in a fixed order shared with
/// its gradients.
pub trait Parameters {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_shapes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// A head with a scalar training loss over `(inputs, labels)`.
///
/// For the linear probe `x` is a batch with one label per row; for
/// attention MIL `x` is one bag and `labels` holds its single label.
pub trait Differentiable: Parameters {
    fn loss(&self, x: &Matrix, labels: &[usize]) -> Result<f64>;
    fn loss_and_grads(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)>;
}

/// `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]` fill.
pub(crate) fn uniform_init(len: usize, fan_in: usize, rng: &mut Rng) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.uniform(-bound, bound)).collect()
}
