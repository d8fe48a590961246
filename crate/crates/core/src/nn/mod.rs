//! Dense networks, losses, AdamW, EMA and checkpoints.
//!
//! Classifiers (learner, reference, probes) are ReLU MLPs producing logits.
//! The diffusion backbone uses the smooth GELU variant so gradients with
//! respect to inputs are continuous.

pub mod checkpoint;
pub mod ema;
pub mod loss;
pub mod mlp;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use ema::EmaParams;
pub use loss::{cross_entropy, cross_entropy_per_sample, input_gradient, param_gradient, softmax, InputLoss};
pub use mlp::{Activation, Mlp};
pub use optim::{AdamWConfig, OptimState};
pub use train::{accuracy, argmax, predict, train_supervised, EpochRecord, LrSchedule, TrainConfig, TrainLog};

/// Logits of `params` on `x`.
pub fn forward_classifier(params: &Mlp, x: &crate::Tensor2) -> crate::Result<crate::Tensor2> {
    params.forward(x)
}

/// Architecture of a ReLU classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClassifierArch {
    pub width: usize,
    pub depth: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            width: 128,
            depth: 3,
        }
    }
}

impl ClassifierArch {
    pub fn build(&self, input: usize, classes: usize, rng: &mut impl rand::Rng) -> crate::Result<Mlp> {
        let mut m = Mlp::with_hidden(input, self.width, self.depth, classes, Activation::Relu)?;
        m.init_random(rng);
        Ok(m)
    }
}
