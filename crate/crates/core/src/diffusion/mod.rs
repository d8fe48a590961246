//! Class-conditional DDPM: schedule algebra, the noise predictor and its
//! training loop, and ancestral sampling with an optional guidance hook.

pub mod predictor;
pub mod sampler;
pub mod schedule;

pub use predictor::{continue_training, train_predictor, NoisePredictor, PredictorArch, PredictorTrainConfig};
pub use sampler::{sample, sample_batch, GuidanceHook, GuidanceWindow, IdentityHook};
pub use schedule::DiffusionSchedule;
