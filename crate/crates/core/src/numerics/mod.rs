//! Dense linear algebra, a small conditional MLP with exact gradients,
//! optimizers, and seeded random streams.

pub mod linalg;
pub mod mlp;
pub mod optim;
pub mod parallel;
pub mod rng;

pub use linalg::Mat;
pub use mlp::{Activation, Conditioning, ConditioningSpec, Dense, Grads, Mlp, MlpSpec, Tape};
pub use optim::{sgd_step, Optimizer, OptimizerKind, ParamMask};
pub use rng::{gaussian_sample, Rng};
