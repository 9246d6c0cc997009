//! Numerical foundation: dense matrices, trainable parameters, Adam,
//! reverse-mode autodiff, finite-difference gradient checking, and dominant
//! eigenvalue estimation. Everything is `f64` and deterministic given a seed.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod param;
pub mod spectral;
pub mod tape;

pub use gradcheck::{gradcheck, GradCheckReport};
pub use matrix::DenseMatrix;
pub use optim::{adam_step, multistep_lr, AdamState};
pub use param::{seeded_rng, ParamId, ParamSet, Parameter};
pub use spectral::{power_iteration, PowerIterationResult};
pub use tape::{stable_sigmoid, NodeId, Tape};
