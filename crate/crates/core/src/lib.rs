//! Few-shot spoken term classification by episodic meta-learning.
//!
//! The crate trains a CNN initializer over meta-tasks sampled from a keyword
//! corpus, fine-tunes it on K examples of unseen user-defined keywords, and
//! classifies among those keywords plus two fixed classes (silence and
//! unknown). It ships its own reverse-mode autodiff with double-backward
//! support, an MFCC front-end, episodic samplers, and an evaluation harness
//! producing accuracy tables with confidence intervals.

pub mod audio;
pub mod autodiff;
pub mod dataset;
pub mod episodes;
pub mod gradcheck;
pub mod meta;
pub mod model;
pub mod params;
pub mod scalar;
pub mod seeds;
pub mod synth;
pub mod tensor;

pub use autodiff::{grad, grad_of_grad, NoGradGuard, Var};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tensor::{ConvGeom, Tensor, TensorError};
