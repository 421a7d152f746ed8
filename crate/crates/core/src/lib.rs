//! Test-time-training (TTT) sequence layers and the machinery around them.
//!
//! A TTT layer's forward pass is a small training run: a learner `f` with
//! weights `W` is fitted to reconstruct the layer's own input tokens, and the
//! fitted learner then produces the output tokens. The crate contains
//!
//! * [`graph`]: reverse-mode autodiff whose gradients are graph nodes, so an
//!   outer objective can be differentiated through inner gradient steps;
//! * [`ttt`]: the inner loop for linear and MLP learners, multi-head;
//! * [`attention`]: softmax attention, linear attention and the
//!   Nadaraya–Watson estimator as plain reference functions;
//! * [`model`]: a small ViT-style classifier built from those layers;
//! * [`optim`]: AdamW / SGD with momentum and a cosine schedule;
//! * [`flops`]: exact symbolic FLOP counts.
//!
//! The crate is `no_std` with `alloc` when the default `std` feature is off.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod ttt;

pub use error::{Error, Result};
pub use graph::{GradMap, Graph, Var};
pub use real::{DType, Real};
pub use tensor::Tensor;
