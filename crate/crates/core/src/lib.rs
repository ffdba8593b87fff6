//! Scaled-down self-supervised learning on a desk.
//!
//! The crate bundles everything needed to pretrain small residual networks
//! with MoCo, SimCLR or BYOL at reduced input resolution, fine-tune them,
//! and account for the compute spent:
//!
//! - [`autograd`], [`tensor`], [`rng`], [`gradcheck`]: the numeric core.
//! - [`backbone`]: ResNet specs, truncation, re-initialization and heads.
//! - [`augment`]: view generation and fine-tuning transforms.
//! - [`ssl`]: InfoNCE, NT-Xent, BYOL loss, momentum encoders and queues.
//! - [`schedule`] and [`cost`]: learning-rate policies, resolution
//!   curricula and the MAC model.
//! - [`train`]: pretraining, warmup, fine-tuning and linear evaluation.
//! - [`eval`] and [`report`]: accuracy, Grad-CAM, localization, run reports.
//! - [`dataset`], [`checkpoint`], [`config`]: files on disk.

pub mod augment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod report;
pub mod schedule;
pub mod ssl;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Target, Var};
pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{DType, Scalar, Tensor};
