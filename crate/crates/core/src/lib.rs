//! One-shot layer pruning and normalized feature distillation for a toy
//! staged denoising network.
//!
//! The crate is organized as a pipeline:
//!
//! - [`autodiff`]: dense f64 tensors with reverse-mode differentiation
//! - [`net`]: the configurable staged denoiser with removable layers
//! - [`diffusion`]: noise schedule, synthetic data, and the denoising task loss
//! - [`criteria`]: per-layer importance criteria (the knapsack values)
//! - [`knapsack`]: solvers for the minimize-value / cover-capacity knapsack
//! - [`pruner`]: criterion table -> knapsack -> removal set -> pruned network
//! - [`additivity`]: joint-removal vs summed single-removal validation sweeps
//! - [`distill`]: teacher/student retraining with normalized feature matching
//! - [`fixtures`]: constructed networks with known analytic structure, used
//!   by the validation suites

pub mod additivity;
pub mod autodiff;
pub mod criteria;
pub mod diffusion;
pub mod distill;
pub mod fixtures;
pub mod knapsack;
pub mod net;
pub mod pruner;
pub mod textio;
