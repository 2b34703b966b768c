//! Implicit PAC-Bayes few-shot meta-learning.
//!
//! Task-specific network weights are drawn from implicit distributions: latent
//! noise conditioned on the support set is pushed through a weight generator.
//! The KL term between the adapted posterior and the shared prior is
//! estimated with a discriminator, and the meta-update minimises a PAC-Bayes
//! upper bound on the few-shot generalisation error.

pub mod atomic;
pub mod autodiff;
pub mod calibration_metrics;
pub mod cli_experiments;
pub mod error;
pub mod kl_estimation;
pub mod meta_learning;
pub mod networks;
pub mod optim;
pub mod pac_bound;
pub mod stochastic;
pub mod task_environments;

pub use error::{Error, Result};
