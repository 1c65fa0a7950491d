//! Learning dynamic subtask assignment for cooperative multi-agent value learning.
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod learner;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod replay;
pub mod repr;
pub mod rollout;
pub mod selection;
pub mod sweep;
pub mod train;

pub use config::{Ablation, RunConfig};
pub use error::{Error, Result};
