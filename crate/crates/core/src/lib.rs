//! GFlowNet fine-tuning of small autoregressive policies on sequential
//! decision tasks.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod envs;
pub mod error;
pub mod eval;
pub mod losses;
pub mod policy;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
