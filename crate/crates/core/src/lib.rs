//! Crowdsourcing task-arrangement simulator with a dual deep-Q engine.

pub mod agent;
pub mod baselines;
pub mod bench;
pub mod domain;
pub mod error;
pub mod learner;
pub mod metrics;
pub mod policy;
pub mod qnetwork;
pub mod requester;
pub mod simulator;
pub mod tensor;
pub mod worker;

pub use error::{Error, Result};
