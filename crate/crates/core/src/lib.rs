//! Security-analysis toolkit for delay-based PUFs.
//!
//! Simulates arbiter, XOR-arbiter, and component-differentially-challenged
//! XOR (CDC-XOR) PUFs, generates challenge-response datasets, and mounts
//! two machine-learning modeling attacks against them: an adapted
//! logistic-regression model with one linear delay model per component,
//! and a tanh multilayer perceptron. A benchmark harness sweeps training
//! sizes over instance ensembles and reports success rates the way PUF
//! attack studies usually tabulate them.

pub mod attack;
pub mod crp;
pub mod error;
pub mod harness;
pub mod lr;
pub mod nn;
pub mod puf;

pub use error::{Error, Result};
