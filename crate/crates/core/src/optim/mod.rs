//! Numerical optimizers.

mod adadelta;
pub mod lbfgs;

pub use adadelta::Adadelta;
pub use lbfgs::{minimize, FnObjective, Iterate, LbfgsOptions, LbfgsReport, Objective, StopReason};
