//! Losses, optimizers, learning-rate schedule and the staged workflow.

pub mod loss;
pub mod optim;
pub mod samples;
pub mod schedule;
pub mod stages;
