//! Ensemble Kalman inversion with box constraints on the parameters.

pub mod constraints;
pub mod diagnostics;
pub mod dynamics;
pub mod experiment;
pub mod ensemble;
pub mod forward;
pub mod integrate;
pub mod oracle;
pub mod priors;
