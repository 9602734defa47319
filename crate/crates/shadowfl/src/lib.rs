//! Deterministic federated-learning simulator and robust-filtering library.
//!
//! The crate implements a shadow-learning backdoor defense (a continuously
//! trained backbone model paired with a filtered, early-stopped shadow model),
//! the spectral filtering stack it relies on (robust covariance estimation,
//! whitening, QUE outlier scores), a set of baseline aggregation defenses, the
//! attack models used to evaluate them, and an empirical harness for the
//! defense's theoretical guarantees.

pub mod nn;
pub mod numerics;
pub mod checkpoint;
pub mod data;
pub mod rng;
