//! Federated learning simulator comparing momentum-initialization strategies.
//!
//! The crate provides a small dense-network training stack ([`nn`]), dataset
//! loading and Dirichlet partitioning ([`data`]), local momentum bookkeeping
//! including the reversed estimator ([`optim`]), the server/client federation
//! loop ([`fed`]), evaluation and gradient-divergence metrics ([`metrics`]),
//! and sweep orchestration with resumable CSV output ([`experiment`]).
//!
//! Every run is a pure function of its config: all randomness flows through
//! named [`stream`] generators, so results are byte-identical across reruns
//! and thread counts.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod stream;

pub use error::{Error, Result};
