//! Sum-of-norms personalized federated learning.
//!
//! Each of N users holds a convex loss `f_i` and a personal model `x_i`;
//! the penalty `lambda * sum ||x_i - x_j||` fuses models of similar users
//! into exactly equal vectors.

pub mod error;
pub mod linalg;
pub mod losses;
pub mod problem;

pub use error::{Error, Result};
pub use losses::{LabeledPoint, LossKind, LossSpec};
pub use problem::{Convention, FederationProblem, LossScale, PairOrder, Partition, PenaltyKind, Stack};
pub mod clustering;
mod conic;
pub mod datagen;
pub mod experiment;
pub mod oracle;
pub mod pdmm;
pub mod smooth;
pub mod theory;
