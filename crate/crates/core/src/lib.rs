//! Retrieve-and-fit: deformation-aware retrieval of part-based source shapes
//! jointly trained with a structure-aware neural deformation module.

pub mod corpus;
pub mod deformnet;
pub mod error;
pub mod evalbench;
pub mod geometry;
pub mod partmodel;
pub mod retrieval;
pub mod tensornet;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
