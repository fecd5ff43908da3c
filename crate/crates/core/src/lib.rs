//! Discovery of conserved quantities for dynamical systems.
//!
//! The crate is organised as a pipeline: [`systems`] defines vector fields and
//! samplers, [`nn`] and [`train`] fit neural scalar fields whose gradients are
//! orthogonal to the flow, [`rank`] counts how many of them are functionally
//! independent, and [`symbolic`] enumerates closed-form candidates. The
//! [`pipeline`] module ties the stages together behind the `conserva` binary.

pub mod csvio;
pub mod dual;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod rank;
pub mod symbolic;
pub mod systems;
pub mod train;

pub use error::{Error, Result};
pub use systems::{SampleBatch, System};
