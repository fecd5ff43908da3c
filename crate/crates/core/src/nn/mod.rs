//! Neural scalar fields with exact input and parameter gradients.

pub mod field;
pub mod io;
pub mod mlp;

pub use field::{ArchSpec, Feature, FieldTape, NeuralField, PdeFeature, Term};
pub use mlp::Mlp;
