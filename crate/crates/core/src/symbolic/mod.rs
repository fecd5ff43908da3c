//! Symbolic regression by exhaustive enumeration of RPN formulas.

pub mod binding;
pub mod eval;
pub mod grammar;
pub mod search;

pub use binding::{integral_wrap, Binding, BoundFormula};
pub use grammar::{enumerate, templates, BinOp, Formula, Grammar, Token, UnOp};
pub use search::{fast_reject, full_verify, search, Counters, FormulaStats, SearchConfig, SearchState, VerifyStats};
