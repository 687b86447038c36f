//! Products, paraproducts and commutators of martingales on finite
//! atom-generated filtrations.
//!
//! The crate builds filtrations on `[0,1)` ([`filtration`]), evaluates
//! martingale operators and norms ([`martingale`]), splits products of
//! martingales into paraproducts and a bounded-variation part ([`decomp`]),
//! implements transforms, the dyadic Hilbert transform and Walsh–Cesàro means
//! ([`operators`]), estimates commutator constants ([`commutator`]) and runs
//! verification suites ([`harness`]).

pub mod error;
pub mod filtration;
pub mod martingale;
pub mod decomp;
pub mod operators;
pub mod commutator;
pub mod harness;

pub use error::{Error, Result};
pub use filtration::{CellRef, FiltrationTree, TreeSpec};
pub use martingale::{Martingale, NormKind, StepFunction};
