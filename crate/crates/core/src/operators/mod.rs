//! Martingale transforms, fractional integrals, the dyadic Hilbert transform
//! and the Walsh system.

mod haar;
mod transform;
mod walsh;

pub use haar::{
    dyadic_hilbert, dyadic_hilbert_adjoint, hilbert_on_jump, operator_norm_power_iteration,
    HaarSystem,
};
pub use transform::{
    fractional_integral, fractional_integral_partial, martingale_transform, maximal_transform,
    TransformSymbol,
};
pub use walsh::WalshContext;
