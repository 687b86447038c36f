//! The dyadic Hilbert transform on the non-doubling tree: power iteration
//! for its L²(μ) norm and the single-level formula on one jump.

use martingale_products::decomp::{random_atom, AtomKind};
use martingale_products::filtration::build_nondoubling_measure;
use martingale_products::operators::{dyadic_hilbert, hilbert_on_jump, operator_norm_power_iteration, HaarSystem};
use martingale_products::Result;

fn main() -> Result<()> {
    let tree = build_nondoubling_measure(10)?;
    let sys = HaarSystem::new(tree.clone())?;
    let norm = operator_norm_power_iteration(&tree, |v| sys.apply(v), |v| sys.apply_adjoint(v), 200, 0);
    println!("‖H_D‖ on L²(μ) ≈ {norm:.9}");

    let jump = random_atom(&tree, 4, &[0], AtomKind::Jump, 11, None)?;
    let full = dyadic_hilbert(&sys, &jump.function)?;
    let single = hilbert_on_jump(&sys, &jump)?;
    let diff = full
        .values()
        .iter()
        .zip(single.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("single-level formula vs full transform: {:.2e} relative", diff / full.sup_norm());
    Ok(())
}
