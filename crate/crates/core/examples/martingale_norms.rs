//! Norm table for one random martingale on a dyadic tree and on the
//! non-doubling tree, where cell masses shrink like 2^{-k²}.

use martingale_products::filtration::{build_nondoubling_measure, uniform_dyadic};
use martingale_products::harness::random_martingale;
use martingale_products::martingale::norm;
use martingale_products::{NormKind, Result};

fn main() -> Result<()> {
    let kinds = [
        ("L1", NormKind::Lp(1.0)),
        ("L2", NormKind::Lp(2.0)),
        ("weak L1", NormKind::WeakLq(1.0)),
        ("L log", NormKind::Llog),
        ("H1 (square)", NormKind::H1),
        ("h1 (conditional)", NormKind::H1Conditional),
        ("h1 (jumps)", NormKind::H1Jump),
        ("H log maximal", NormKind::HlogMaximal),
        ("BMO2", NormKind::Bmo(2.0)),
        ("bmo2", NormKind::BmoConditional(2.0)),
        ("bmo jumps", NormKind::BmoJump),
        ("bmo log", NormKind::BmoLog),
    ];
    for (name, tree) in [("dyadic", uniform_dyadic(6)?), ("non-doubling", build_nondoubling_measure(6)?)] {
        let f = random_martingale(&tree, 7);
        println!("{name} tree, regularity constant {:.4}", tree.regularity_constant()?);
        for (label, kind) in kinds {
            println!("  {label:<18} {:.6e}", norm(&f, kind)?);
        }
    }
    Ok(())
}
