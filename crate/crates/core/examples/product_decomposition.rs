//! Splits the product of two random martingales into the paraproducts
//! Π₁, Π₂ and the bounded-variation part L, then checks the identity
//! `f_n g_n = Π₁ₙ + Π₂ₙ + Lₙ` on every level.

use martingale_products::decomp::product_decompose;
use martingale_products::filtration::uniform_dyadic;
use martingale_products::harness::{generate_bmo, random_martingale, BmoProfile};
use martingale_products::{NormKind, Result};

fn main() -> Result<()> {
    let tree = uniform_dyadic(8)?;
    let f = random_martingale(&tree, 1);
    let g = generate_bmo(&tree, BmoProfile::HaarMix, 2).martingale();

    let d = product_decompose(&f, &g)?;
    println!("identity error      {:.3e}", d.identity_error(&f, &g));
    println!("‖f‖_H1              {:.6}", martingale_products::martingale::norm(&f, NormKind::H1)?);
    println!("‖g‖_BMO2            {:.6}", martingale_products::martingale::norm(&g, NormKind::Bmo(2.0))?);
    println!("‖Π₁(f,g)‖_h1        {:.6}", martingale_products::martingale::norm(&d.pi1, NormKind::H1Conditional)?);
    println!("‖Π₂(f,g)‖_H1        {:.6}", martingale_products::martingale::norm(&d.pi2, NormKind::H1)?);
    println!("variation of L      {:.6}", d.l.variation_norm());
    Ok(())
}
