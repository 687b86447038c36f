//! Walsh–Dirichlet and Fejér kernels, the fast Walsh–Hadamard transform and
//! the Walsh–Cesàro maximal function of a step function.

use martingale_products::operators::WalshContext;
use martingale_products::{Result, StepFunction};

fn main() -> Result<()> {
    let ctx = WalshContext::new(6)?;
    for n in [1, 4, 5, 16] {
        let d = ctx.dirichlet_kernel(n)?;
        let k = ctx.fejer_kernel(n)?;
        println!(
            "n = {n:>2}: D_n(0) = {:>3}, ∫D_n = {:.3}, K_n(0) = {:.3}, ∫|K_n| = {:.4}",
            d.values()[0],
            d.integral(),
            k.values()[0],
            k.abs().integral()
        );
    }

    let values: Vec<f64> = (0..ctx.size()).map(|j| if j < ctx.size() / 3 { 1.0 } else { 0.0 }).collect();
    let f = StepFunction::new(ctx.tree().clone(), values)?;
    let coefs = ctx.fwht(&f)?;
    println!("first Walsh coefficients {:?}", &coefs[..4]);
    let sigma = ctx.cesaro_maximal(&f)?;
    println!("‖σ*f‖_∞ = {:.4}, ‖σ*f‖_1 = {:.4}", sigma.sup_norm(), sigma.integral());
    Ok(())
}
